"""Report figures: reward violins, reward components and trace panels."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
    # keep SVG/PDF output byte-stable across runs
    "svg.hashsalt": "cutgp",
    "pdf.compression": 0,
}


def _save(fig, path):
    path = Path(path)
    meta = {"Software": None} if path.suffix == ".png" else {"Creator": None, "Date": None}
    fig.savefig(path, metadata=meta)
    plt.close(fig)
    return path


def reward_violins(rewards: dict, path, title: str = "episodic reward"):
    names = list(rewards)
    data = [np.asarray(rewards[n], dtype=float) for n in names]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(names), 3.0))
        ok = [i for i, d in enumerate(data) if d.size > 1 and np.ptp(d) > 0]
        if ok:
            ax.violinplot([data[i] for i in ok], positions=[i + 1 for i in ok],
                          showmedians=True, widths=0.8)
        for i, d in enumerate(data):
            ax.scatter(np.full(d.size, i + 1.0), d, s=4, color="k", alpha=0.4, zorder=3)
        ax.set_xticks(range(1, len(names) + 1), names)
        ax.set_ylabel("reward")
        ax.set_title(title)
        return _save(fig, path)


def reward_components(table: list, path):
    comps = ("mrv", "time", "path", "force")
    names = [row["strategy"] for row in table]
    x = np.arange(len(names))
    w = 0.8 / len(comps)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(names), 3.0))
        for k, c in enumerate(comps):
            ax.bar(x + (k - 1.5) * w, [row[f"component_{c}"] for row in table], w, label=c)
        ax.axhline(0.0, color="k", lw=0.6)
        ax.set_xticks(x, names)
        ax.set_ylabel("mean reward contribution")
        ax.legend(frameon=False, ncol=4, fontsize=7)
        return _save(fig, path)


def trace_panels(traces: dict, path):
    """``traces`` maps strategy -> dict of columns for one episode."""
    panels = [("t_delta", "feed adj."), ("n_delta", "DoC (mm)"), ("Kp_z", "K_p,z"),
              ("e_x", "e_x (mm)"), ("e_z", "e_z (mm)"), ("F_y_ma", "F_y (N)"), ("F_z_ma", "F_z (N)")]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(panels), 1, figsize=(6.0, 1.2 * len(panels)), sharex=True)
        for name, cols in traces.items():
            for ax, (key, label) in zip(axes, panels):
                ax.plot(cols["t"], cols[key], lw=0.9, label=name)
                ax.set_ylabel(label, fontsize=7)
        axes[0].legend(frameon=False, ncol=len(traces), fontsize=7)
        axes[-1].set_xlabel("t (s)")
        return _save(fig, path)
