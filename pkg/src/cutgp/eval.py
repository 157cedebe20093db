"""Strategy evaluation: seeded rollouts, metric tables and Welch t-tests."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import sim

log = logging.getLogger(__name__)

METRICS = ("completion_time", "path_deviation", "tool_load", "mrv")
COMPONENTS = ("mrv", "time", "path", "force")
MOVING_AVERAGE_POINTS = 50


@dataclass
class EpisodeRecord:
    seed: int
    reward: float
    completion_time: float
    path_deviation: float
    tool_load: float
    mrv: float
    components: dict
    action_change: float

    @classmethod
    def from_trajectory(cls, traj: sim.Trajectory, weights: sim.RewardWeights,
                        rate_bounds=None) -> "EpisodeRecord":
        s = traj.states
        n = len(traj)
        if rate_bounds is None:
            rate_bounds = np.ones(traj.actions.shape[1] if n else sim.ACT_DIM)
        return cls(
            seed=int(traj.seed) if traj.seed is not None else -1,
            reward=traj.total_reward,
            completion_time=float(n * traj.dt),
            path_deviation=float(np.mean(np.linalg.norm(s["e"], axis=1))) if n else 0.0,
            tool_load=float(np.mean(np.linalg.norm(s["f"], axis=1))) if n else 0.0,
            mrv=float(np.sum(s["d_mrv"])),
            components=weights.components(s["d_mrv"], traj.dt, s["e"], s["f"]) if n else
            {k: 0.0 for k in COMPONENTS},
            action_change=action_change(traj.actions, rate_bounds),
        )


def action_change(actions: np.ndarray, rate_bounds) -> float:
    """Mean absolute per-step change of the bound-scaled action."""
    a = np.asarray(actions, dtype=float)
    if a.shape[0] < 2:
        return 0.0
    return float(np.mean(np.abs(np.diff(a / np.asarray(rate_bounds, dtype=float), axis=0))))


@dataclass
class StrategyReport:
    name: str
    episodes: list = field(default_factory=list)  # EpisodeRecord
    domain: str = "clean"

    @property
    def rewards(self) -> np.ndarray:
        return np.array([e.reward for e in self.episodes])

    def summary(self) -> dict:
        out = {"strategy": self.name, "domain": self.domain, "episodes": len(self.episodes)}
        r = self.rewards
        out["reward_mean"] = float(r.mean()) if r.size else math.nan
        out["reward_std"] = float(r.std(ddof=1)) if r.size > 1 else math.nan
        for m in METRICS + ("action_change",):
            out[m] = float(np.mean([getattr(e, m) for e in self.episodes])) if self.episodes else math.nan
        for c in COMPONENTS:
            out[f"component_{c}"] = (float(np.mean([e.components[c] for e in self.episodes]))
                                     if self.episodes else math.nan)
        return out

    def to_json(self) -> dict:
        return {"name": self.name, "domain": self.domain,
                "episodes": [vars(e) for e in self.episodes], "summary": self.summary()}

    @classmethod
    def from_json(cls, doc: dict) -> "StrategyReport":
        return cls(doc["name"], [EpisodeRecord(**e) for e in doc["episodes"]], doc.get("domain", "clean"))


def evaluate_strategy(env: sim.CutEnv, policy, name: str, seeds: Sequence[int],
                      keep_trajectories: bool = False):
    """Roll ``policy`` out once per seed; returns the report (and trajectories)."""
    rep = StrategyReport(name, domain="augmented" if env.augmented else "clean")
    trajs = []
    for s in seeds:
        traj = sim.rollout(env, policy, seed=int(s))
        rep.episodes.append(EpisodeRecord.from_trajectory(traj, env.weights, env.rate_bounds))
        if keep_trajectories:
            trajs.append(traj)
    return (rep, trajs) if keep_trajectories else rep


def baseline_env_config(config: dict) -> dict:
    """The fixed-parameter baseline: nominal feed and 1 mm depth from the first step."""
    return sim.merge_config(config, {"initial": {"t_delta": 0.0, "n_delta": 1.0}})


# ------------------------------------------------------------- statistics

@dataclass
class WelchResult:
    t: float
    df: float
    p: float


def welch_t(a, b) -> WelchResult:
    """Two-sided unequal-variance t-test with Welch-Satterthwaite degrees of freedom."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least 2 observations")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    se2 = va + vb
    diff = a.mean() - b.mean()
    if se2 == 0:
        if diff == 0:
            return WelchResult(0.0, float(a.size + b.size - 2), 1.0)
        return WelchResult(math.copysign(math.inf, diff), float(a.size + b.size - 2), 0.0)
    t = diff / math.sqrt(se2)
    df = se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    p = float(2.0 * stats.t.sf(abs(t), df))
    return WelchResult(float(t), float(df), min(1.0, p))


def violin_data(rewards, n_kde: int = 64) -> dict:
    r = np.asarray(rewards, dtype=float)
    q = np.quantile(r, [0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0]) if r.size else np.full(7, np.nan)
    out = {"quantiles": dict(zip(["min", "q05", "q25", "median", "q75", "q95", "max"], q.tolist())),
           "samples": r.tolist()}
    if r.size > 1 and np.ptp(r) > 0:
        kde = stats.gaussian_kde(r)
        pad = 0.25 * np.ptp(r)
        grid = np.linspace(r.min() - pad, r.max() + pad, n_kde)
        out["kde"] = {"x": grid.tolist(), "density": kde(grid).tolist()}
    return out


def compare(reports: Sequence[StrategyReport]) -> dict:
    """Metric table, violin data and pairwise Welch tests on episodic rewards."""
    if len(reports) < 2:
        raise ValueError("compare() needs at least two reports")
    table = [r.summary() for r in reports]
    tests, notices = [], []
    for a, b in itertools.combinations(reports, 2):
        if len(a.episodes) < 2 or len(b.episodes) < 2:
            notices.append(f"skipped t-test {a.name} vs {b.name}: fewer than 2 episodes")
            continue
        w = welch_t(a.rewards, b.rewards)
        tests.append({"a": a.name, "b": b.name, "t": w.t, "df": w.df, "p": w.p})
    return {"table": table, "violin": {r.name: violin_data(r.rewards) for r in reports},
            "tests": tests, "notices": notices}


# ---------------------------------------------------------------- exports

def moving_average(x, n: int = MOVING_AVERAGE_POINTS) -> np.ndarray:
    """Trailing moving average; the first ``n - 1`` outputs average what is available."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return x.copy()
    c = np.cumsum(np.r_[0.0, x])
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - n, 0)
    return (c[idx] - c[lo]) / (idx - lo)


TRACE_EXPORT_COLUMNS = ("episode", "t", "t_delta", "n_delta", "Kp_x", "Kp_y", "Kp_z",
                        "e_x", "e_z", "F_y", "F_z", "F_y_ma", "F_z_ma", "reward")


def trace_rows(traj: sim.Trajectory, episode: int = 0):
    s = traj.states
    fy_ma = moving_average(s["f"][:, 1])
    fz_ma = moving_average(s["f"][:, 2])
    for i in range(len(traj)):
        yield [episode, s["t"][i], s["t_delta"][i], s["n_delta"][i],
               s["kp"][i, 0], s["kp"][i, 1], s["kp"][i, 2],
               s["e"][i, 0], s["e"][i, 2], s["f"][i, 1], s["f"][i, 2],
               fy_ma[i], fz_ma[i], traj.rewards[i]]


def export_traces(trajectories: dict, out_dir) -> list:
    """Write ``traces_<strategy>.csv`` per strategy; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, trajs in trajectories.items():
        p = out / f"traces_{name}.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_EXPORT_COLUMNS)
            for k, traj in enumerate(trajs):
                for row in trace_rows(traj, k):
                    w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        paths.append(p)
    return paths


def write_table_csv(table: list, path) -> None:
    keys = list(table[0].keys())
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, keys)
        w.writeheader()
        for row in table:
            w.writerow(row)


def save_reports(reports: Sequence[StrategyReport], path) -> None:
    Path(path).write_text(json.dumps([r.to_json() for r in reports], indent=1))


def load_reports(path) -> list:
    return [StrategyReport.from_json(d) for d in json.loads(Path(path).read_text())]
