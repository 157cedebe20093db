"""Synthetic force trials with known ground truth.

Each trial is a window of one underlying continuous signal: a smooth
contact ramp standing in for the mechanistic force plus a shared periodic
disturbance, observed with an integer sample lag, a smooth monotone time
warp and Gaussian sensor noise. The disturbance is an exact draw from the
periodic kernel through its Fourier expansion

    k(r) = s2 exp(-1/l^2) [I0(1/l^2) + 2 sum_n In(1/l^2) cos(2 pi n r / p)]

so it can be evaluated at arbitrary (warped) times.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import special

from .timeseries import ForceSeries, write_csv

DEFAULT_SYNTH = {
    "n_trials": 14,
    "n_samples": 2500,
    "rate_hz": 500.0,
    "period": 0.2,
    "length_scale": 1.0,
    "disturbance_std": [1.0, 1.5, 0.8],
    "steady_force": [1.0, 6.0, 1.4],
    "contact_time": 2.0,
    "contact_rise": 0.15,
    "max_lag": 40,
    "warp": 0.02,  # peak relative rate deviation of the time warp
    "noise_std": 0.1,
    "harmonics": 24,
    "reference": 0,
}


def fourier_weights(length_scale: float, n_harmonics: int) -> np.ndarray:
    """Spectral weights ``c_n`` of the unit-variance periodic kernel, n = 0..N."""
    a = 1.0 / length_scale ** 2
    n = np.arange(n_harmonics + 1)
    c = special.ive(n, a)  # exp(-a) I_n(a)
    c[1:] *= 2.0
    return c


class PeriodicSignal:
    """A draw from the zero-mean periodic-kernel prior, evaluable anywhere."""

    def __init__(self, period, length_scale, variance, rng, n_harmonics=24):
        self.period = float(period)
        c = fourier_weights(length_scale, n_harmonics) * float(variance)
        self.amp_cos = np.sqrt(c) * rng.standard_normal(c.shape[0])
        self.amp_sin = np.sqrt(c) * rng.standard_normal(c.shape[0])
        self.amp_sin[0] = 0.0

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        w = 2.0 * np.pi * np.arange(self.amp_cos.shape[0]) / self.period
        ph = t[..., None] * w
        return np.cos(ph) @ self.amp_cos + np.sin(ph) @ self.amp_sin


def warp_fn(amplitude: float, duration: float, phase: float):
    """Monotone warp ``tau(t) = t + a D / (2 pi) sin(2 pi t / D + phase)``."""
    if abs(amplitude) >= 1:
        raise ValueError("warp amplitude must be below 1 to stay monotone")
    k = 2.0 * np.pi / duration

    def tau(t):
        return t + amplitude / k * (np.sin(k * t + phase) - np.sin(phase))

    return tau


def mechanistic_force(cfg: dict, t) -> np.ndarray:
    """Noise-free process force: a smooth contact ramp up to the steady force."""
    t = np.asarray(t, dtype=float)
    steady = np.broadcast_to(np.asarray(cfg["steady_force"], dtype=float), (3,))
    ramp = 0.5 * (1.0 + np.tanh((t - cfg["contact_time"]) / cfg["contact_rise"]))
    return ramp[:, None] * steady


def true_times(truth: dict, i: int) -> np.ndarray:
    """Underlying signal time observed by every sample of trial ``i``."""
    cfg = truth["config"]
    n, fs = int(cfg["n_samples"]), float(cfg["rate_hz"])
    tau = warp_fn(truth["warp_amplitudes"][i], n / fs, truth["warp_phases"][i])
    return tau(np.arange(n) / fs) + truth["offsets"][i] / fs


def generate(config: Optional[dict] = None, seed: int = 0):
    """Return ``(trials, truth, clean)``.

    ``truth`` is JSON-serialisable; ``clean`` holds the noise-free trials,
    shape ``(n_trials, n_samples, 3)``.
    """
    cfg = dict(DEFAULT_SYNTH)
    cfg.update(config or {})
    rng = np.random.default_rng([int(seed), 0x5917])
    n, fs = int(cfg["n_samples"]), float(cfg["rate_hz"])
    n_trials = int(cfg["n_trials"])
    dur = n / fs
    std = np.broadcast_to(np.asarray(cfg["disturbance_std"], dtype=float), (3,))
    steady = np.broadcast_to(np.asarray(cfg["steady_force"], dtype=float), (3,))
    dist = [PeriodicSignal(cfg["period"], cfg["length_scale"], s * s, rng, int(cfg["harmonics"]))
            for s in std]

    def clean(t):
        return mechanistic_force(cfg, t) + np.stack([d(t) for d in dist], axis=-1)

    ref = int(cfg["reference"])
    max_lag = int(cfg["max_lag"])
    # trial sample k observes underlying sample k + offset; the alignment
    # lag (trial[n + lag] ~ reference[n]) is therefore -offset
    offsets = rng.integers(-max_lag, max_lag + 1, n_trials)
    offsets[ref] = 0
    warps = rng.uniform(-1.0, 1.0, n_trials) * float(cfg["warp"])
    phases = rng.uniform(0.0, 2.0 * np.pi, n_trials)
    warps[ref] = 0.0
    trials, clean_trials = [], []
    t_local = np.arange(n) / fs
    for i in range(n_trials):
        tau = warp_fn(warps[i], dur, phases[i])
        t_true = tau(t_local) + offsets[i] / fs
        c = clean(t_true)
        noisy = c + float(cfg["noise_std"]) * rng.standard_normal(c.shape)
        trials.append(ForceSeries(t_local.copy(), noisy, f"trial_{i:02d}.csv"))
        clean_trials.append(c)
    truth = {
        "config": cfg,
        "seed": int(seed),
        "offsets": offsets.tolist(),
        "lags": (-offsets).tolist(),
        "warp_amplitudes": warps.tolist(),
        "warp_phases": phases.tolist(),
        "kernel": {"p": float(cfg["period"]), "l": float(cfg["length_scale"]),
                   "signal_variance": (std ** 2).tolist()},
        "reference": ref,
    }
    return trials, truth, np.stack(clean_trials)


def write(out_dir, config: Optional[dict] = None, seed: int = 0) -> dict:
    """Write ``trial_XX.csv`` files and ``truth.json``; returns the truth."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trials, truth, _ = generate(config, seed)
    files = []
    for s in trials:
        write_csv(s, out / s.source)
        files.append(s.source)
    truth["files"] = files
    # the process-model prediction on the reference trial's clock
    ref = trials[truth["reference"]]
    write_csv(ForceSeries(ref.timestamps, mechanistic_force(truth["config"], ref.timestamps),
                          "mechanistic.csv"), out / "mechanistic.csv")
    truth["mechanistic_file"] = "mechanistic.csv"
    (out / "truth.json").write_text(json.dumps(truth, indent=1))
    return truth
