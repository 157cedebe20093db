"""Periodic Gaussian-process model of residual disturbance forces.

One independent zero-mean GP per force axis with an exponential-sine
kernel ``s2 * exp(-2 sin^2(pi |t - t'| / p) / l^2)``. Hyperparameters are
fitted by minimising the exact negative log marginal likelihood from
several starting points.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import linalg as sla
from scipy import optimize

log = logging.getLogger(__name__)

AXES = ("x", "y", "z")
LOG_2PI = math.log(2.0 * math.pi)


class GpError(RuntimeError):
    pass


@dataclass(frozen=True)
class PeriodicKernel:
    period: float
    length_scale: float
    signal_variance: float = 1.0

    def __post_init__(self):
        if not (self.period > 0 and self.length_scale > 0 and self.signal_variance > 0):
            raise ValueError(f"kernel parameters must be positive: {self}")

    def __call__(self, t, t_prime=None) -> np.ndarray:
        t = np.asarray(t, dtype=float).reshape(-1)
        tp = t if t_prime is None else np.asarray(t_prime, dtype=float).reshape(-1)
        r = np.abs(t[:, None] - tp[None, :])
        s = np.sin(np.pi * r / self.period)
        return self.signal_variance * np.exp(-2.0 * s * s / self.length_scale ** 2)

    def to_log(self) -> np.ndarray:
        return np.log([self.period, self.length_scale, self.signal_variance])


def kernel_eval(k: PeriodicKernel, t: float, t_prime: float) -> float:
    s = math.sin(math.pi * abs(t - t_prime) / k.period)
    return k.signal_variance * math.exp(-2.0 * s * s / k.length_scale ** 2)


@dataclass
class ResidualTargets:
    """Training targets for the disturbance model.

    ``times`` may repeat (one entry per recording and grid point).
    ``extra_noise`` is a per-point variance added to the fitted noise.
    """

    times: np.ndarray
    residuals: np.ndarray
    extra_noise: Optional[np.ndarray] = None
    flags: list = field(default_factory=list)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        r = np.asarray(self.residuals, dtype=float)
        if r.ndim == 1:
            r = r[:, None]
        self.residuals = r
        if r.shape[0] != self.times.shape[0]:
            raise GpError("times and residuals differ in length")
        if self.extra_noise is None:
            self.extra_noise = np.zeros_like(r)
        else:
            self.extra_noise = np.broadcast_to(np.asarray(self.extra_noise, dtype=float), r.shape).copy()
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(self.times))):
            raise GpError("residual targets must be finite")

    def __len__(self):
        return self.times.shape[0]


def compute_residuals(dataset, predicted=None, newtons: bool = True) -> ResidualTargets:
    """Residual force = measured - mechanistic prediction, stacked over series.

    ``predicted`` may be ``None`` (no mechanistic context: residual is the
    measured force), ``"mean"`` (each recording's mean force stands in for
    the steady mechanistic force) or an array broadcastable to
    ``(n_series, n_time, 3)`` in newtons.
    """
    grid = np.asarray(dataset.time_grid, dtype=float)
    flags = []
    measured = []
    for s in dataset.series:
        if s.values.shape[0] != grid.shape[0]:
            raise GpError("series length does not match the dataset time grid")
        measured.append(s.denormalize() if newtons else s.values)
    measured = np.stack(measured)
    if predicted is None:
        pred = np.zeros_like(measured)
        flags.append("no_mechanistic_context")
    elif isinstance(predicted, str) and predicted == "mean":
        pred = np.broadcast_to(measured.mean(axis=1, keepdims=True), measured.shape)
        flags.append("mean_as_mechanistic")
    else:
        pred = np.asarray(predicted, dtype=float)
        try:
            pred = np.broadcast_to(pred, measured.shape)
        except ValueError as exc:
            raise GpError(f"prediction shape {pred.shape} does not match grid {measured.shape}") from exc
    resid = measured - pred
    n_series, n_time, n_ax = resid.shape
    times = np.tile(grid, n_series)
    return ResidualTargets(times, resid.reshape(n_series * n_time, n_ax), flags=flags)


def condense(targets: ResidualTargets, max_points: int = 1500) -> ResidualTargets:
    """Bin targets uniformly in time down to at most ``max_points`` points.

    Each bin contributes its mean time and mean residual; the variance of the
    bin mean (within-bin variance / count) is added to the per-point noise.
    """
    if max_points < 16:
        raise GpError("max_points must be at least 16")
    if len(targets) <= max_points:
        return targets
    t = targets.times
    lo, hi = t.min(), t.max()
    edges = np.linspace(lo, hi, max_points + 1)
    idx = np.clip(np.searchsorted(edges, t, side="right") - 1, 0, max_points - 1)
    counts = np.bincount(idx, minlength=max_points).astype(float)
    keep = counts > 0
    n_ax = targets.residuals.shape[1]
    mt = np.bincount(idx, weights=t, minlength=max_points)[keep] / counts[keep]
    mr = np.empty((int(keep.sum()), n_ax))
    extra = np.empty_like(mr)
    for k in range(n_ax):
        y = targets.residuals[:, k]
        s1 = np.bincount(idx, weights=y, minlength=max_points)[keep]
        mean = s1 / counts[keep]
        dev = y - np.bincount(idx, weights=y, minlength=max_points)[idx] / counts[idx]
        var = np.bincount(idx, weights=dev * dev, minlength=max_points)[keep] / counts[keep]
        base = np.bincount(idx, weights=targets.extra_noise[:, k], minlength=max_points)[keep] / counts[keep]
        mr[:, k] = mean
        extra[:, k] = var / counts[keep] + base / counts[keep]
    return ResidualTargets(mt, mr, extra, flags=list(targets.flags) + [f"condensed:{max_points}"])


# ----------------------------------------------------------------- likelihood

def _chol(a: np.ndarray, jitter: float = 0.0, max_jitter: float = 1e-4):
    """Cholesky with escalating diagonal jitter; returns (L, jitter used)."""
    scale = max(1.0, float(np.mean(np.diag(a))))
    j = jitter
    while True:
        try:
            return sla.cholesky(a + j * scale * np.eye(a.shape[0]), lower=True,
                                check_finite=False), j
        except (np.linalg.LinAlgError, sla.LinAlgError):
            j = 1e-8 if j == 0 else j * 10
            if j > max_jitter:
                raise GpError("covariance matrix is not positive definite") from None


def nll(log_params: np.ndarray, t: np.ndarray, y: np.ndarray,
        extra: Optional[np.ndarray] = None, grad: bool = False):
    """Negative log marginal likelihood for one axis.

    ``log_params`` = log of (period, length scale, signal variance, noise
    variance). The log-determinant comes from the Cholesky diagonal. With
    ``grad`` the gradient w.r.t. ``log_params`` is returned too.
    """
    p, l, sv, nv = np.exp(log_params)
    n = t.shape[0]
    r = np.abs(t[:, None] - t[None, :])
    arg = np.pi * r / p
    s = np.sin(arg)
    K = sv * np.exp(-2.0 * s * s / (l * l))
    noise = nv + (0.0 if extra is None else extra)
    A = K + np.diag(np.broadcast_to(noise, (n,)))
    L, _ = _chol(A)
    alpha = sla.cho_solve((L, True), y, check_finite=False)
    val = 0.5 * float(y @ alpha) + float(np.sum(np.log(np.diag(L)))) + 0.5 * n * LOG_2PI
    if not grad:
        return val
    Ainv = sla.cho_solve((L, True), np.eye(n), check_finite=False)
    W = np.outer(alpha, alpha) - Ainv
    dK_dlogp = K * (2.0 * r * np.pi / (l * l * p)) * np.sin(2.0 * arg)
    dK_dlogl = K * (4.0 * s * s / (l * l))
    g = np.array([
        -0.5 * np.sum(W * dK_dlogp),
        -0.5 * np.sum(W * dK_dlogl),
        -0.5 * np.sum(W * K),
        -0.5 * nv * np.trace(W),
    ])
    return val, g


def _safe_nll(x, t, y, extra, grad):
    try:
        return nll(x, t, y, extra, grad)
    except GpError:
        if grad:
            return np.inf, np.zeros_like(x)
        return np.inf


def _fixed_period_nll(z, log_p, t, y, extra):
    val, g = _safe_nll(np.r_[log_p, z], t, y, extra, True)
    return val, g[1:]


@dataclass
class AxisFit:
    kernel: PeriodicKernel
    noise_variance: float
    nll: float


@dataclass
class HyperoptResult:
    best: list  # AxisFit per axis
    nll: float  # summed over axes
    starts: list  # per axis: list of dicts (init, init_nll, converged, nll)

    @property
    def kernels(self):
        return [b.kernel for b in self.best]

    @property
    def noise_variances(self):
        return [b.noise_variance for b in self.best]


def period_profile(t, y, noise_var, periods, max_points: int = 300):
    """NLL over candidate periods with the other hyperparameters fixed."""
    if t.shape[0] > max_points:
        sel = np.linspace(0, t.shape[0] - 1, max_points).round().astype(int)
        t, y = t[sel], y[sel]
    var = max(float(np.var(y)), 1e-12)
    out = np.empty(len(periods))
    for i, p in enumerate(periods):
        out[i] = _safe_nll(np.log([p, 1.0, var, noise_var]), t, y, None, False)
    return out


def _profile_minima(values: np.ndarray) -> np.ndarray:
    v = np.where(np.isfinite(values), values, np.inf)
    left = np.r_[np.inf, v[:-1]]
    right = np.r_[v[1:], np.inf]
    idx = np.flatnonzero((v <= left) & (v <= right) & np.isfinite(v))
    return idx[np.argsort(v[idx], kind="stable")]


def fit_axis(t, y, extra=None, restarts: int = 8, noise_init: float = 0.01,
             rng: Optional[np.random.Generator] = None, profile_points: int = 400,
             maxiter: int = 200):
    """Multi-start fit of one axis; returns ``(AxisFit, starts)``."""
    rng = rng or np.random.default_rng(0)
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    n = t.shape[0]
    if n < 8:
        raise GpError("need at least 8 training points to fit")
    var = max(float(np.var(y)), 1e-12)
    span = float(t.max() - t.min())
    ut = np.unique(t)
    step = float(np.median(np.diff(ut))) if ut.shape[0] > 1 else 1.0
    p_lo, p_hi = 2.0 * step, max(span / 3.0, 4.0 * step)
    noise_init = max(float(noise_init), 1e-10)

    periods = np.exp(np.linspace(np.log(p_lo), np.log(p_hi), profile_points))
    prof = period_profile(t, y, noise_init, periods)
    minima = periods[_profile_minima(prof)]
    # the NLL basin in p is narrow, so half the starts begin at the profile
    # optimum and differ only in the remaining hyperparameters
    n_seeded = (restarts + 1) // 2 if len(minima) else 0

    bounds = [
        (np.log(p_lo), np.log(max(span, p_hi))),
        (np.log(1e-2), np.log(1e2)),
        (np.log(1e-6 * var), np.log(1e3 * var)),
        (np.log(1e-10), np.log(10.0 * var + noise_init)),
    ]
    starts = []
    best = None
    for i in range(restarts):
        if i < n_seeded:
            p0 = minima[0] * math.exp(rng.uniform(-0.01, 0.01))
        else:
            p0 = math.exp(rng.uniform(np.log(p_lo), np.log(p_hi)))
        l0 = math.exp(rng.uniform(np.log(0.1), np.log(10.0)))
        sv0 = var * math.exp(rng.uniform(np.log(0.01), np.log(100.0)))
        x0 = np.log([p0, l0, sv0, noise_init])
        x0 = np.clip(x0, [b[0] for b in bounds], [b[1] for b in bounds])
        f0 = _safe_nll(x0, t, y, extra, False)
        rec = {"init": np.exp(x0).tolist(), "init_nll": f0, "seeded": i < n_seeded}
        if not np.isfinite(f0):
            rec.update(converged=None, nll=math.inf, status="discarded")
            starts.append(rec)
            continue
        # settle the shape/scale parameters at the starting period first;
        # with a badly scaled l the period gradient is uninformative
        inner = optimize.minimize(_fixed_period_nll, x0[1:], args=(x0[0], t, y, extra),
                                  jac=True, method="L-BFGS-B", bounds=bounds[1:],
                                  options={"maxiter": maxiter})
        x1 = np.r_[x0[0], inner.x] if np.isfinite(inner.fun) and inner.fun <= f0 else x0
        res = optimize.minimize(_safe_nll, x1, args=(t, y, extra, True), jac=True,
                                method="L-BFGS-B", bounds=bounds,
                                options={"maxiter": maxiter})
        x, f = res.x, float(res.fun)
        if not np.isfinite(f) or f > f0:
            x, f = x0, f0
        rec.update(converged=np.exp(x).tolist(), nll=f, status="ok")
        starts.append(rec)
        if best is None or f < best[1]:
            best = (x, f)
    if best is None:
        raise GpError("all hyperparameter restarts failed")
    p, l, sv, nv = np.exp(best[0])
    return AxisFit(PeriodicKernel(p, l, sv), float(nv), best[1]), starts


def fit(targets: ResidualTargets, restarts: int = 8, noise_init=0.01, seed: int = 0,
        profile_points: int = 400, fit_points: Optional[int] = 500) -> HyperoptResult:
    """Fit every axis independently; ``noise_init`` may be per axis.

    The likelihood is optimised on at most ``fit_points`` condensed points
    (``None`` uses the targets as given).
    """
    if fit_points is not None:
        targets = condense(targets, fit_points)
    n_ax = targets.residuals.shape[1]
    noise = np.broadcast_to(np.asarray(noise_init, dtype=float), (n_ax,))
    best, starts = [], []
    for k in range(n_ax):
        rng = np.random.default_rng([int(seed), k])
        extra = targets.extra_noise[:, k]
        ax_fit, ax_starts = fit_axis(targets.times, targets.residuals[:, k],
                                     extra if np.any(extra) else None,
                                     restarts, float(noise[k]), rng, profile_points)
        log.info("axis %s: p=%.4g l=%.3g s2=%.3g n2=%.3g nll=%.6g", AXES[k] if k < 3 else k,
                 ax_fit.kernel.period, ax_fit.kernel.length_scale,
                 ax_fit.kernel.signal_variance, ax_fit.noise_variance, ax_fit.nll)
        best.append(ax_fit)
        starts.append(ax_starts)
    return HyperoptResult(best, float(sum(b.nll for b in best)), starts)


# ------------------------------------------------------------------ model

class GpModel:
    """Fitted per-axis GPs with cached factorisations of ``K + noise``."""

    def __init__(self, kernels: Sequence[PeriodicKernel], noise_variances, targets: ResidualTargets,
                 meta: Optional[dict] = None):
        self.kernels = list(kernels)
        self.noise_variances = [float(v) for v in np.broadcast_to(noise_variances, (len(self.kernels),))]
        if targets.residuals.shape[1] != len(self.kernels):
            raise GpError("one kernel per residual axis is required")
        self.targets = targets
        self.meta = dict(meta or {})
        self._chol = []
        self._alpha = []
        t = targets.times
        for k, (kern, nv) in enumerate(zip(self.kernels, self.noise_variances)):
            A = kern(t) + np.diag(nv + targets.extra_noise[:, k])
            L, _ = _chol(A)
            self._chol.append(L)
            self._alpha.append(sla.cho_solve((L, True), targets.residuals[:, k], check_finite=False))

    @classmethod
    def from_fit(cls, result: HyperoptResult, targets: ResidualTargets, meta=None) -> "GpModel":
        meta = dict(meta or {})
        meta.setdefault("fit_nll", result.nll)
        meta.setdefault("restarts", [[{k: v for k, v in s.items()} for s in ax] for ax in result.starts])
        return cls(result.kernels, result.noise_variances, targets, meta)

    @property
    def n_axes(self):
        return len(self.kernels)

    def posterior(self, test_times):
        """Posterior mean ``(m, n_axes)`` and covariance ``(n_axes, m, m)`` of the latent disturbance."""
        ts = np.asarray(test_times, dtype=float).reshape(-1)
        means, covs = [], []
        for kern, L, alpha in zip(self.kernels, self._chol, self._alpha):
            Ks = kern(self.targets.times, ts)
            means.append(Ks.T @ alpha)
            V = sla.solve_triangular(L, Ks, lower=True, check_finite=False)
            covs.append(kern(ts) - V.T @ V)
        return np.stack(means, axis=-1), np.stack(covs)

    def sampler(self, test_times, ridge: float = 1e-10):
        """Return ``draw(rng) -> (m, n_axes)`` reusing one factorisation."""
        mean, cov = self.posterior(test_times)
        chols = []
        for k in range(self.n_axes):
            c = 0.5 * (cov[k] + cov[k].T)
            # the ridge is relative to the covariance scale so a vanishing
            # posterior gives vanishing draws
            scale = float(np.mean(np.abs(np.diag(c))))
            if scale == 0.0:
                chols.append(np.zeros_like(c))
                continue
            try:
                L, _ = _chol(c / scale, jitter=ridge)
            except GpError as exc:
                raise GpError(f"axis {k}: posterior covariance factorisation failed") from exc
            chols.append(L * math.sqrt(scale))
        chols = np.stack(chols)

        def draw(rng: np.random.Generator) -> np.ndarray:
            z = rng.standard_normal((mean.shape[1], mean.shape[0]))
            return mean + np.einsum("kij,kj->ik", chols, z)

        return draw

    def sample(self, test_times, seed: int = 0, n_samples: Optional[int] = None):
        """Posterior draw(s) at ``test_times``; deterministic given ``seed``."""
        draw = self.sampler(test_times)
        rng = np.random.default_rng(seed)
        if n_samples is None:
            return draw(rng)
        return np.stack([draw(rng) for _ in range(n_samples)])

    # ------------------------------------------------------------- persistence
    def to_json(self) -> dict:
        axes = {}
        for name, kern, nv in zip(AXES, self.kernels, self.noise_variances):
            axes[name] = {"p": kern.period, "l": kern.length_scale,
                          "signal_variance": kern.signal_variance, "noise_variance": nv}
        return {
            "axes": axes,
            "training": {
                "times": self.targets.times.tolist(),
                "residuals": self.targets.residuals.tolist(),
                "extra_noise": self.targets.extra_noise.tolist(),
                "flags": list(self.targets.flags),
            },
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "GpModel":
        axes = doc["axes"]
        names = [a for a in AXES if a in axes]
        kernels = [PeriodicKernel(axes[a]["p"], axes[a]["l"], axes[a]["signal_variance"]) for a in names]
        noise = [axes[a]["noise_variance"] for a in names]
        tr = doc["training"]
        targets = ResidualTargets(tr["times"], tr["residuals"], tr.get("extra_noise"), tr.get("flags", []))
        return cls(kernels, noise, targets, doc.get("meta"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, default=_json_default))

    @classmethod
    def load(cls, path) -> "GpModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def dataset_hash(doc: Union[dict, bytes]) -> str:
    data = doc if isinstance(doc, bytes) else json.dumps(doc, sort_keys=True).encode()
    return hashlib.sha256(data).hexdigest()[:16]
