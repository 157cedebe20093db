"""Force recording ingestion and temporal alignment.

Recordings are normalised per axis, coarsely aligned by cross-correlation
and then finely aligned to a reference recording with open-ended DTW
(symmetric2 step pattern). Every aligned series lives on the reference's
sample grid.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numba
import numpy as np

log = logging.getLogger(__name__)

NOMINAL_RATE_HZ = 500.0
AXES = ("x", "y", "z")


class AlignmentError(ValueError):
    """Invalid input to one of the alignment stages."""


@dataclass(frozen=True)
class ForceSeries:
    """Timestamped 3-axis force recording (seconds, newtons)."""

    timestamps: np.ndarray
    forces: np.ndarray
    source: str = ""

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=float)
        f = np.asarray(self.forces, dtype=float)
        if f.ndim == 1:
            f = f[:, None]
        if t.ndim != 1 or f.shape[0] != t.shape[0]:
            raise AlignmentError(
                f"timestamps {t.shape} and forces {f.shape} do not match")
        if t.shape[0] < 2:
            raise AlignmentError("a force series needs at least 2 samples")
        if np.any(np.diff(t) <= 0):
            raise AlignmentError("timestamps must be strictly increasing")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(t))):
            raise AlignmentError("force series contains non-finite samples")
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "forces", f)

    def __len__(self):
        return self.timestamps.shape[0]


@dataclass(frozen=True)
class NormalizedSeries:
    """Per-axis standardised values plus the statistics needed to undo it.

    ``zero_std`` flags axes that were constant; those axes are only
    mean-subtracted. Standard deviations use the population convention.
    """

    values: np.ndarray
    mean: np.ndarray
    stddev: np.ndarray
    zero_std: np.ndarray = field(default=None)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "stddev", np.asarray(self.stddev, dtype=float))
        if self.zero_std is None:
            object.__setattr__(self, "zero_std", self.stddev == 0)

    def __len__(self):
        return self.values.shape[0]

    def denormalize(self) -> np.ndarray:
        scale = np.where(self.zero_std, 1.0, self.stddev)
        return self.values * scale + self.mean

    def with_values(self, values) -> "NormalizedSeries":
        return NormalizedSeries(values, self.mean, self.stddev, self.zero_std)


@dataclass(frozen=True)
class WarpPath:
    """Optimal warping path between a reference (first index) and a query."""

    pairs: np.ndarray
    cost: float

    def __post_init__(self):
        object.__setattr__(self, "pairs", np.asarray(self.pairs, dtype=int).reshape(-1, 2))

    def __len__(self):
        return self.pairs.shape[0]


@dataclass
class AlignedDataset:
    """Series re-indexed onto the reference recording's grid."""

    time_grid: np.ndarray
    series: list
    reference_index: int
    provenance: list = field(default_factory=list)

    def stacked(self) -> np.ndarray:
        """Array of shape (n_series, n_time, n_axes)."""
        return np.stack([s.values for s in self.series])

    def to_json(self) -> dict:
        return {
            "time_grid": self.time_grid.tolist(),
            "series": [s.values.tolist() for s in self.series],
            "mean": [s.mean.tolist() for s in self.series],
            "stddev": [s.stddev.tolist() for s in self.series],
            "reference_index": self.reference_index,
            "stddev_convention": "population",
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "AlignedDataset":
        series = [
            NormalizedSeries(np.asarray(v, dtype=float), np.asarray(m), np.asarray(s))
            for v, m, s in zip(doc["series"], doc["mean"], doc["stddev"])
        ]
        return cls(np.asarray(doc["time_grid"], dtype=float), series,
                   int(doc["reference_index"]), list(doc.get("provenance", [])))


@dataclass
class AlignConfig:
    reference: Optional[int] = None  # None selects the longest series
    open_ended: bool = True
    window: Optional[int] = None  # Sakoe-Chiba half-width, None = unbounded
    rate_hz: float = NOMINAL_RATE_HZ
    keep_paths: bool = False  # record each warp path in the provenance


def normalize(series) -> NormalizedSeries:
    """Standardise each axis to zero mean and unit (population) stddev."""
    x = series.forces if isinstance(series, ForceSeries) else np.asarray(series, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise AlignmentError("cannot normalise an empty series")
    if not np.all(np.isfinite(x)):
        raise AlignmentError("cannot normalise a series with non-finite samples")
    # constancy is decided on the samples; a rounded mean would leave ~1e-15 spread
    zero = np.ptp(x, axis=0) == 0
    mean = np.where(zero, x[0], x.mean(axis=0))
    centred = x - mean
    # scaled so that tiny spreads do not underflow when squared
    scale = np.where(zero, 1.0, np.abs(centred).max(axis=0))
    std = np.where(zero, 0.0, scale * np.sqrt(((centred / scale) ** 2).mean(axis=0)))
    if np.any(zero):
        log.warning("zero standard deviation on axes %s; mean-subtracted only",
                    [AXES[i] if i < 3 else i for i in np.flatnonzero(zero)])
    values = centred / np.where(zero, 1.0, std)
    return NormalizedSeries(values, mean, std, zero)


def _as_values(s) -> np.ndarray:
    v = s.values if isinstance(s, NormalizedSeries) else np.asarray(s, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    if v.shape[0] == 0:
        raise AlignmentError("empty series")
    return v


def cross_correlation(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Summed per-axis cross-correlation ``c[k] = sum_n a[n] . b[n + k]``.

    Returns ``(lags, c)`` with lags running from ``-(len(a)-1)`` to
    ``len(b)-1``.
    """
    a = _as_values(a)
    b = _as_values(b)
    if a.shape[1] != b.shape[1]:
        raise AlignmentError("series have different numbers of axes")
    c = sum(np.correlate(b[:, k], a[:, k], mode="full") for k in range(a.shape[1]))
    lags = np.arange(-(a.shape[0] - 1), b.shape[0])
    return lags, c


def coarse_align(a, b) -> int:
    """Integer lag (samples) by which ``b`` trails ``a``.

    Ties go to the smallest absolute lag, negative before positive.
    """
    lags, c = cross_correlation(a, b)
    best = np.flatnonzero(c == c.max())
    order = sorted(best, key=lambda i: (abs(lags[i]), lags[i]))
    return int(lags[order[0]])


def shift(series, lag: int):
    """Advance ``series`` by ``lag`` samples (drop head), or delay it for a
    negative lag by repeating the first sample."""
    v = _as_values(series)
    if lag > 0:
        if lag >= v.shape[0]:
            raise AlignmentError(f"lag {lag} exceeds series length {v.shape[0]}")
        out = v[lag:]
    elif lag < 0:
        out = np.concatenate([np.repeat(v[:1], -lag, axis=0), v])
    else:
        out = v
    if isinstance(series, NormalizedSeries):
        return series.with_values(out)
    return out


def local_distance(reference, query) -> np.ndarray:
    """Euclidean distance between every reference/query sample pair."""
    r = _as_values(reference)
    q = _as_values(query)
    diff = r[:, None, :] - q[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


@numba.njit(cache=True)
def _accumulate(d, window, open_ended):
    n, m = d.shape
    acc = np.full((n, m), np.inf)
    step = np.zeros((n, m), dtype=np.int8)  # 0 diagonal, 1 from (i-1, j), 2 from (i, j-1)
    acc[0, 0] = 2.0 * d[0, 0]
    w = window
    if w >= 0 and not open_ended and abs(n - m) > w:
        w = abs(n - m)
    for i in range(n):
        lo, hi = 0, m
        if w >= 0:
            lo, hi = max(0, i - w), min(m, i + w + 1)
        for j in range(lo, hi):
            if i == 0 and j == 0:
                continue
            best = np.inf
            move = 0
            if i > 0 and j > 0:
                best = acc[i - 1, j - 1] + 2.0 * d[i, j]
            if i > 0:
                c = acc[i - 1, j] + d[i, j]
                if c < best:
                    best = c
                    move = 1
            if j > 0:
                c = acc[i, j - 1] + d[i, j]
                if c < best:
                    best = c
                    move = 2
            acc[i, j] = best
            step[i, j] = move
    return acc, step


def dtw_align(reference, query, open_ended: bool = True,
              window: Optional[int] = None) -> WarpPath:
    """Symmetric2 DTW of ``query`` onto ``reference``.

    The reference is always consumed fully. With ``open_ended`` the query
    may stop early: the endpoint minimising the normalised cost is chosen.
    Costs are normalised by the path weight sum, ``n + m`` for a path
    ending at 0-based ``(n-1, m-1)`` (the start cell carries weight 2).
    Ties prefer the diagonal move, then the vertical one.
    """
    d = local_distance(reference, query)
    acc, step = _accumulate(d, -1 if window is None else int(window), bool(open_ended))
    n, m = acc.shape
    if open_ended:
        norm = acc[n - 1] / (n + np.arange(1, m + 1))
        j_end = int(np.argmin(norm))
        cost = float(norm[j_end])
    else:
        j_end = m - 1
        cost = float(acc[n - 1, m - 1] / (n + m))
    if not np.isfinite(cost):
        raise AlignmentError("no admissible warping path within the window")
    pairs = []
    i, j = n - 1, j_end
    while True:
        pairs.append((i, j))
        if i == 0 and j == 0:
            break
        move = step[i, j]
        if move == 0:
            i, j = i - 1, j - 1
        elif move == 1:
            i -= 1
        else:
            j -= 1
    return WarpPath(np.array(pairs[::-1]), cost)


def reindex(series, path: WarpPath, n_reference: Optional[int] = None):
    """Map query samples onto the reference grid along ``path``.

    Several query samples landing on one reference index are averaged;
    reference indices with no mapped sample are linearly interpolated.
    """
    v = _as_values(series)
    pairs = path.pairs
    if pairs.size == 0:
        raise AlignmentError("empty warping path")
    n = int(pairs[:, 0].max()) + 1 if n_reference is None else int(n_reference)
    if pairs.min() < 0 or pairs[:, 1].max() >= v.shape[0] or pairs[:, 0].max() >= n:
        raise AlignmentError("warping path indices out of bounds")
    sums = np.zeros((n, v.shape[1]))
    counts = np.zeros(n)
    np.add.at(sums, pairs[:, 0], v[pairs[:, 1]])
    np.add.at(counts, pairs[:, 0], 1.0)
    hit = counts > 0
    out = np.empty_like(sums)
    out[hit] = sums[hit] / counts[hit, None]
    if not np.all(hit):
        idx = np.arange(n)
        for k in range(v.shape[1]):
            out[~hit, k] = np.interp(idx[~hit], idx[hit], out[hit, k])
    if isinstance(series, NormalizedSeries):
        return series.with_values(out)
    return out


def resample_uniform(series: ForceSeries, rate_hz: float = NOMINAL_RATE_HZ,
                     jitter_tol: float = 0.01) -> ForceSeries:
    """Resample onto a uniform grid when timestamp jitter exceeds
    ``jitter_tol`` of the nominal period."""
    period = 1.0 / rate_hz
    t = series.timestamps
    dev = np.abs(np.diff(t) - period).max() if len(t) > 1 else 0.0
    if dev <= jitter_tol * period:
        return series
    n = int(np.floor((t[-1] - t[0]) / period + 1e-9)) + 1
    grid = t[0] + period * np.arange(n)
    f = np.column_stack([np.interp(grid, t, series.forces[:, k])
                         for k in range(series.forces.shape[1])])
    log.info("resampled %s onto %d Hz grid (max jitter %.3g s)",
             series.source or "series", rate_hz, dev)
    return ForceSeries(grid, f, series.source)


def read_csv(path) -> ForceSeries:
    """Read a ``t,fx,fy,fz`` CSV trial."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip().lower() for h in next(reader)]
        if header[:4] != ["t", "fx", "fy", "fz"]:
            raise AlignmentError(f"{path}: expected header t,fx,fy,fz, got {header}")
        rows = [[float(x) for x in r[:4]] for r in reader if r]
    arr = np.asarray(rows, dtype=float).reshape(-1, 4)
    return ForceSeries(arr[:, 0], arr[:, 1:], str(path))


def write_csv(series: ForceSeries, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "fx", "fy", "fz"])
        for t, f in zip(series.timestamps, series.forces):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in f])


def build_dataset(raw: Sequence[ForceSeries],
                  config: Optional[AlignConfig] = None) -> AlignedDataset:
    """Normalise, coarse-align and DTW-align all recordings to one reference."""
    config = config or AlignConfig()
    if len(raw) == 0:
        raise AlignmentError("build_dataset needs at least one series")
    normed = []
    for i, s in enumerate(raw):
        try:
            normed.append(normalize(resample_uniform(s, config.rate_hz)))
        except AlignmentError as exc:
            raise AlignmentError(f"series {i}: {exc}") from exc
    if config.reference is None:
        ref = int(np.argmax([len(s) for s in normed]))
    else:
        ref = int(config.reference)
        if not 0 <= ref < len(normed):
            raise AlignmentError(f"reference index {ref} out of range")
    reference = normed[ref]
    grid = np.arange(len(reference)) / config.rate_hz
    out, prov = [], []
    for i, s in enumerate(normed):
        src = getattr(raw[i], "source", "")
        if i == ref:
            out.append(reference)
            prov.append({"file": src, "lag": 0, "dtw_cost": 0.0})
            continue
        try:
            lag = coarse_align(reference, s)
            shifted = shift(s, lag)
            path = dtw_align(reference, shifted, config.open_ended, config.window)
            out.append(reindex(shifted, path, len(reference)))
        except AlignmentError as exc:
            raise AlignmentError(f"series {i}: {exc}") from exc
        prov.append({"file": src, "lag": lag, "dtw_cost": path.cost})
        if config.keep_paths:
            prov[-1]["path"] = path.pairs.tolist()
        log.debug("series %d: lag %d, dtw cost %.4g", i, lag, path.cost)
    return AlignedDataset(grid, out, ref, prov)
