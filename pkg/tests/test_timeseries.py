import functools
import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from cutgp import synth
from cutgp import timeseries as ts


# ----------------------------------------------------------------- oracles

def exhaustive_end_costs(r, q):
    """Enumerate every monotone path with unit steps; symmetric2 weights.

    Returns the best normalised cost for each end column of the last row.
    """
    r = np.asarray(r, float).reshape(len(r), -1)
    q = np.asarray(q, float).reshape(len(q), -1)
    n, m = len(r), len(q)
    d = np.sqrt(((r[:, None, :] - q[None, :, :]) ** 2).sum(-1)).tolist()
    best = [np.inf] * m

    def walk(i, j, cost):
        # cost includes cell (i, j)
        if i == n - 1:
            best[j] = min(best[j], cost / (n + j + 1))
        for di, dj, wt in ((1, 1, 2.0), (1, 0, 1.0), (0, 1, 1.0)):
            a, b = i + di, j + dj
            if a < n and b < m:
                walk(a, b, cost + wt * d[a][b])

    walk(0, 0, 2.0 * d[0][0])
    return best


def dtw_exhaustive(r, q, open_ended):
    best = exhaustive_end_costs(r, q)
    return min(best) if open_ended else best[-1]


def dtw_recursive(r, q):
    """Memoised recursion on the accumulated cost (unnormalised)."""
    r = np.asarray(r, float).reshape(len(r), -1)
    q = np.asarray(q, float).reshape(len(q), -1)

    @functools.lru_cache(maxsize=None)
    def g(i, j):
        dij = float(np.sqrt(((r[i] - q[j]) ** 2).sum()))
        if i == 0 and j == 0:
            return 2.0 * dij
        opts = []
        if i > 0 and j > 0:
            opts.append(g(i - 1, j - 1) + 2.0 * dij)
        if i > 0:
            opts.append(g(i - 1, j) + dij)
        if j > 0:
            opts.append(g(i, j - 1) + dij)
        return min(opts)

    return g


def xcorr_direct(a, b):
    a = np.asarray(a, float).reshape(len(a), -1)
    b = np.asarray(b, float).reshape(len(b), -1)
    out = {}
    for k in range(-(len(a) - 1), len(b)):
        s = 0.0
        for n in range(len(a)):
            if 0 <= n + k < len(b):
                s += float(a[n] @ b[n + k])
        out[k] = s
    return out


# ------------------------------------------------------------------ types

def test_force_series_validation():
    with pytest.raises(ts.AlignmentError):
        ts.ForceSeries([0.0], [[1, 2, 3]])
    with pytest.raises(ts.AlignmentError):
        ts.ForceSeries([0.0, 0.0], [[1, 2, 3], [1, 2, 3]])
    with pytest.raises(ts.AlignmentError):
        ts.ForceSeries([0.0, 1.0], [[1, 2, np.nan], [1, 2, 3]])


# -------------------------------------------------------------- normalize

def test_normalize_constant_axis_flagged():
    out = ts.normalize(np.array([[5.0, 1.0], [5.0, 2.0], [5.0, 3.0]]))
    assert np.array_equal(out.values[:, 0], [0, 0, 0])
    assert out.zero_std.tolist() == [True, False]


def test_normalize_population_convention():
    out = ts.normalize(np.array([-1.0, 1.0]))
    assert np.allclose(out.values[:, 0], [-1.0, 1.0])


def test_normalize_errors():
    with pytest.raises(ts.AlignmentError):
        ts.normalize(np.zeros((0, 3)))
    with pytest.raises(ts.AlignmentError):
        ts.normalize(np.array([[1.0], [np.inf]]))


@given(hnp.arrays(float, st.tuples(st.integers(2, 60), st.integers(1, 3)),
                  elements=st.floats(-1e3, 1e3)))
def test_normalize_moments_and_roundtrip(x):
    out = ts.normalize(x)
    assert np.allclose(out.values.mean(axis=0), 0.0, atol=1e-9)
    sd = out.values.std(axis=0)
    assert np.array_equal(out.zero_std, np.ptp(x, axis=0) == 0)
    assert np.allclose(sd[~out.zero_std], 1.0, atol=1e-6)
    assert np.all(out.values[:, out.zero_std] == 0)
    assert np.allclose(out.denormalize(), x, atol=1e-9 * (1 + np.abs(x).max()))


# ----------------------------------------------------------- coarse align

def test_cross_correlation_matches_direct_sum(rng):
    a = rng.standard_normal((7, 3))
    b = rng.standard_normal((9, 3))
    lags, c = ts.cross_correlation(a, b)
    ref = xcorr_direct(a, b)
    assert np.allclose(c, [ref[k] for k in lags], atol=1e-12)


def test_coarse_align_identity_and_delay(rng):
    a = rng.standard_normal((200, 3))
    assert ts.coarse_align(a, a) == 0
    b = np.vstack([np.zeros((17, 3)), a[:-17]])
    assert ts.coarse_align(a, b) == 17


def test_coarse_align_quarter_period_sinusoid():
    period = 40
    n = np.arange(400)
    a = np.sin(2 * np.pi * n / period)
    b = np.sin(2 * np.pi * (n - period // 4) / period)
    assert ts.coarse_align(a, b) == period // 4


def test_coarse_align_tie_break():
    # c[-1] == c[+1] and both exceed c[0]
    a = np.array([1.0, 0.0, 1.0])
    b = np.array([0.0, 1.0, 0.0])
    lags, c = ts.cross_correlation(a, b)
    assert c[list(lags).index(-1)] == c[list(lags).index(1)] == c.max()
    assert ts.coarse_align(a, b) == -1


@given(st.integers(-60, 60), st.integers(0, 2 ** 31 - 1))
def test_coarse_align_recovers_injected_lag(lag, seed):
    r = np.random.default_rng(seed)
    base = r.standard_normal((320, 3))
    a = base[60:260]
    b = base[60 - lag:260 - lag]  # b[n + lag] == a[n]
    assert ts.coarse_align(a, b) == lag


def test_shift_semantics():
    v = np.arange(5.0)
    assert np.array_equal(ts.shift(v, 2)[:, 0], [2, 3, 4])
    assert np.array_equal(ts.shift(v, -2)[:, 0], [0, 0, 0, 1, 2, 3, 4])
    with pytest.raises(ts.AlignmentError):
        ts.shift(v, 5)


# -------------------------------------------------------------------- DTW

def test_dtw_identical_diagonal():
    x = np.array([0.0, 1.0, 3.0, 2.0])
    p = ts.dtw_align(x, x)
    assert p.cost == 0.0
    assert p.pairs.tolist() == [[i, i] for i in range(4)]


def test_dtw_duplicate_start_example():
    p = ts.dtw_align([0.0, 1.0, 2.0], [0.0, 0.0, 1.0, 2.0])
    assert p.cost == 0.0
    assert p.pairs.tolist() == [[0, 0], [0, 1], [1, 2], [2, 3]]


def test_dtw_open_ended_truncates_query():
    p = ts.dtw_align([0.0, 1.0, 2.0], [0.0, 1.0, 2.0, 9.0, 9.0])
    assert p.cost == 0.0 and p.pairs[-1].tolist() == [2, 2]
    closed = ts.dtw_align([0.0, 1.0, 2.0], [0.0, 1.0, 2.0, 9.0, 9.0], open_ended=False)
    assert closed.pairs[-1].tolist() == [2, 4] and closed.cost > 0


def test_dtw_matches_memoised_recursion(rng):
    r = rng.standard_normal((30, 3))
    q = rng.standard_normal((41, 3))
    g = dtw_recursive(r, q)
    closed = ts.dtw_align(r, q, open_ended=False)
    assert closed.cost == g(29, 40) / (30 + 41)
    opened = ts.dtw_align(r, q, open_ended=True)
    assert opened.cost == min(g(29, j) / (30 + j + 1) for j in range(41))


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31 - 1), st.booleans())
def test_dtw_matches_exhaustive_enumeration(n, m, seed, open_ended):
    r = np.random.default_rng(seed)
    a = r.integers(-3, 4, (n, 2)).astype(float)
    b = r.integers(-3, 4, (m, 2)).astype(float)
    got = ts.dtw_align(a, b, open_ended=open_ended).cost
    assert got == pytest.approx(dtw_exhaustive(a, b, open_ended), rel=1e-12, abs=1e-15)


@given(st.integers(1, 10), st.integers(1, 10), st.integers(0, 2 ** 31 - 1))
def test_warp_path_invariants(n, m, seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((n, 3)), r.standard_normal((m, 3))
    for oe in (True, False):
        p = ts.dtw_align(a, b, open_ended=oe)
        steps = np.diff(p.pairs, axis=0)
        assert p.pairs[0].tolist() == [0, 0]
        assert p.pairs[-1][0] == n - 1
        assert all(tuple(s) in {(1, 0), (0, 1), (1, 1)} for s in steps)
        assert p.cost >= 0
        if not oe:
            assert p.pairs[-1][1] == m - 1
        # path cost recomputed along the returned pairs reproduces the reported cost
        d = np.sqrt(((a[p.pairs[:, 0]] - b[p.pairs[:, 1]]) ** 2).sum(axis=1))
        w = np.r_[2.0, np.where((steps == 1).all(axis=1), 2.0, 1.0)]
        assert (d * w).sum() / w.sum() == pytest.approx(p.cost, rel=1e-12, abs=1e-15)


@given(st.integers(1, 10), st.integers(1, 10), st.integers(0, 2 ** 31 - 1))
def test_open_ended_cost_not_above_closed(n, m, seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((n, 3)), r.standard_normal((m, 3))
    assert ts.dtw_align(a, b, True).cost <= ts.dtw_align(a, b, False).cost


def test_dtw_window_limits_path(rng):
    a, b = rng.standard_normal((20, 1)), rng.standard_normal((20, 1))
    p = ts.dtw_align(a, b, open_ended=False, window=2)
    assert np.abs(p.pairs[:, 0] - p.pairs[:, 1]).max() <= 2
    assert p.cost >= ts.dtw_align(a, b, open_ended=False).cost


# ---------------------------------------------------------------- reindex

def test_reindex_identity_and_mean(rng):
    v = rng.standard_normal((5, 3))
    ident = ts.WarpPath(np.array([[i, i] for i in range(5)]), 0.0)
    assert np.array_equal(ts.reindex(v, ident), v)
    p = ts.WarpPath(np.array([[0, 0], [1, 1], [1, 2], [2, 3]]), 0.0)
    out = ts.reindex(v[:4], p)
    assert np.allclose(out[1], (v[1] + v[2]) / 2)


def test_reindex_interpolates_gaps():
    v = np.array([[0.0], [10.0]])
    # reference index 1 and 2 receive nothing: (0,0), (3,1) is not a legal DTW
    # path but reindex only needs a valid index map
    p = ts.WarpPath(np.array([[0, 0], [3, 1]]), 0.0)
    assert np.allclose(ts.reindex(v, p)[:, 0], [0, 10 / 3, 20 / 3, 10])


def test_reindex_out_of_bounds():
    with pytest.raises(ts.AlignmentError):
        ts.reindex(np.zeros((2, 1)), ts.WarpPath(np.array([[0, 0], [1, 2]]), 0.0))


# ---------------------------------------------------------- build_dataset

def test_single_series_dataset(rng):
    s = ts.ForceSeries(np.arange(50) / 500, rng.standard_normal((50, 3)))
    ds = ts.build_dataset([s])
    assert ds.reference_index == 0
    assert np.allclose(ds.series[0].denormalize(), s.forces)


def test_build_dataset_error_carries_index(rng):
    good = ts.ForceSeries(np.arange(50) / 500, rng.standard_normal((50, 3)))
    bad = ts.ForceSeries(np.arange(50) / 500, np.ones((50, 3)))
    bad_shift = ts.ForceSeries(np.arange(3) / 500, rng.standard_normal((3, 3)))
    ds = ts.build_dataset([good, bad])  # constant series only warns
    assert ds.series[1].zero_std.all()
    with pytest.raises(ts.AlignmentError, match="reference index"):
        ts.build_dataset([good, bad_shift], ts.AlignConfig(reference=5))


def test_build_dataset_three_copies_within_tolerance():
    trials, truth, clean = synth.generate({"n_trials": 3, "noise_std": 0.0}, seed=4)
    ds = ts.build_dataset(trials, ts.AlignConfig(reference=0, keep_paths=True))
    err = alignment_errors(ds, truth, clean)
    assert max(err) < 0.05


def alignment_errors(ds, truth, clean):
    """RMS misalignment of each clean trial after replaying the recovered
    lag and warp, relative to the reference RMS amplitude, over the time
    span both recordings observe."""
    ref = truth["reference"]
    t_ref = synth.true_times(truth, ref)
    amp = np.sqrt(np.mean((clean[ref] - clean[ref].mean(axis=0)) ** 2))
    out = []
    for i, prov in enumerate(ds.provenance):
        if i == ref:
            continue
        cn = ts.normalize(ts.ForceSeries(np.arange(clean.shape[1]) / 500.0, clean[i]))
        al = ts.reindex(ts.shift(cn, prov["lag"]), ts.WarpPath(np.array(prov["path"]), 0.0),
                        clean.shape[1]).denormalize()
        t_i = synth.true_times(truth, i)
        seen = (t_ref >= t_i[0]) & (t_ref <= t_i[-1])
        out.append(float(np.sqrt(np.mean((al[seen] - clean[ref][seen]) ** 2)) / amp))
    return out


def test_paper_scale_dataset_shape():
    trials, truth, _ = synth.generate({}, seed=0)
    ds = ts.build_dataset(trials)
    assert ds.stacked().shape == (14, 2500, 3)
    assert ds.stacked().shape[0] * ds.stacked().shape[1] == 35000


def test_dataset_json_roundtrip_and_determinism(tmp_path):
    trials, _, _ = synth.generate({"n_trials": 3, "n_samples": 300}, seed=2)
    a = ts.build_dataset(trials)
    b = ts.build_dataset(trials)
    ja, jb = json.dumps(a.to_json()), json.dumps(b.to_json())
    assert ja == jb
    back = ts.AlignedDataset.from_json(json.loads(ja))
    assert np.array_equal(back.stacked(), a.stacked())
    assert json.loads(ja)["stddev_convention"] == "population"


def test_csv_roundtrip(tmp_path, rng):
    s = ts.ForceSeries(np.arange(10) / 500, rng.standard_normal((10, 3)), "x")
    ts.write_csv(s, tmp_path / "a.csv")
    back = ts.read_csv(tmp_path / "a.csv")
    assert np.array_equal(back.forces, s.forces)
    assert np.array_equal(back.timestamps, s.timestamps)


def test_resample_on_jitter(rng):
    t = np.arange(100) / 500.0
    t[1:-1] += rng.uniform(-2e-4, 2e-4, 98)
    s = ts.ForceSeries(t, np.column_stack([t, t, t]))
    out = ts.resample_uniform(s)
    assert np.allclose(np.diff(out.timestamps), 1 / 500)
    assert np.allclose(out.forces[:, 0], out.timestamps)
