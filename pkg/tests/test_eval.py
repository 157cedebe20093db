import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from cutgp import eval as ev
from cutgp import sim


def fake_report(name, rewards):
    eps = [ev.EpisodeRecord(i, float(r), 1.0, 0.1, 2.0, 10.0,
                            {"mrv": float(r), "time": 0.0, "path": 0.0, "force": 0.0}, 0.0)
           for i, r in enumerate(rewards)]
    return ev.StrategyReport(name, eps)


# -------------------------------------------------------------------- Welch

def test_welch_closed_form():
    w = ev.welch_t([1, 2, 3], [4, 5, 6])
    assert abs(w.t - (2 - 5) / math.sqrt(1 / 3 + 1 / 3)) < 1e-12
    assert round(w.t, 3) == -3.674
    assert w.df == pytest.approx(4.0)
    ref = stats.ttest_ind([1, 2, 3], [4, 5, 6], equal_var=False)
    assert w.p == pytest.approx(ref.pvalue, rel=1e-10)


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=20),
       st.lists(st.floats(-100, 100), min_size=2, max_size=20))
def test_welch_matches_scipy_and_is_antisymmetric(a, b):
    w = ev.welch_t(a, b)
    v = ev.welch_t(b, a)
    assert v.t == -w.t and v.p == w.p
    assert 0.0 <= w.p <= 1.0
    if np.var(a) > 1e-6 and np.var(b) > 1e-6:
        ref = stats.ttest_ind(a, b, equal_var=False)
        assert w.t == pytest.approx(ref.statistic, rel=1e-9, abs=1e-12)
        assert w.p == pytest.approx(ref.pvalue, rel=1e-7, abs=1e-14)


def test_welch_needs_two_observations():
    with pytest.raises(ValueError):
        ev.welch_t([1.0], [1.0, 2.0])


def test_identical_reports_give_p_one():
    r = np.random.default_rng(0).normal(0, 1, 50)
    out = ev.compare([fake_report("a", r), fake_report("b", r)])
    assert out["tests"][0]["p"] == pytest.approx(1.0)
    ta, tb = out["table"]
    assert {k: v for k, v in ta.items() if k != "strategy"} == {k: v for k, v in tb.items() if k != "strategy"}


def test_separated_reports_are_significant():
    r = np.random.default_rng(1)
    a = r.normal(0, 1, 50)
    b = r.normal(0, 1, 50)
    pooled = math.sqrt((a.var(ddof=1) + b.var(ddof=1)) / 2)
    b = b + 10 * pooled + (a.max() - b.min())
    out = ev.compare([fake_report("a", a), fake_report("b", b)])
    assert out["tests"][0]["p"] < 0.001


def test_compare_symmetry_and_notices():
    r = np.random.default_rng(2)
    x, y = fake_report("x", r.normal(0, 1, 10)), fake_report("y", r.normal(1, 2, 12))
    f, g = ev.compare([x, y])["tests"][0], ev.compare([y, x])["tests"][0]
    assert f["t"] == -g["t"] and f["p"] == g["p"]
    out = ev.compare([x, fake_report("one", [1.0])])
    assert out["tests"] == [] and "fewer than 2" in out["notices"][0]
    with pytest.raises(ValueError):
        ev.compare([x])


def test_violin_data_quantiles():
    v = ev.violin_data(np.arange(101.0))
    assert v["quantiles"]["median"] == 50.0 and v["quantiles"]["q05"] == 5.0
    assert len(v["kde"]["x"]) == len(v["kde"]["density"]) == 64
    assert "kde" not in ev.violin_data([3.0, 3.0])


# ------------------------------------------------------------ moving average

def test_moving_average_cases():
    assert np.array_equal(ev.moving_average(np.full(120, 2.5)), np.full(120, 2.5))
    imp = np.zeros(200)
    imp[100] = 1.0
    ma = ev.moving_average(imp)
    assert np.allclose(ma[100:150], 1 / 50) and np.all(ma[150:] == 0) and np.all(ma[:100] == 0)
    assert ev.moving_average(np.array([])).size == 0
    assert np.allclose(ev.moving_average(np.array([1.0, 3.0])), [1.0, 2.0])


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=150), st.integers(1, 60))
def test_moving_average_matches_direct_window(x, n):
    x = np.array(x)
    direct = [x[max(0, i - n + 1):i + 1].mean() for i in range(len(x))]
    assert np.allclose(ev.moving_average(x, n), direct, atol=1e-9)


# --------------------------------------------------------------- evaluation

def test_metrics_recomputed_from_csv(tmp_path):
    env = sim.CutEnv()
    rep, trajs = ev.evaluate_strategy(env, sim.ConstantPolicy([0, 0, 0, 0.2, 0.5]), "c", [3],
                                      keep_trajectories=True)
    trajs[0].to_csv(tmp_path / "t.csv")
    c = sim.read_trajectory_csv(tmp_path / "t.csv")
    e = np.column_stack([c["e_x"], c["e_y"], c["e_z"]])
    f = np.column_stack([c["F_x"], c["F_y"], c["F_z"]])
    rec = rep.episodes[0]
    assert rec.completion_time == pytest.approx(len(c["t"]) * c["dt"][0], abs=1e-12)
    assert rec.path_deviation == pytest.approx(np.mean(np.linalg.norm(e, axis=1)), abs=1e-9)
    assert rec.tool_load == pytest.approx(np.mean(np.linalg.norm(f, axis=1)), abs=1e-9)
    assert rec.mrv == pytest.approx(c["d_mrv"].sum(), abs=1e-9)
    w = env.weights
    per_step = (w.q_mrv * c["d_mrv"] - w.q_cut * c["dt"] - (e * e * w.q_d).sum(1) - (f * f * w.q_f).sum(1))
    assert abs(per_step.sum() - rec.reward) <= 1e-9
    assert abs(sum(rec.components.values()) - rec.reward) <= 1e-9


def test_same_seeds_same_report():
    env = sim.CutEnv()
    a = ev.evaluate_strategy(env, sim.ConstantPolicy(), "n", [1, 2])
    b = ev.evaluate_strategy(env, sim.ConstantPolicy(), "n", [1, 2])
    assert a.to_json() == b.to_json()


def test_summary_recomputable_from_records(tmp_path):
    env = sim.CutEnv()
    rep = ev.evaluate_strategy(env, sim.ConstantPolicy([0, 0, 0, 0.5, 0.5]), "c", [0, 1, 2])
    ev.save_reports([rep], tmp_path / "r.json")
    back = ev.load_reports(tmp_path / "r.json")[0]
    s = back.summary()
    assert abs(s["reward_mean"] - np.mean([e.reward for e in back.episodes])) <= 1e-9
    assert abs(s["mrv"] - np.mean([e.mrv for e in back.episodes])) <= 1e-9
    assert s == rep.summary()


def test_baseline_is_a_constant_action_policy():
    cfg = ev.baseline_env_config({})
    env = sim.CutEnv(cfg)
    traj = sim.rollout(env, sim.ConstantPolicy(), seed=0)
    assert np.all(traj.states["t_delta"] == 0.0)  # nominal feed 0.75 m/min
    assert np.all(traj.states["n_delta"] == 1.0)  # 1 mm DoC
    assert env.v_nominal * 60 / 1000 == pytest.approx(0.75)


def test_export_traces(tmp_path):
    env = sim.CutEnv()
    _, trajs = ev.evaluate_strategy(env, sim.ConstantPolicy(), "base", [0], keep_trajectories=True)
    paths = ev.export_traces({"base": trajs}, tmp_path)
    with paths[0].open() as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == list(ev.TRACE_EXPORT_COLUMNS)
    ex = np.array([float(r["e_x"]) for r in rows])
    assert np.array_equal(ex, trajs[0].states["e"][:, 0])
    fy_ma = np.array([float(r["F_y_ma"]) for r in rows])
    assert np.allclose(fy_ma, ev.moving_average(trajs[0].states["f"][:, 1]))


def test_action_change():
    a = np.array([[0, 0, 0, 0, 0], [5000, 0, 0, 2, 0]], dtype=float)
    assert ev.action_change(a, [5000, 5000, 5000, 2, 2]) == pytest.approx(2 / 5)
    assert ev.action_change(a[:1], np.ones(5)) == 0.0
