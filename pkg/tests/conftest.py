import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def synthetic_gp(tmp_path_factory):
    """GP fitted through the full align -> residual -> fit path on synthetic trials."""
    from cutgp import gp, synth
    from cutgp import timeseries as ts

    trials, truth, _ = synth.generate({"n_trials": 6, "n_samples": 1500}, seed=11)
    ds = ts.build_dataset(trials, ts.AlignConfig(reference=truth["reference"]))
    pred = synth.mechanistic_force(truth["config"], ds.time_grid)
    targets = gp.condense(gp.compute_residuals(ds, pred), 800)
    res = gp.fit(targets, restarts=6, noise_init=0.01, seed=3, fit_points=300)
    model = gp.GpModel.from_fit(res, targets)
    path = tmp_path_factory.mktemp("gp") / "gp.json"
    model.save(path)
    return model, path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


PIPELINE = [
    ["synth", "--n-trials", "4", "--n-samples", "600", "--seed", "2", "--out", "data"],
    ["align", "data", "--reference", "0", "--out", "work/dataset.json"],
    ["fit-gp", "--dataset", "work/dataset.json", "--mechanistic", "data/mechanistic.csv",
     "--restarts", "2", "--max-points", "400", "--fit-points", "200", "--out", "work/gp.json"],
    ["gp-predict", "--model", "work/gp.json", "--times", "times.csv", "--samples", "2", "--seed", "1",
     "--out", "work/pred.csv"],
    ["simulate", "--policy", "expert", "--episodes", "2", "--gp", "work/gp.json", "--out", "sim"],
    ["imitate", "--gp", "work/gp.json", "--algo", "bc", "--episodes", "3", "--epochs", "2",
     "--out", "work/bc.json"],
    ["imitate", "--gp", "work/gp.json", "--algo", "dagger", "--episodes", "3", "--epochs", "2",
     "--out", "work/dagger.json"],
    ["evaluate", "--gp", "work/gp.json", "--policies", "expert,work/bc.json,work/dagger.json",
     "--baseline", "--episodes", "3", "--seed-base", "5", "--out", "report"],
    ["report", "--in", "report", "--out", "report"],
]

# (manifest directory, entry key) written by each stage above
PIPELINE_ENTRIES = [("data", "synth"), ("work", "dataset.json"), ("work", "gp.json"),
                    ("work", "pred.csv"), ("sim", "simulate"), ("work", "bc.json"),
                    ("work", "dagger.json"), ("report", "evaluate"), ("report", "report")]


@pytest.fixture(scope="session")
def pipeline_dir(tmp_path_factory):
    """Small end-to-end CLI run; returns the working directory."""
    from cutgp import cli

    root = tmp_path_factory.mktemp("pipeline")
    (root / "times.csv").write_text("t\n" + "\n".join(f"{k * 0.05:.2f}" for k in range(21)) + "\n")
    cwd = os.getcwd()
    os.chdir(root)
    try:
        for argv in PIPELINE:
            code = cli.main(argv)
            assert code == 0, f"stage {argv[0]} exited with {code}"
    finally:
        os.chdir(cwd)
    return root
