"""Command-line entry point: synth -> align -> fit-gp -> imitate -> evaluate -> report."""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__

log = logging.getLogger("cutgp")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------- manifest

def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir, key: str, argv: Sequence[str], args, inputs: Sequence, outputs: Sequence,
                   started: str, config: Optional[dict] = None) -> Path:
    """Record one run in ``out_dir/manifest.json`` under ``key`` (one manifest per directory)."""
    out_dir = Path(out_dir)
    path = out_dir / MANIFEST
    doc = json.loads(path.read_text()) if path.exists() else {"entries": {}}
    doc.setdefault("entries", {})
    doc["entries"][key] = {
        "command": args.command,
        "argv": list(argv),
        "cwd": os.getcwd(),
        "config_hash": hashlib.sha256(json.dumps(config or {}, sort_keys=True, default=str)
                                      .encode()).hexdigest()[:16],
        "seeds": {"seed": args.seed},
        "threads": args.threads,
        "inputs": {str(p): file_hash(p) for p in inputs},
        "outputs": {str(p): file_hash(p) for p in outputs},
        "version": __version__,
        "started": started,
        "finished": _now(),
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def rerun(manifest_path, key: str) -> dict:
    """Re-execute a manifest entry; returns ``{output: (old_hash, new_hash)}``."""
    doc = json.loads(Path(manifest_path).read_text())
    entry = doc["entries"][key]
    old = dict(entry["outputs"])
    cwd = os.getcwd()
    try:
        os.chdir(entry["cwd"])
        code = main(entry["argv"])
        if code != EXIT_OK:
            raise RuntimeError(f"rerun of {key} exited with {code}")
        return {p: (h, file_hash(p)) for p, h in old.items()}
    finally:
        os.chdir(cwd)


# ----------------------------------------------------------------- helpers

def _require(path, what="input file") -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _env_config(args) -> dict:
    from . import sim
    override = None
    if getattr(args, "gp", None):
        _require(args.gp, "GP model")
        override = {"augmentation": {"enabled": True, "gp_model_path": str(args.gp)}}
    if getattr(args, "sensor_sigma", None) is not None:
        override = sim.merge_config(override or {}, {"augmentation": {"sensor_sigma": args.sensor_sigma}})
    if args.env is not None:
        _require(args.env, "env config")
    return sim.load_config(args.env, override)


def _write_csv(path, header, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else repr(float(v)) for v in r])


# ------------------------------------------------------------------ commands

def cmd_synth(args, argv):
    from . import synth
    started = _now()
    cfg = dict(json.loads(_require(args.config, "synth config").read_text())) if args.config else {}
    for k in ("n_trials", "n_samples"):
        if getattr(args, k) is not None:
            cfg[k] = getattr(args, k)
    out = Path(args.out or "synth")
    truth = synth.write(out, cfg, args.seed)
    outputs = [out / f for f in truth["files"]] + [out / "truth.json", out / truth["mechanistic_file"]]
    write_manifest(out, "synth", argv, args, [args.config] if args.config else [], outputs, started, cfg)
    print(f"wrote {len(truth['files'])} trials to {out}")


def _trial_files(inputs, exclude):
    files = []
    for item in inputs:
        p = _require(item)
        if p.is_dir():
            files += sorted(f for f in p.glob("*.csv") if f.name not in exclude)
        else:
            files.append(p)
    if not files:
        raise ValueError("no input CSV files found")
    return files


def cmd_align(args, argv):
    from . import timeseries as ts
    started = _now()
    files = _trial_files(args.inputs, set(args.exclude))
    raw = [ts.read_csv(f) for f in files]
    cfg = ts.AlignConfig(reference=args.reference, open_ended=not args.closed,
                         window=args.window, rate_hz=args.rate)
    ds = ts.build_dataset(raw, cfg)
    out = Path(args.out or "dataset.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(ds.to_json()))
    write_manifest(out.parent, out.name, argv, args, files, [out], started, vars(cfg))
    print(f"aligned {len(raw)} series on {len(ds.time_grid)} samples -> {out}")


def cmd_fit_gp(args, argv):
    from . import gp
    from . import timeseries as ts
    started = _now()
    dpath = _require(args.dataset, "dataset")
    doc = json.loads(dpath.read_text())
    ds = ts.AlignedDataset.from_json(doc)
    inputs = [dpath]
    if args.mechanistic:
        mpath = _require(args.mechanistic, "mechanistic prediction")
        inputs.append(mpath)
        mech = ts.read_csv(mpath)
        if len(mech) != len(ds.time_grid):
            raise ValueError(f"{mpath}: {len(mech)} samples, dataset grid has {len(ds.time_grid)}")
        predicted = mech.forces
    elif args.raw:
        predicted = None
    else:
        predicted = "mean"
    targets = gp.condense(gp.compute_residuals(ds, predicted), args.max_points)
    res = gp.fit(targets, restarts=args.restarts, noise_init=args.noise_init, seed=args.seed,
                 fit_points=args.fit_points)
    meta = {"dataset_hash": file_hash(dpath), "fit_nll": res.nll,
            "restarts": res.starts, "seed": args.seed}
    model = gp.GpModel.from_fit(res, targets, meta)
    out = Path(args.out or "gp.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    write_manifest(out.parent, out.name, argv, args, inputs, [out], started,
                   {k: getattr(args, k) for k in ("restarts", "noise_init", "max_points", "fit_points")})
    for name, k, nv in zip("xyz", model.kernels, model.noise_variances):
        print(f"{name}: p={k.period:.5g} s l={k.length_scale:.4g} s2={k.signal_variance:.4g} n2={nv:.4g}")


def _read_times(path) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ValueError(f"{path}: no times")
    try:
        float(rows[0][0])
    except ValueError:
        rows = rows[1:]
    return np.array([float(r[0]) for r in rows])


def cmd_gp_predict(args, argv):
    from . import gp
    started = _now()
    mpath = _require(args.model, "GP model")
    tpath = _require(args.times, "times file")
    model = gp.GpModel.load(mpath)
    times = _read_times(tpath)
    mean, cov = model.posterior(times)
    var = np.stack([np.diag(c) for c in cov], axis=-1)
    draws = model.sample(times, seed=args.seed, n_samples=args.samples) if args.samples else None
    header = ["t"] + [f"mean_{a}" for a in "xyz"] + [f"var_{a}" for a in "xyz"]
    if draws is not None:
        header += [f"sample{k}_{a}" for k in range(args.samples) for a in "xyz"]
    rows = []
    for i, t in enumerate(times):
        r = [t, *mean[i], *var[i]]
        if draws is not None:
            r += draws[:, i, :].reshape(-1).tolist()
        rows.append(r)
    out = Path(args.out or "prediction.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, header, rows)
    write_manifest(out.parent, out.name, argv, args, [mpath, tpath], [out], started)
    print(f"predicted {len(times)} points -> {out}")


def cmd_simulate(args, argv):
    from . import imitation as im
    from . import sim
    from .eval import EpisodeRecord
    started = _now()
    cfg = _env_config(args)
    env = sim.CutEnv(cfg)
    policy = im.load_policy(args.policy, env)
    inputs = [p for p in (args.env, args.gp) if p] + ([args.policy] if Path(args.policy).exists() else [])
    out = Path(args.out or "simulation")
    out.mkdir(parents=True, exist_ok=True)
    outputs, summary = [], []
    for k in range(args.episodes):
        seed = im.derive_seed(args.seed, im.STREAM_EVAL, k)
        traj = sim.rollout(env, policy, seed=seed)
        p = out / f"episode_{k:03d}.csv"
        traj.to_csv(p)
        outputs.append(p)
        summary.append(vars(EpisodeRecord.from_trajectory(traj, env.weights, env.rate_bounds)))
    sp = out / "summary.json"
    sp.write_text(json.dumps({"policy": args.policy, "augmented": env.augmented, "episodes": summary}, indent=1))
    outputs.append(sp)
    write_manifest(out, "simulate", argv, args, inputs, outputs, started, cfg)
    rewards = [e["reward"] for e in summary]
    print(f"{args.episodes} episodes, mean reward {np.mean(rewards):.4f} -> {out}")


def cmd_imitate(args, argv):
    from . import gp as gpmod
    from . import imitation as im
    from . import sim
    started = _now()
    cfg = _env_config(args)
    aug = cfg.get("augmentation", {})
    clean_cfg = sim.merge_config(cfg, {"augmentation": {"enabled": False, "sensor_sigma": 0.0}})
    env = sim.CutEnv(clean_cfg)
    gp_model = gpmod.GpModel.load(args.gp) if args.gp else None
    sigma = float(aug.get("sensor_sigma", 0.0) or 0.0)
    draw = im.disturbance_sampler(gp_model, env.time_grid, sigma) if (gp_model or sigma > 0) else None
    expert = im.load_policy(args.expert, env)
    icfg = im.ImitationConfig(algorithm=args.algo, episodes=args.episodes, lr=args.lr,
                              batch=args.batch, epochs=args.epochs)
    init, winfo = im.warm_start(env, expert, icfg, args.seed)
    runner = im.run_bc if args.algo == "bc" else im.run_dagger
    pol, buf = runner(env, expert, draw, icfg, args.seed, init)
    pol.provenance.update({"config_hash": im.config_hash({"env": cfg, "imitation": icfg.to_json()}),
                           "imitation": icfg.to_json(), "warm_start_converged": winfo["converged"]})
    out = Path(args.out or "policy.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    pol.save(out)
    inputs = [p for p in (args.env, args.gp) if p] + ([args.expert] if Path(args.expert).exists() else [])
    write_manifest(out.parent, out.name, argv, args, inputs, [out], started, icfg.to_json())
    print(f"{args.algo}: {len(buf)} pairs from {args.episodes} episodes -> {out}")


def _evaluate_one(job):
    from . import eval as ev
    from . import imitation as im
    from . import sim
    name, spec, cfg, seeds = job
    env = sim.CutEnv(cfg)
    policy = im.load_policy(spec, env)
    rep, trajs = ev.evaluate_strategy(env, policy, name, seeds, keep_trajectories=True)
    return rep, trajs[:1]


def cmd_evaluate(args, argv):
    from . import eval as ev
    from . import imitation as im
    started = _now()
    cfg = _env_config(args)
    specs = [s for s in (args.policies or "").split(",") if s]
    jobs = []
    seeds = [im.derive_seed(args.seed_base, im.STREAM_EVAL, k) for k in range(args.episodes)]
    if args.baseline:
        jobs.append(("baseline", "baseline", ev.baseline_env_config(cfg), seeds))
    names = set()
    for s in specs:
        name = Path(s).stem if Path(s).suffix else s
        if name in names:
            raise ValueError(f"duplicate strategy name {name!r}")
        names.add(name)
        if s not in ("expert", "baseline", "null") and not Path(s).exists():
            raise FileNotFoundError(f"policy file not found: {s}")
        jobs.append((name, s, cfg, seeds))
    if len(jobs) < 1:
        raise UsageError("nothing to evaluate: give --policies and/or --baseline")
    if args.threads > 1:
        with ProcessPoolExecutor(args.threads) as pool:
            results = list(pool.map(_evaluate_one, jobs))
    else:
        results = [_evaluate_one(j) for j in jobs]
    reports = [r for r, _ in results]
    out = Path(args.out or "report")
    out.mkdir(parents=True, exist_ok=True)
    outputs = [out / "reports.json"]
    ev.save_reports(reports, outputs[0])
    outputs += ev.export_traces({r.name: t for r, t in results}, out)
    if len(reports) >= 2:
        comp = ev.compare(reports)
        (out / "comparison.json").write_text(json.dumps(comp, indent=1))
        outputs.append(out / "comparison.json")
    inputs = [p for p in (args.env, args.gp) if p] + [s for s in specs if Path(s).exists()]
    write_manifest(out, "evaluate", argv, args, inputs, outputs, started, cfg)
    for r in reports:
        s = r.summary()
        print(f"{r.name:>12s}: reward {s['reward_mean']:.4f} +- {s['reward_std']:.4f}")


def cmd_report(args, argv):
    from . import eval as ev
    from . import plotting
    from .sim import read_trajectory_csv
    started = _now()
    src = _require(args.inp, "report directory")
    rpath = _require(src / "reports.json", "reports file")
    reports = ev.load_reports(rpath)
    out = Path(args.out or src)
    out.mkdir(parents=True, exist_ok=True)
    table = [r.summary() for r in reports]
    outputs = []
    comp = ev.compare(reports) if len(reports) >= 2 else {"table": table, "tests": [], "violin": {},
                                                            "notices": ["fewer than two strategies"]}
    if args.format == "csv":
        p = out / "table.csv"
        ev.write_table_csv(table, p)
        outputs.append(p)
        if comp["tests"]:
            p = out / "tests.csv"
            _write_csv(p, ["a", "b", "t", "df", "p"], [[t["a"], t["b"], t["t"], t["df"], t["p"]]
                                                       for t in comp["tests"]])
            outputs.append(p)
    else:
        p = out / "summary.json"
        p.write_text(json.dumps(comp, indent=1))
        outputs.append(p)
    if not args.no_figures:
        outputs.append(plotting.reward_violins({r.name: r.rewards for r in reports}, out / "rewards.png"))
        outputs.append(plotting.reward_components(table, out / "components.png"))
        traces = {}
        for r in reports:
            tp = src / f"traces_{r.name}.csv"
            if tp.exists():
                cols = read_trajectory_csv(tp)
                first = cols["episode"] == cols["episode"].min()
                traces[r.name] = {k: v[first] for k, v in cols.items()}
        if traces:
            outputs.append(plotting.trace_panels(traces, out / "traces.png"))
    write_manifest(out, "report", argv, args, [rpath], outputs, started)
    for note in comp.get("notices", []):
        print(f"notice: {note}")
    for t in comp["tests"]:
        print(f"{t['a']} vs {t['b']}: t={t['t']:.3f} df={t['df']:.1f} p={t['p']:.3g}")


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="root random seed")
    common.add_argument("--threads", type=int, default=1, help="worker processes where supported")
    common.add_argument("--verbose", "-v", action="count", default=0)
    common.add_argument("--out", help="output file or directory")

    p = _Parser(prog="cutgp", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="command")
    sub.required = True

    s = sub.add_parser("synth", parents=[common], help="generate synthetic force trials")
    s.add_argument("--config", help="JSON overrides for the generator")
    s.add_argument("--n-trials", type=int)
    s.add_argument("--n-samples", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("align", parents=[common], help="align force trials into a dataset")
    s.add_argument("inputs", nargs="+", help="CSV files or directories of CSV files")
    s.add_argument("--reference", type=int, help="reference series index (default: longest)")
    s.add_argument("--window", type=int, help="DTW band half-width in samples")
    s.add_argument("--closed", action="store_true", help="require the query to be consumed too")
    s.add_argument("--rate", type=float, default=500.0, help="resampling rate (Hz)")
    s.add_argument("--exclude", nargs="*", default=["mechanistic.csv"],
                   help="file names skipped when scanning directories")
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("fit-gp", parents=[common], help="fit the periodic disturbance GP")
    s.add_argument("--dataset", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--mechanistic", help="CSV of the process-model force on the dataset grid")
    g.add_argument("--raw", action="store_true", help="fit measured forces directly")
    s.add_argument("--restarts", type=int, default=8)
    s.add_argument("--noise-init", type=float, default=0.01)
    s.add_argument("--max-points", type=int, default=1500)
    s.add_argument("--fit-points", type=int, default=500)
    s.set_defaults(func=cmd_fit_gp)

    s = sub.add_parser("gp-predict", parents=[common], help="posterior mean/variance and samples")
    s.add_argument("--model", required=True)
    s.add_argument("--times", required=True, help="CSV whose first column holds times (s)")
    s.add_argument("--samples", type=int, default=0)
    s.set_defaults(func=cmd_gp_predict)

    s = sub.add_parser("simulate", parents=[common], help="roll out a policy")
    s.add_argument("--env")
    s.add_argument("--policy", default="expert", help="policy JSON or expert|baseline")
    s.add_argument("--episodes", type=int, default=1)
    s.add_argument("--gp", help="GP model; enables the augmented domain")
    s.add_argument("--sensor-sigma", type=float)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("imitate", parents=[common], help="train a learner by BC or DAgger")
    s.add_argument("--env")
    s.add_argument("--gp")
    s.add_argument("--expert", default="expert")
    s.add_argument("--algo", choices=("bc", "dagger"), default="dagger")
    s.add_argument("--episodes", type=int, default=50)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--sensor-sigma", type=float)
    s.set_defaults(func=cmd_imitate)

    s = sub.add_parser("evaluate", parents=[common], help="compare strategies over seeded rollouts")
    s.add_argument("--env")
    s.add_argument("--gp", help="GP model; evaluates in the augmented domain")
    s.add_argument("--sensor-sigma", type=float)
    s.add_argument("--policies", help="comma-separated policy files or builtins")
    s.add_argument("--baseline", action="store_true", help="include the fixed-parameter baseline")
    s.add_argument("--episodes", type=int, default=50)
    s.add_argument("--seed-base", type=int, default=0)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", parents=[common], help="tables, t-tests and figures from an evaluation")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--format", choices=("csv", "json"), default="csv")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("cutgp: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        args.func(args, argv)
    except UsageError as exc:
        print(f"cutgp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ValueError, KeyError, RuntimeError, json.JSONDecodeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"cutgp {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
