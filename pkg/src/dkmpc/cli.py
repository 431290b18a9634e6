"""Command line entry point: ``dkmpc <subcommand> [options]``.

Every subcommand reads the packaged default configuration, then an
optional ``--config`` file, then ``--set key=value`` overrides and the
dedicated flags.  Outputs go to ``--run-dir`` together with a
``manifest.json`` describing the run.

Exit status: 0 on success, 1 on a usage error, 2 on a runtime failure.
"""
import argparse
import glob
import json
import os
import platform
import shutil
import sys
import time
from importlib import resources

import numpy as np

from . import bench, kernels
from .config import apply_overrides, parse_value, read_kv
from .dataset import fit_normalizer, load_csv, segment, split_records, write_csv
from .errors import DkmpcError
from .koopman import KoopmanModel, TrainConfig, train, write_loss_log
from .mpc import MpcConfig, write_diagnostics
from .nnet import spectral_radius
from .plant import ExcitationConfig, PlantParams, generate_flights

__version__ = "0.1.0"
COMMANDS = ("generate-data", "train", "eval-model", "stabilize", "track", "sweep", "pipeline")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# settings ------------------------------------------------------------------
def default_config_path():
    return str(resources.files("dkmpc") / "configs" / "default.cfg")


def load_settings(config=None, overrides=(), seed=None):
    """Merge the packaged defaults, ``config`` and ``key=value`` overrides."""
    base = default_config_path()
    settings = read_kv(base)
    settings["_config_dir"] = os.path.dirname(base)
    if config:
        settings.update(read_kv(config))
        settings["_config_dir"] = os.path.dirname(os.path.abspath(config))
    settings = apply_overrides(settings, overrides)
    if seed is not None:
        settings["seed"] = int(seed)
    return settings


def _floats(v, n=None):
    if isinstance(v, str):
        v = parse_value(v)
    out = [float(x) for x in (v if isinstance(v, (list, tuple)) else [v])]
    if n is not None and len(out) != n:
        raise ValueError(f"expected {n} values, got {len(out)}")
    return out


def _names(v):
    return [str(x).strip() for x in (v if isinstance(v, (list, tuple)) else str(v).split(","))]


def plant_params(s):
    path = s.get("plant_config", "plant.cfg")
    if not os.path.isabs(path):
        path = os.path.join(s["_config_dir"], path)
        if not os.path.exists(path):
            path = os.path.join(os.path.dirname(default_config_path()), s["plant_config"])
    return PlantParams.from_file(path)


def excitation_config(s):
    return ExcitationConfig.from_mapping(s)


def train_config(s):
    return TrainConfig(epochs=int(s["epochs"]), batch_size=int(s["batch_size"]),
                       lr=float(s["lr"]), weights=tuple(_floats(s["loss_weights"], 4)),
                       seed=int(s["seed"]))


def mpc_config(s, horizon=None):
    return MpcConfig(horizon=int(horizon or s["horizon"]), Q=float(s["q_weight"]),
                     R=float(s["r_weight"]), u_min=float(s["u_min"]), u_max=float(s["u_max"]),
                     tol=float(s["qp_tol"]), max_iter=int(s["qp_max_iter"]),
                     scaling=bool(s["qp_scaling"]))


def nmpc_overrides(s):
    budget = float(s.get("nmpc_budget_ms", 0) or 0)
    return {"max_outer": int(s["nmpc_max_outer"]), "max_inner": int(s["nmpc_max_inner"]),
            "tol": float(s["nmpc_tol"]), "time_budget_ms": budget if budget > 0 else None,
            "dt": float(s["dt"])}


def lissajous(s):
    return bench.Lissajous(tuple(_floats(s["lissajous_amp"], 3)),
                           tuple(_floats(s["lissajous_freq"], 3)),
                           tuple(_floats(s["lissajous_phase"], 3)),
                           float(s["lissajous_yaw_amp"]), float(s["lissajous_yaw_freq"]))


def schedule(s):
    return bench.StepSchedule.parse(s["stabilize_schedule"])


# shared plumbing -----------------------------------------------------------
class Run:
    """Run directory plus manifest bookkeeping."""

    def __init__(self, command, run_dir, settings, argv):
        self.command = command
        self.dir = run_dir
        self.settings = settings
        self.argv = list(argv)
        self.timings = {}
        self.outputs = []
        os.makedirs(run_dir, exist_ok=True)

    def path(self, *parts):
        p = os.path.join(self.dir, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        self.outputs.append(os.path.relpath(p, self.dir))
        return p

    def timed(self, name, fn, *a, **kw):
        t0 = time.perf_counter()
        out = fn(*a, **kw)
        self.timings[name] = time.perf_counter() - t0
        return out

    def write_manifest(self, status="ok", error=None):
        import scipy
        snapshot = {k: v for k, v in self.settings.items() if not k.startswith("_")}
        manifest = {
            "command": self.command, "argv": self.argv, "status": status,
            "seed": self.settings.get("seed"), "config": snapshot,
            "versions": {"dkmpc": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__,
                         "kernel_backend": kernels.BACKEND},
            "timings_s": self.timings, "outputs": sorted(set(self.outputs)),
        }
        if error:
            manifest["error"] = error
        bench.write_json(manifest, os.path.join(self.dir, "manifest.json"))


def load_records(data_dir):
    files = sorted(glob.glob(os.path.join(data_dir, "*.csv")))
    if not files:
        raise FileNotFoundError(f"no CSV flight records in {data_dir}")
    return [load_csv(f) for f in files]


def _splits(s):
    return tuple(_floats(s["splits"], 3))


# subcommands ---------------------------------------------------------------
def cmd_generate_data(run, s):
    params = plant_params(s)
    recs = run.timed("generate", generate_flights, params, excitation_config(s), int(s["seed"]))
    for i, r in enumerate(recs):
        write_csv(r, run.path("data", f"flight_{i:03d}.csv"))
    params.save(run.path("plant.cfg"))
    return {"records": len(recs), "samples": int(sum(len(r) for r in recs))}


def cmd_train(run, s, data_dir):
    recs = load_records(data_dir)
    tr, va, te = split_records(recs, _splits(s))
    norm = fit_normalizer(tr)
    train_set, val_set, _ = segment(recs, norm, _splits(s))
    model = KoopmanModel.initialize(norm, int(s["latent_dim"]),
                                    tuple(int(h) for h in _floats(s["hidden"])), int(s["seed"]))
    cfg = train_config(s)
    res = run.timed("train", train, model, train_set, val_set, cfg)
    chosen = res.best if s.get("checkpoint", "best") == "best" else res.model
    chosen.save(run.path("model.json"))
    res.model.save(run.path("model_final.json"))
    res.best.save(run.path("model_best.json"))
    norm.save(run.path("normalizer.json"))
    write_loss_log(res.log, run.path("loss_log.csv"))
    rho = spectral_radius(chosen.A_matrix)[0]
    return {"triples": {"train": len(train_set), "validation": len(val_set)},
            "best_epoch": res.best_epoch, "spectral_radius": rho}


def cmd_eval_model(run, s, model_path, data_dir):
    model = KoopmanModel.load(model_path)
    recs = load_records(data_dir)
    _, _, test = split_records(recs, _splits(s))
    if not test:
        raise DkmpcError("the configured splits leave no test records")
    steps = int(s["rollout_steps"])
    met, truth, pred = run.timed("evaluate", bench.evaluate_model, model, test, steps)
    score = [model.state_names.index(c) for c in bench.SCORE_CHANNELS]
    rows = bench.metric_rows("eval-model", "model", None, met)
    bench.write_metrics_csv(rows, run.path("metrics.csv"))
    out = {"rollout_steps": steps, "test_records": len(test), "all_channels": met.to_dict(),
           "score_channels": list(bench.SCORE_CHANNELS),
           "r2_score_channels": [float(met.r2[i]) for i in score]}
    bench.write_json(out, run.path("metrics.json"))
    with open(run.path("rollouts.csv"), "w", encoding="utf-8") as fh:
        names = list(model.state_names)
        fh.write(",".join([f"true_{n}" for n in names] + [f"pred_{n}" for n in names]) + "\n")
        for a, b in zip(truth, pred):
            fh.write(",".join("%.17g" % v for v in np.concatenate([a, b])) + "\n")
    return out


def _controllers(s, override=None):
    names = _names(override or s["controllers"])
    for n in names:
        if n not in bench.CONTROLLERS:
            raise UsageError(f"unknown controller {n!r}")
    return names


def cmd_closed_loop(run, s, model_path, scenario, controllers, duration=None, horizon=None):
    model = KoopmanModel.load(model_path)
    params = plant_params(s)
    key = "stabilize_horizon" if scenario == "stabilize" else "horizon"
    H = int(horizon or s.get(key, s["horizon"]))
    if scenario == "stabilize":
        ref = schedule(s)
        dur = float(duration or s["stabilize_duration"])
    else:
        ref = lissajous(s)
        dur = float(duration or s["track_duration"])
    rows, summary = [], {}
    for name in controllers:
        spec = bench.ExperimentSpec(scenario, ref, dur, name, H, int(s["seed"]), float(s["dt"]))
        log, met = run.timed(name, bench.run_closed_loop, spec, model, mpc_config(s, H),
                             params, nmpc_overrides(s))
        bench.write_trajectory(log, run.path(name, "trajectory.csv"))
        if name == "dk-mpc":
            write_diagnostics([(t, i) for t, i in zip(log.t, log.infos)],
                              run.path(name, "diagnostics.csv"))
        if met is None:
            summary[name] = {"aborted": True, "error": log.error}
            continue
        if scenario == "stabilize":
            met.extra["settling_error"] = bench.settling_errors(log, ref, dur).tolist()
        rows += bench.metric_rows(scenario, name, H, met)
        summary[name] = dict(met.to_dict(), error=log.error)
    bench.write_metrics_csv(rows, run.path("metrics.csv"))
    bench.write_json({"scenario": scenario, "horizon": H, "duration": dur,
                      "controllers": summary}, run.path("metrics.json"))
    return summary


def cmd_sweep(run, s, model_path, horizons=None, controllers=None, duration=None):
    model = KoopmanModel.load(model_path)
    Hs = [int(h) for h in _floats(horizons or s["sweep_horizons"])]
    dur = float(duration or s["sweep_duration"])
    spec = bench.ExperimentSpec("horizon-sweep", lissajous(s), dur, "dk-mpc", Hs[0],
                                int(s["seed"]), float(s["dt"]))
    rows = run.timed("sweep", bench.run_horizon_sweep, spec, model, mpc_config(s), Hs,
                     controllers, plant_params(s), nmpc_overrides(s))
    bench.write_sweep(rows, run.path("sweep.csv"))
    mrows = []
    for r in rows:
        if r.metrics is not None:
            mrows += bench.metric_rows("horizon-sweep", r.controller, r.H, r.metrics)
    bench.write_metrics_csv(mrows, run.path("metrics.csv"))
    cells = [{"H": r.H, "controller": r.controller, "r2": r.r2, "median_ms": r.median_ms,
              "p95_ms": r.p95_ms, "error": r.error} for r in rows]
    bench.write_json({"duration": dur, "cells": cells}, run.path("metrics.json"))
    return cells


def run_pipeline(s, run_dir, argv=()):
    """generate-data, train, eval-model, stabilize, track and sweep in one tree."""
    stages = {}
    order = [("generate-data", lambda r: cmd_generate_data(r, s))]
    data = os.path.join(run_dir, "generate-data", "data")
    model = os.path.join(run_dir, "train", "model.json")
    ctl = _controllers(s)
    order += [("train", lambda r: cmd_train(r, s, data)),
              ("eval-model", lambda r: cmd_eval_model(r, s, model, data)),
              ("stabilize", lambda r: cmd_closed_loop(r, s, model, "stabilize", ctl)),
              ("track", lambda r: cmd_closed_loop(r, s, model, "track", ctl)),
              ("sweep", lambda r: cmd_sweep(r, s, model, controllers=ctl))]
    top = Run("pipeline", run_dir, s, argv)
    for name, fn in order:
        sub = Run(name, os.path.join(run_dir, name), s, argv)
        stages[name] = top.timed(name, fn, sub)
        sub.write_manifest()
    top.write_manifest()
    return stages


# argument parsing ----------------------------------------------------------
def build_parser():
    p = _Parser(prog="dkmpc", description="Deep Koopman MPC experiments for a quadrotor.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    def common(sp, model=False, data=False):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration entry (repeatable)")
        sp.add_argument("--run-dir", help="output directory (default runs/<command>)")
        if model:
            sp.add_argument("--model", required=True, help="trained model checkpoint (JSON)")
        if data:
            sp.add_argument("--data", required=True, help="directory of flight CSV files")

    sp = sub.add_parser("generate-data", help="simulate excitation flights")
    common(sp)
    sp.add_argument("--records", type=int, help="number of flight records")
    sp = sub.add_parser("train", help="train the Koopman autoencoder")
    common(sp, data=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--latent-dim", type=int)
    sp = sub.add_parser("eval-model", help="open-loop rollouts on the test split")
    common(sp, model=True, data=True)
    sp.add_argument("--steps", type=int, help="rollout length")
    for name, what in (("stabilize", "step-setpoint regulation"),
                       ("track", "Lissajous trajectory tracking")):
        sp = sub.add_parser(name, help=what)
        common(sp, model=True)
        sp.add_argument("--controller", help="dk-mpc, nmpc or a comma list")
        sp.add_argument("--duration", type=float)
        sp.add_argument("--horizon", type=int)
    sp = sub.add_parser("sweep", help="accuracy and latency over prediction horizons")
    common(sp, model=True)
    sp.add_argument("--horizons", help="comma list, e.g. 5,10,15")
    sp.add_argument("--controller", help="dk-mpc, nmpc or a comma list")
    sp.add_argument("--duration", type=float)
    sp = sub.add_parser("pipeline", help="run every stage into one run directory")
    common(sp)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        overrides = list(args.set)
        for flag, key in (("records", "n_records"), ("epochs", "epochs"),
                          ("latent_dim", "latent_dim"), ("steps", "rollout_steps")):
            if getattr(args, flag, None) is not None:
                overrides.append(f"{key}={getattr(args, flag)}")
        try:
            s = load_settings(args.config, overrides, args.seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        run_dir = args.run_dir or os.path.join("runs", args.command)
        ctl = None
        if args.command in ("stabilize", "track", "sweep"):
            ctl = _controllers(s, args.controller)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    if args.command == "pipeline":
        try:
            stages = run_pipeline(s, run_dir, argv)
        except (DkmpcError, OSError, ValueError, KeyError) as exc:
            print(f"dkmpc pipeline: {type(exc).__name__}: {exc}", file=sys.stderr)
            return 2
        print(json.dumps({"run_dir": run_dir, "stages": list(stages)}))
        return 0
    run = Run(args.command, run_dir, s, argv)
    try:
        if args.command == "generate-data":
            out = cmd_generate_data(run, s)
        elif args.command == "train":
            out = cmd_train(run, s, args.data)
        elif args.command == "eval-model":
            out = cmd_eval_model(run, s, args.model, args.data)
        elif args.command in ("stabilize", "track"):
            out = cmd_closed_loop(run, s, args.model, args.command, ctl, args.duration,
                                  args.horizon)
        else:
            out = cmd_sweep(run, s, args.model, args.horizons, ctl, args.duration)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (DkmpcError, OSError, ValueError, KeyError) as exc:
        run.write_manifest("failed", f"{type(exc).__name__}: {exc}")
        print(f"dkmpc {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    run.write_manifest()
    print(json.dumps(bench._strict({"run_dir": run_dir, "result": out}),
                     default=bench._json_default)[:2000])
    return 0


if __name__ == "__main__":
    sys.exit(main())
