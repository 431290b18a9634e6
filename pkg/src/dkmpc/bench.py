"""Experiment harness: open-loop evaluation, closed-loop scenarios, sweeps.

Accuracy metrics are written separately from wall-clock timings so that
two runs with the same configuration give byte-identical metric files.
"""
import csv
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import INPUT_NAMES, STATE_NAMES
from .errors import (ConstantTruth, DimensionMismatch, DkmpcError, EulerSingularity,
                     NonFinite)
from .mpc import LatentMpc, MpcConfig
from .plant import (Nmpc, NmpcConfig, PlantParams, flat_reference, hover_state,
                    step_rk4)

SCENARIOS = ("stabilize", "track", "horizon-sweep", "eval-model")
CONTROLLERS = ("dk-mpc", "nmpc")
SCORE_CHANNELS = ("px", "py", "pz", "roll")
SWEEP_HEADER = ["H", "controller", "r2", "median_ms", "p95_ms"]
METRICS_HEADER = ["scenario", "controller", "H", "channel", "r2", "mse"]
WARMUP_STEPS = 10


# metrics -----------------------------------------------------------------
def r_squared_channels(truth, pred):
    """Per-channel ``1 - SS_res / SS_tot`` for ``(T,)`` or ``(T, C)`` series."""
    truth = np.asarray(truth, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if truth.shape != pred.shape:
        raise DimensionMismatch(f"truth {truth.shape} and prediction {pred.shape} differ")
    if truth.ndim == 1:
        truth, pred = truth[:, None], pred[:, None]
    if truth.ndim != 2 or truth.shape[0] < 2:
        raise DimensionMismatch("need at least two samples")
    dev = truth - truth.mean(axis=0)
    ss_tot = np.sum(dev * dev, axis=0)
    if np.any(ss_tot == 0.0):
        raise ConstantTruth("R^2 is undefined for a constant truth series")
    res = truth - pred
    return 1.0 - np.sum(res * res, axis=0) / ss_tot


def r_squared(truth, pred):
    """R^2 of one series, or the unweighted mean over the columns of ``(T, C)``."""
    return float(np.mean(r_squared_channels(truth, pred)))


def timing_stats(ms, warmup=WARMUP_STEPS):
    """Median and 95th percentile after dropping ``warmup`` leading samples."""
    ms = np.asarray(ms, dtype=float)
    if ms.size > warmup:
        ms = ms[warmup:]
    if ms.size == 0:
        return math.nan, math.nan
    return float(np.median(ms)), float(np.percentile(ms, 95))


@dataclass
class Metrics:
    channels: tuple
    r2: np.ndarray
    mse: np.ndarray
    median_ms: float = math.nan
    p95_ms: float = math.nan
    saturation_rate: float = math.nan
    steps: int = 0
    aborted: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(np.asarray(self.r2) > 1.0) or np.any(np.asarray(self.mse) < 0.0):
            raise ValueError("R^2 cannot exceed 1 and MSE cannot be negative")

    @property
    def r2_mean(self):
        """Unweighted mean over channels with a defined R^2."""
        r2 = np.asarray(self.r2, dtype=float)
        r2 = r2[np.isfinite(r2)]
        return float(np.mean(r2)) if r2.size else math.nan

    @classmethod
    def from_series(cls, truth, pred, channels, solve_ms=(), saturated=None, aborted=False):
        truth = np.asarray(truth, dtype=float)
        pred = np.asarray(pred, dtype=float)
        if truth.shape != pred.shape or truth.ndim != 2:
            raise DimensionMismatch("truth and prediction must be matching (T, C) arrays")
        r2 = np.full(truth.shape[1], math.nan)
        for i in range(truth.shape[1]):
            try:
                r2[i] = r_squared_channels(truth[:, i], pred[:, i])[0]
            except ConstantTruth:
                pass  # undefined for a constant reference channel
        mse = np.mean((truth - pred) ** 2, axis=0)
        med, p95 = timing_stats(solve_ms)
        sat = float(np.mean(saturated)) if saturated is not None and len(saturated) else math.nan
        return cls(tuple(channels), r2, mse, med, p95, sat, len(truth), aborted)

    def to_dict(self):
        return {"channels": list(self.channels),
                "r2": [float(v) for v in self.r2], "mse": [float(v) for v in self.mse],
                "r2_mean": self.r2_mean, "median_ms": self.median_ms, "p95_ms": self.p95_ms,
                "saturation_rate": self.saturation_rate, "steps": self.steps,
                "aborted": self.aborted, **self.extra}


# references --------------------------------------------------------------
@dataclass
class Lissajous:
    """3-D Lissajous curve with a slow yaw oscillation."""
    amp: tuple = (1.0, 1.0, 0.4)
    freq: tuple = (0.6, 1.2, 0.8)
    phase: tuple = (0.0, 0.0, 0.0)
    yaw_amp: float = 0.3
    yaw_freq: float = 0.2

    def __call__(self, t):
        a, w, p = np.asarray(self.amp), np.asarray(self.freq), np.asarray(self.phase)
        return a * np.sin(w * t + p), self.yaw_amp * math.sin(self.yaw_freq * t)

    def states(self, n, dt, g=9.81):
        return np.array([flat_reference(self, k * dt, g) for k in range(n)])


@dataclass
class StepSchedule:
    """Piecewise-constant hover setpoints ``(t_start, x, y, z, yaw)``."""
    steps: tuple = ((0.0, 0.0, 0.0, 0.0, 0.0), (1.0, 0.5, 0.0, 0.0, 0.0),
                    (6.0, 0.5, 0.5, 0.3, 0.0), (11.0, 0.0, 0.5, 0.0, 0.2),
                    (16.0, 0.0, 0.0, 0.0, 0.0))

    def __post_init__(self):
        ts = [s[0] for s in self.steps]
        if not self.steps or any(len(s) != 5 for s in self.steps) or ts != sorted(ts):
            raise ValueError("step schedule needs time-ordered (t, x, y, z, yaw) rows")

    @classmethod
    def parse(cls, text):
        """``"t x y z yaw | t x y z yaw | ..."``"""
        rows = []
        for part in str(text).split("|"):
            if not part.strip():
                continue
            vals = [float(v) for v in part.split()]
            if len(vals) != 5:
                raise ValueError(f"setpoint {part.strip()!r} needs t x y z yaw")
            rows.append(tuple(vals))
        return cls(tuple(rows))

    def format(self):
        return " | ".join(" ".join(repr(float(v)) for v in row) for row in self.steps)

    def setpoint(self, t):
        cur = self.steps[0]
        for s in self.steps:
            if s[0] <= t + 1e-12:
                cur = s
        return cur[1:]

    def states(self, n, dt):
        out = np.empty((n, 12))
        for k in range(n):
            x, y, z, yaw = self.setpoint(k * dt)
            out[k] = hover_state((x, y, z), yaw)
        return out


# closed loop -------------------------------------------------------------
@dataclass
class ExperimentSpec:
    scenario: str
    reference: object
    duration: float
    controller: str = "dk-mpc"
    horizon: int = 10
    seed: int = 0
    dt: float = 0.01
    out_dir: str = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.controller not in CONTROLLERS:
            raise ValueError(f"unknown controller {self.controller!r}")
        if not self.duration > 0 or not self.dt > 0:
            raise ValueError("duration and dt must be positive")
        if not hasattr(self.reference, "states"):
            raise ValueError("reference must provide states(n, dt)")

    @property
    def steps(self):
        return int(round(self.duration / self.dt))


@dataclass
class ClosedLoopLog:
    t: np.ndarray
    ref: np.ndarray
    state: np.ndarray
    inputs: np.ndarray
    solve_ms: np.ndarray
    saturated: np.ndarray
    aborted: bool = False
    error: str = ""
    infos: list = field(default_factory=list, repr=False)

    def metrics(self, channels=SCORE_CHANNELS, final_window=1.0):
        idx = [STATE_NAMES.index(c) for c in channels]
        met = Metrics.from_series(self.ref[:, idx], self.state[:, idx], channels,
                                  self.solve_ms, self.saturated, self.aborted)
        dt = self.t[1] - self.t[0] if len(self.t) > 1 else 1.0
        tail = max(1, int(round(final_window / dt)))
        err = np.abs(self.state[-tail:, idx] - self.ref[-tail:, idx]).mean(axis=0)
        met.extra["final_mae"] = [float(v) for v in err]
        return met


def settling_errors(log, schedule, end=None, window=1.0, channels=SCORE_CHANNELS):
    """Final-``window`` mean absolute error of every setpoint segment.

    Returns ``(T_seg, C)`` errors divided by the largest step of that
    segment, so 0.05 means the axis sits within 5% of the step size.
    """
    idx = [STATE_NAMES.index(c) for c in channels]
    steps = schedule.steps
    end = log.t[-1] if end is None else end
    out = []
    for i in range(1, len(steps)):
        t1 = steps[i + 1][0] if i + 1 < len(steps) else end
        size = np.max(np.abs(np.subtract(steps[i][1:], steps[i - 1][1:])))
        sel = (log.t > t1 - window - 1e-9) & (log.t <= t1 + 1e-9)
        if size == 0.0 or not sel.any():
            continue
        err = np.abs(log.state[sel][:, idx] - log.ref[sel][:, idx]).mean(axis=0)
        out.append(err / size)
    return np.array(out).reshape(-1, len(idx))


def make_controller(name, model, mpc_cfg, params=None, nmpc_overrides=None):
    if name == "dk-mpc":
        return LatentMpc(model, mpc_cfg)
    if name == "nmpc":
        cfg = NmpcConfig.from_normalizer(model.normalizer, mpc_cfg, **(nmpc_overrides or {}))
        return Nmpc(cfg, params=params)
    raise ValueError(f"unknown controller {name!r}")


def simulate(controller, ref_states, horizon, steps, params=None, dt=0.01, x0=None):
    """Alternate controller and plant for ``steps`` samples.

    The controller sees the reference window ``ref[k .. k+H]`` at step
    ``k``; the logged reference is ``ref[k+1]``, the sample the resulting
    state is compared with.  Only the controller call is timed.  An Euler
    singularity or a non-finite state ends the run early and keeps the
    partial log.
    """
    params = params or PlantParams()
    need = steps + horizon + 1
    if len(ref_states) < need:
        ref_states = np.vstack([ref_states, np.repeat(ref_states[-1:], need - len(ref_states), 0)])
    x = np.array(ref_states[0] if x0 is None else x0, dtype=float)
    states, inputs, ms, sat, infos = [], [], [], [], []
    aborted, error = False, ""
    for k in range(steps):
        window = ref_states[k:k + horizon + 1]
        try:
            t0 = time.perf_counter()
            u, info = controller.step(x, window)
            ms.append(1e3 * (time.perf_counter() - t0))
            x = step_rk4(x, u, dt, params)
        except (EulerSingularity, NonFinite) as exc:
            aborted, error = True, str(exc)
            break
        states.append(x)
        inputs.append(u)
        infos.append(info)
        sat.append(info.saturated_count > 0)
    n = len(states)
    return ClosedLoopLog(dt * np.arange(1, n + 1), np.asarray(ref_states[1:n + 1]),
                         np.asarray(states).reshape(n, 12), np.asarray(inputs).reshape(n, -1),
                         np.asarray(ms[:n]), np.asarray(sat, dtype=bool), aborted, error, infos)


def run_closed_loop(spec, model, mpc_cfg, params=None, nmpc_overrides=None):
    """One closed-loop run described by ``spec``; returns ``(log, metrics)``."""
    cfg = _with_horizon(mpc_cfg, spec.horizon)
    ctl = make_controller(spec.controller, model, cfg, params, nmpc_overrides)
    refs = spec.reference.states(spec.steps + spec.horizon + 1, spec.dt)
    log = simulate(ctl, refs, spec.horizon, spec.steps, params, spec.dt)
    if len(log.t) < 2:
        return log, None
    return log, log.metrics()


def run_stabilize(spec, model, mpc_cfg, params=None, nmpc_overrides=None):
    return run_closed_loop(spec, model, mpc_cfg, params, nmpc_overrides)


def run_track(spec, model, mpc_cfg, params=None, nmpc_overrides=None):
    return run_closed_loop(spec, model, mpc_cfg, params, nmpc_overrides)


@dataclass
class SweepRow:
    H: int
    controller: str
    r2: float
    median_ms: float
    p95_ms: float
    error: str = ""
    metrics: Metrics = field(default=None, repr=False)


def run_horizon_sweep(spec, model, mpc_cfg, horizons=(5, 10, 15, 20, 25),
                      controllers=CONTROLLERS, params=None, nmpc_overrides=None):
    """Tracking scenario for every (H, controller) cell; failures are recorded."""
    rows = []
    for H in horizons:
        for name in controllers:
            cell = ExperimentSpec("track", spec.reference, spec.duration, name, H,
                                  spec.seed, spec.dt)
            try:
                log, met = run_closed_loop(cell, model, mpc_cfg, params, nmpc_overrides)
            except DkmpcError as exc:
                rows.append(SweepRow(H, name, math.nan, math.nan, math.nan, str(exc)))
                continue
            if met is None:
                rows.append(SweepRow(H, name, math.nan, math.nan, math.nan, log.error))
                continue
            rows.append(SweepRow(H, name, met.r2_mean, met.median_ms, met.p95_ms,
                                 log.error, met))
    return rows


def _with_horizon(cfg, H):
    d = dict(cfg.__dict__)
    d["horizon"] = H
    return MpcConfig(**d)


# open loop ---------------------------------------------------------------
def rollout_windows(model, records, steps=100):
    """Decoded ``steps``-long rollouts restarted from the true state.

    Every record is cut into consecutive non-overlapping windows; each
    window starts from its first true state and is driven by the logged
    inputs.  Returns the concatenated ``(truth, prediction)`` states.
    """
    truths, preds = [], []
    for r in records:
        k = len(r) // steps
        if k == 0:
            continue
        x0 = r.states[:k * steps:steps]
        U = r.inputs[:k * steps].reshape(k, steps, -1)
        preds.append(model.predict_rollout(x0, U).reshape(-1, r.states.shape[1]))
        truths.append(r.states[:k * steps])
    if not truths:
        raise DimensionMismatch(f"no record is {steps} samples long")
    return np.concatenate(truths), np.concatenate(preds)


def evaluate_model(model, records, steps=100, channels=STATE_NAMES):
    truth, pred = rollout_windows(model, records, steps)
    idx = [list(model.state_names).index(c) for c in channels]
    return Metrics.from_series(truth[:, idx], pred[:, idx], channels), truth, pred


def time_controller(controller, states, refs, horizon, warmup=WARMUP_STEPS):
    """Time ``controller.step`` along a fixed replayed state stream."""
    ms = []
    for k in range(len(states)):
        t0 = time.perf_counter()
        controller.step(states[k], refs[k:k + horizon + 1])
        ms.append(1e3 * (time.perf_counter() - t0))
    return timing_stats(ms, warmup)


def time_interleaved(controllers, horizons, states, refs, warmup=WARMUP_STEPS):
    """Like :func:`time_controller` for several controllers at once.

    At every replayed state each controller is timed in turn, so slow
    periods of a shared machine hit all of them alike.  Returns one
    ``(median, p95)`` pair per controller.
    """
    ms = [[] for _ in controllers]
    for k in range(len(states)):
        for i, (ctl, H) in enumerate(zip(controllers, horizons)):
            t0 = time.perf_counter()
            ctl.step(states[k], refs[k:k + H + 1])
            ms[i].append(1e3 * (time.perf_counter() - t0))
    return [timing_stats(m, warmup) for m in ms]


# files ---------------------------------------------------------------------
def _fmt(v):
    return "%.17g" % v


def write_trajectory(log, path, state_names=STATE_NAMES, input_names=INPUT_NAMES):
    header = (["t"] + [f"ref_{s}" for s in state_names] + [f"state_{s}" for s in state_names]
              + [f"u_{u}" for u in input_names] + ["solve_ms"])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in range(len(log.t)):
            w.writerow([_fmt(log.t[k])] + [_fmt(v) for v in log.ref[k]]
                       + [_fmt(v) for v in log.state[k]] + [_fmt(v) for v in log.inputs[k]]
                       + ["%.6f" % log.solve_ms[k]])


def read_trajectory(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(v) for v in row] for row in reader])
    return header, data.reshape(-1, len(header))


def metric_rows(scenario, controller, H, met):
    return [[scenario, controller, "" if H is None else H, c, _fmt(r), _fmt(m)]
            for c, r, m in zip(met.channels, met.r2, met.mse)]


def write_metrics_csv(rows, path):
    """Accuracy-only metrics (no timings): deterministic for a fixed seed."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        w.writerows(rows)


def read_metrics_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["r2"], r["mse"] = float(r["r2"]), float(r["mse"])
        r["H"] = int(r["H"]) if r["H"] else None
    return rows


def write_sweep(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([r.H, r.controller, _fmt(r.r2), "%.6f" % r.median_ms, "%.6f" % r.p95_ms])


def read_sweep(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{"H": int(r["H"]), "controller": r["controller"], "r2": float(r["r2"]),
             "median_ms": float(r["median_ms"]), "p95_ms": float(r["p95_ms"])} for r in rows]


def _strict(o):
    """Replace NaN/inf by ``None`` so the output is standard JSON."""
    if isinstance(o, dict):
        return {k: _strict(v) for k, v in o.items()}
    if isinstance(o, (list, tuple, np.ndarray)):
        return [_strict(v) for v in o]
    if isinstance(o, (float, np.floating)):
        return float(o) if math.isfinite(o) else None
    if isinstance(o, np.integer):
        return int(o)
    return o


def write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_strict(obj), fh, indent=2, sort_keys=True, allow_nan=False,
                  default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")
