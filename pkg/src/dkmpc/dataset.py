"""Flight records, min-max normalization and transition triples.

A :class:`FlightRecord` is one uniformly sampled flight log.  Records are
split contiguously (whole records per split) so that no chain of
``x_{k+1} == x_k`` links leaks from training into validation or test data.
"""
import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (BadSplit, ConstantFeature, DimensionMismatch,
                     EmptyDataset, NonUniformTimestep, ParseError)

STATE_NAMES = ("px", "py", "pz", "vx", "vy", "vz",
               "roll", "pitch", "yaw", "wx", "wy", "wz")
INPUT_NAMES = ("u1", "u2", "u3", "u4")
QUAT_NAMES = ("qw", "qx", "qy", "qz")
EULER_NAMES = ("roll", "pitch", "yaw")

DEFAULT_SPLITS = (0.7, 0.15, 0.15)
SPLIT_TAGS = ("train", "validation", "test")


@dataclass
class FlightRecord:
    """Uniformly sampled state/input trajectory.

    ``states`` is ``(T, n_x)`` and ``inputs`` is ``(T, n_u)``; ``inputs[k]``
    is the command held constant from ``t_k`` to ``t_{k+1}``.
    """

    dt: float
    states: np.ndarray
    inputs: np.ndarray
    state_names: tuple = STATE_NAMES
    input_names: tuple = INPUT_NAMES
    t0: float = 0.0

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.state_names = tuple(self.state_names)
        self.input_names = tuple(self.input_names)
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.states.shape[0] != self.inputs.shape[0]:
            raise DimensionMismatch(
                f"{self.states.shape[0]} states but {self.inputs.shape[0]} inputs")
        if self.states.shape[0] < 2:
            raise ValueError("a flight record needs at least 2 samples")
        if self.states.shape[1] != len(self.state_names):
            raise DimensionMismatch("state width does not match state_names")
        if self.inputs.shape[1] != len(self.input_names):
            raise DimensionMismatch("input width does not match input_names")

    def __len__(self):
        return self.states.shape[0]

    @property
    def n_x(self):
        return self.states.shape[1]

    @property
    def n_u(self):
        return self.inputs.shape[1]

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(len(self))


class MinMaxScaler:
    """Affine map of each feature from ``[lo, hi]`` onto ``[-1, 1]``."""

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=float).copy()
        self.hi = np.asarray(hi, dtype=float).copy()
        if self.lo.shape != self.hi.shape or self.lo.ndim != 1:
            raise DimensionMismatch("min and max must be vectors of equal length")
        for i in np.flatnonzero(~(self.hi > self.lo)):
            raise ConstantFeature(int(i))
        self.span = self.hi - self.lo

    def __len__(self):
        return self.lo.size

    def _check(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[-1:] != self.lo.shape:
            raise DimensionMismatch(
                f"expected {self.lo.size} features, got shape {v.shape}")
        return v

    def apply(self, v):
        v = self._check(v)
        return 2.0 * (v - self.lo) / self.span - 1.0

    def invert(self, v):
        v = self._check(v)
        return (v + 1.0) * self.span / 2.0 + self.lo

    @property
    def scale(self):
        """d(normalized)/d(raw) per feature."""
        return 2.0 / self.span


@dataclass
class Normalizer:
    state: MinMaxScaler
    input: MinMaxScaler

    def to_dict(self):
        return {"state_min": self.state.lo.tolist(),
                "state_max": self.state.hi.tolist(),
                "input_min": self.input.lo.tolist(),
                "input_max": self.input.hi.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(MinMaxScaler(d["state_min"], d["state_max"]),
                   MinMaxScaler(d["input_min"], d["input_max"]))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def fit_normalizer(records):
    """Pooled per-feature extrema over every sample of ``records``."""
    records = list(records)
    if not records or sum(len(r) for r in records) == 0:
        raise EmptyDataset("no samples to fit a normalizer on")
    states = np.concatenate([r.states for r in records])
    inputs = np.concatenate([r.inputs for r in records])
    names = list(records[0].state_names) + list(records[0].input_names)
    try:
        s = MinMaxScaler(states.min(axis=0), states.max(axis=0))
    except ConstantFeature as exc:
        raise ConstantFeature(exc.index, names[exc.index]) from None
    try:
        u = MinMaxScaler(inputs.min(axis=0), inputs.max(axis=0))
    except ConstantFeature as exc:
        i = states.shape[1] + exc.index
        raise ConstantFeature(i, names[i]) from None
    return Normalizer(s, u)


def normalize(scaler, v):
    return scaler.apply(v)


def denormalize(scaler, v):
    return scaler.invert(v)


@dataclass
class TripleSet:
    """Normalized ``(x_k, u_k, x_{k+1})`` transitions of one split.

    ``record_id[j]`` names the source record of triple ``j``; consecutive
    triples with equal ids are consecutive samples of that record.
    """

    x: np.ndarray
    u: np.ndarray
    x_next: np.ndarray
    split: str = "train"
    record_id: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.record_id is None:
            self.record_id = np.zeros(len(self.x), dtype=int)

    def __len__(self):
        return self.x.shape[0]

    def take(self, idx):
        return TripleSet(self.x[idx], self.u[idx], self.x_next[idx],
                         self.split, self.record_id[idx])


def _check_fractions(fractions):
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(not math.isfinite(f) or f < 0 for f in fr) \
            or abs(sum(fr) - 1.0) > 1e-9:
        raise BadSplit(f"split fractions must be 3 non-negative numbers summing to 1, got {fractions}")
    return fr


def split_records(records, fractions=DEFAULT_SPLITS):
    """Assign whole records, in order, to (train, validation, test).

    Each split boundary is placed at the record edge whose cumulative
    triple count is closest to the requested fraction.
    """
    records = list(records)
    fr = _check_fractions(fractions)
    if not records:
        raise EmptyDataset("no records to split")
    counts = np.array([len(r) - 1 for r in records])
    cum = np.concatenate([[0], np.cumsum(counts)])
    total = cum[-1]
    b1 = int(np.argmin(np.abs(cum - fr[0] * total)))
    target2 = (fr[0] + fr[1]) * total
    b2 = b1 + int(np.argmin(np.abs(cum[b1:] - target2)))
    if fr[2] == 0:
        b2 = len(records)
    return records[:b1], records[b1:b2], records[b2:]


def _triples(records, norm, tag, first_id=0):
    xs, us, xn, ids = [], [], [], []
    for j, r in enumerate(records):
        s = norm.state.apply(r.states)
        u = norm.input.apply(r.inputs)
        xs.append(s[:-1])
        us.append(u[:-1])
        xn.append(s[1:])
        ids.append(np.full(len(r) - 1, first_id + j))
    if not records:
        n_x, n_u = len(norm.state), len(norm.input)
        return TripleSet(np.empty((0, n_x)), np.empty((0, n_u)),
                         np.empty((0, n_x)), tag, np.empty(0, dtype=int))
    return TripleSet(np.concatenate(xs), np.concatenate(us),
                     np.concatenate(xn), tag, np.concatenate(ids))


def segment(records, norm, fractions=DEFAULT_SPLITS):
    """Split records and turn every record of length T into T-1 triples."""
    parts = split_records(records, fractions)
    out, first = [], 0
    for tag, recs in zip(SPLIT_TAGS, parts):
        out.append(_triples(recs, norm, tag, first))
        first += len(recs)
    return tuple(out)


def quat_to_euler(qw, qx, qy, qz):
    """Unit quaternion to Z-Y-X Euler angles (roll, pitch, yaw)."""
    qw, qx, qy, qz = (np.asarray(a, dtype=float) for a in (qw, qx, qy, qz))
    norm = np.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    qw, qx, qy, qz = qw / norm, qx / norm, qy / norm, qz / norm
    roll = np.arctan2(2 * (qw * qx + qy * qz), 1 - 2 * (qx * qx + qy * qy))
    pitch = np.arcsin(np.clip(2 * (qw * qy - qz * qx), -1.0, 1.0))
    yaw = np.arctan2(2 * (qw * qz + qx * qy), 1 - 2 * (qy * qy + qz * qz))
    return roll, pitch, yaw


def _convert_quaternions(names, states):
    if not all(q in names for q in QUAT_NAMES):
        return names, states
    idx = [names.index(q) for q in QUAT_NAMES]
    roll, pitch, yaw = quat_to_euler(*(states[:, i] for i in idx))
    keep = [i for i in range(len(names)) if i not in idx]
    at = min(idx)
    new_names = [names[i] for i in keep if i < at] + list(EULER_NAMES) \
        + [names[i] for i in keep if i > at]
    left = states[:, [i for i in keep if i < at]]
    right = states[:, [i for i in keep if i > at]]
    return new_names, np.column_stack([left, roll, pitch, yaw, right])


def load_csv(path, n_inputs=None):
    """Read a flight record.

    The header is ``t`` followed by state columns and then input columns.
    Unless ``n_inputs`` is given, input columns are the trailing columns
    whose names start with ``u``.  Quaternion columns ``qw,qx,qy,qz`` are
    converted to ``roll,pitch,yaw``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(1, "empty file")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "t":
        raise ParseError(1, "first column must be 't'")
    names = header[1:]
    if n_inputs is None:
        n_inputs = 0
        while n_inputs < len(names) and names[-1 - n_inputs].startswith("u"):
            n_inputs += 1
    n_states = len(names) - n_inputs
    if n_inputs < 1 or n_states < 1:
        raise ParseError(1, "header must name at least one state and one input column")

    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(lineno, f"expected {len(header)} fields, got {len(row)}")
        try:
            vals = [float(c) for c in row]
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError(lineno, "non-finite value")
        data.append((lineno, vals))
    if len(data) < 2:
        raise ParseError(len(rows), "need at least two samples")

    t = np.array([v[0] for _, v in data])
    dt = t[1] - t[0]
    if not dt > 0:
        raise NonUniformTimestep(data[1][0], "timestamps must strictly increase")
    tol = 1e-6 * dt
    for k in range(1, len(t)):
        if abs((t[k] - t[0]) - k * dt) > tol + 1e-12 * abs(t[k]):
            raise NonUniformTimestep(data[k][0],
                                     f"step {t[k] - t[k - 1]!r} differs from {dt!r}")
    arr = np.array([v[1:] for _, v in data])
    states, inputs = arr[:, :n_states], arr[:, n_states:]
    state_names, states = _convert_quaternions(names[:n_states], states)
    return FlightRecord(float(dt), states, inputs, tuple(state_names),
                        tuple(names[n_states:]), float(t[0]))


def write_csv(record, path):
    header = ["t", *record.state_names, *record.input_names]
    t = record.t0 + record.dt * np.arange(len(record))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in range(len(record)):
            w.writerow(["%.17g" % t[k]]
                       + ["%.17g" % v for v in record.states[k]]
                       + ["%.17g" % v for v in record.inputs[k]])
