"""Rigid-body quadrotor used as ground truth, and its flight-data generator.

State layout (12): position, velocity (world frame), Z-Y-X Euler angles
(roll, pitch, yaw) and body rates.  Inputs are the four rotor speeds in
rad/s; rotor ``i`` produces thrust ``kf * u_i**2``.
"""
import math
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import kernels
from .config import read_kv, write_kv
from .dataset import INPUT_NAMES, STATE_NAMES, FlightRecord
from .errors import EulerSingularity, GenerationFailed, MaxIterations, NonFinite
from .mpc import solve_box_qp, unconstrained_minimizer

POS, VEL, ATT, RATE = slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12)
ROLL, PITCH, YAW = 6, 7, 8
EULER_LIMIT = math.pi / 2 - 1e-3


@dataclass
class PlantParams:
    mass: float = 1.6
    arm_length: float = 0.425
    jx: float = 0.01
    jy: float = 0.01
    jz: float = 0.02
    gravity: float = 9.81
    u_min: float = 0.0
    u_max: float = 1000.0
    # 0 means "choose so that hover sits at half of u_max"
    kf: float = 0.0
    km_ratio: float = 0.016

    def __post_init__(self):
        if self.kf == 0.0:
            u_half = 0.5 * self.u_max
            self.kf = self.mass * self.gravity / (4.0 * u_half * u_half)
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "u_min":
                if not (0.0 <= value < self.u_max):
                    raise ValueError("need 0 <= u_min < u_max")
            elif not value > 0:
                raise ValueError(f"plant parameter {f.name} must be positive")

    @property
    def km(self):
        return self.kf * self.km_ratio

    @property
    def u_hover(self):
        return math.sqrt(self.mass * self.gravity / (4.0 * self.kf))

    def packed(self):
        d = self.arm_length / math.sqrt(2.0)
        return np.array([self.mass, self.gravity, self.jx, self.jy, self.jz,
                         self.kf, self.km, d])

    def mixer(self):
        """Map rotor forces to ``(thrust, tau_x, tau_y, tau_z)``."""
        d = self.arm_length / math.sqrt(2.0)
        return np.array([[1.0, 1.0, 1.0, 1.0],
                         [d, d, -d, -d],
                         [-d, d, d, -d],
                         [self.km_ratio, -self.km_ratio, self.km_ratio, -self.km_ratio]])

    @classmethod
    def from_file(cls, path):
        return cls(**{k: float(v) for k, v in read_kv(path).items()})

    def save(self, path):
        write_kv(asdict(self), path)


def hover_state(position=(0.0, 0.0, 0.0), yaw=0.0):
    s = np.zeros(12)
    s[POS] = position
    s[YAW] = yaw
    return s


def clamp_input(u, params):
    """Clip rotor commands to the rotor limits; also report whether it clipped."""
    u = np.asarray(u, dtype=float)
    c = np.clip(u, params.u_min, params.u_max)
    return c, bool(np.any(c != u))


def check_state(s):
    if not np.all(np.isfinite(s)):
        raise NonFinite("plant state is not finite")
    if abs(s[PITCH]) >= EULER_LIMIT:
        raise EulerSingularity(f"pitch {s[PITCH]:.4f} rad hit the Euler singularity guard")


def dynamics(s, u, params):
    """Continuous-time state derivative; ``u`` is clipped to rotor limits."""
    s = np.asarray(s, dtype=float)
    check_state(s)
    u, _ = clamp_input(u, params)
    return kernels.quad_deriv(s, u, params.packed())


def step_rk4(s, u, dt=0.01, params=None):
    """Advance one step of ``dt`` seconds with the input held constant."""
    params = params or PlantParams()
    if not dt > 0:
        raise ValueError("dt must be positive")
    s = np.asarray(s, dtype=float)
    check_state(s)
    u, _ = clamp_input(u, params)
    nxt = kernels.rk4_step(s, u, dt, params.packed())
    check_state(nxt)
    return nxt


def step_rk4_jac(s, u, dt, params):
    """``(s_next, d s_next / d s, d s_next / d u)`` from analytic derivatives."""
    s = np.asarray(s, dtype=float)
    check_state(s)
    u, _ = clamp_input(u, params)
    return kernels.rk4_step_jac(s, u, dt, params.packed())


def wrap_angle(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def attitude_from_accel(acc, yaw, g=9.81):
    """Roll and pitch that point the thrust along ``acc + g e3`` at ``yaw``."""
    fx, fy, fz = acc[0], acc[1], acc[2] + g
    c, s = math.cos(yaw), math.sin(yaw)
    bx, by = c * fx + s * fy, -s * fx + c * fy
    n = math.sqrt(bx * bx + by * by + fz * fz)
    roll = -math.asin(by / n)
    pitch = math.atan2(bx, fz)
    return roll, pitch


def euler_rates_to_body(att, att_dot):
    phi, th = att[0], att[1]
    return np.array([
        att_dot[0] - math.sin(th) * att_dot[2],
        math.cos(phi) * att_dot[1] + math.sin(phi) * math.cos(th) * att_dot[2],
        -math.sin(phi) * att_dot[1] + math.cos(phi) * math.cos(th) * att_dot[2],
    ])


def flat_reference(curve, t, g=9.81, h=1e-4):
    """Full 12-d reference state from a flat output ``curve(t) -> (pos, yaw)``.

    Velocity, acceleration and the attitude rates come from central
    differences of the curve with step ``h``.
    """
    def att_at(tau):
        p0, y0 = curve(tau - h)
        p1, y1 = curve(tau)
        p2, y2 = curve(tau + h)
        acc = (np.asarray(p2) - 2.0 * np.asarray(p1) + np.asarray(p0)) / (h * h)
        roll, pitch = attitude_from_accel(acc, y1, g)
        return np.array([roll, pitch, y1])

    pos, yaw = curve(t)
    pos = np.asarray(pos, dtype=float)
    vel = (np.asarray(curve(t + h)[0]) - np.asarray(curve(t - h)[0])) / (2.0 * h)
    att = att_at(t)
    att_dot = (att_at(t + h) - att_at(t - h)) / (2.0 * h)
    s = np.empty(12)
    s[POS], s[VEL], s[ATT] = pos, vel, att
    s[RATE] = euler_rates_to_body(att, att_dot)
    return s


@dataclass
class InnerLoopGains:
    """Cascaded PD used only to fly excitation maneuvers."""

    kp_pos: float = 2.0
    kd_pos: float = 2.6
    max_acc: float = 3.0
    max_tilt: float = 0.35
    kp_att: float = 150.0
    kd_att: float = 20.0
    kp_yaw: float = 6.0
    kd_yaw: float = 4.0


def inner_loop(s, p_ref, v_ref, yaw_ref, params, gains, a_ref=(0.0, 0.0, 0.0)):
    """Rotor speeds that steer ``s`` toward a position/yaw reference."""
    g = params.gravity
    acc = gains.kp_pos * (np.asarray(p_ref) - s[POS]) \
        + gains.kd_pos * (np.asarray(v_ref) - s[VEL]) + np.asarray(a_ref)
    acc = np.clip(acc, -gains.max_acc, gains.max_acc)
    phi, th, psi = s[ROLL], s[PITCH], s[YAW]
    thrust = params.mass * (g + acc[2]) / max(math.cos(phi) * math.cos(th), 0.5)
    c, sn = math.cos(psi), math.sin(psi)
    th_d = float(np.clip((acc[0] * c + acc[1] * sn) / g, -gains.max_tilt, gains.max_tilt))
    ph_d = float(np.clip((acc[0] * sn - acc[1] * c) / g, -gains.max_tilt, gains.max_tilt))
    e_yaw = wrap_angle(yaw_ref - psi)
    w = s[RATE]
    tau = np.array([
        params.jx * (gains.kp_att * (ph_d - phi) - gains.kd_att * w[0]),
        params.jy * (gains.kp_att * (th_d - th) - gains.kd_att * w[1]),
        params.jz * (gains.kp_yaw * e_yaw - gains.kd_yaw * w[2]),
    ])
    forces = np.linalg.solve(params.mixer(), np.concatenate([[thrust], tau]))
    u = np.sqrt(np.maximum(forces, 0.0) / params.kf)
    return np.clip(u, params.u_min, params.u_max)


@dataclass
class ExcitationConfig:
    n_records: int = 28
    duration: float = 10.0
    dt: float = 0.01
    box_xy: float = 1.5
    box_z: float = 1.0
    hold_min: float = 1.5
    hold_max: float = 3.5
    ref_tau: float = 0.6
    sine_fraction: float = 0.5
    sine_freq_min: float = 0.3
    sine_freq_max: float = 1.6
    yaw_range: float = 0.6
    noise_std: float = 6.0
    noise_tau: float = 0.05
    # rotor commands stay within u_hover +- envelope while collecting data
    envelope: float = 80.0
    max_attempts: int = 10

    @classmethod
    def from_mapping(cls, mapping):
        names = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in mapping.items():
            if k in names:
                kw[k] = int(v) if names[k] in (int, "int") else float(v)
        return cls(**kw)


def _maneuver(rng, cfg, n):
    """Position/yaw reference samples plus their velocities for one flight."""
    dt = cfg.dt
    t = dt * np.arange(n)
    if rng.random() < cfg.sine_fraction:
        center = rng.uniform(-0.3, 0.3, 3) * np.array([cfg.box_xy, cfg.box_xy, cfg.box_z])
        amp = rng.uniform(0.3, 1.0, 3) * np.array([cfg.box_xy, cfg.box_xy, cfg.box_z]) * 0.7
        freq = rng.uniform(cfg.sine_freq_min, cfg.sine_freq_max, 3)
        phase = rng.uniform(0, 2 * np.pi, 3)
        pos = center + amp * np.sin(np.outer(t, freq) + phase)
        vel = amp * freq * np.cos(np.outer(t, freq) + phase)
        acc = -amp * freq ** 2 * np.sin(np.outer(t, freq) + phase)
        yaw_amp = rng.uniform(0, cfg.yaw_range)
        yaw_f = rng.uniform(0.1, 0.4)
        yaw = yaw_amp * np.sin(yaw_f * t + rng.uniform(0, 2 * np.pi))
        return pos, vel, acc, yaw
    box = np.array([cfg.box_xy, cfg.box_xy, cfg.box_z])
    targets = np.empty((n, 3))
    yaw_t = np.empty(n)
    k = 0
    while k < n:
        hold = int(rng.uniform(cfg.hold_min, cfg.hold_max) / dt)
        targets[k:k + hold] = rng.uniform(-box, box)
        yaw_t[k:k + hold] = rng.uniform(-cfg.yaw_range, cfg.yaw_range)
        k += hold
    # second-order smoothing keeps the demanded motion flyable
    pos = np.empty((n, 3))
    vel = np.zeros((n, 3))
    yaw = np.empty(n)
    p, v = targets[0].copy(), np.zeros(3)
    y = yaw_t[0]
    wn = 1.0 / cfg.ref_tau
    for i in range(n):
        pos[i], vel[i], yaw[i] = p, v, y
        a = wn * wn * (targets[i] - p) - 2.0 * wn * v
        v = v + dt * a
        p = p + dt * v
        y = y + dt * (yaw_t[i] - y) / (2.0 * cfg.ref_tau)
    acc = np.gradient(vel, dt, axis=0)
    return pos, vel, acc, yaw


def _fly(rng, params, cfg, gains):
    n = int(round(cfg.duration / cfg.dt)) + 1
    ref_p, ref_v, ref_a, ref_yaw = _maneuver(rng, cfg, n)
    s = hover_state(ref_p[0], ref_yaw[0])
    s[VEL] = ref_v[0]
    states = np.empty((n, 12))
    inputs = np.empty((n, 4))
    noise = np.zeros(4)
    alpha = math.exp(-cfg.dt / cfg.noise_tau)
    sigma = cfg.noise_std * math.sqrt(1.0 - alpha * alpha)
    packed = params.packed()
    lo = max(params.u_min, params.u_hover - cfg.envelope)
    hi = min(params.u_max, params.u_hover + cfg.envelope)
    for k in range(n):
        u = inner_loop(s, ref_p[k], ref_v[k], ref_yaw[k], params, gains, ref_a[k])
        noise = alpha * noise + sigma * rng.standard_normal(4)
        u = np.clip(u + noise, lo, hi)
        states[k] = s
        inputs[k] = u
        if k + 1 < n:
            s = kernels.rk4_step(s, u, cfg.dt, packed)
            if not np.all(np.isfinite(s)) or abs(s[PITCH]) >= EULER_LIMIT:
                return None
    return FlightRecord(cfg.dt, states, inputs, STATE_NAMES, INPUT_NAMES)


def generate_flights(params=None, cfg=None, seed=0, gains=None):
    """Simulate excitation flights at ``1/cfg.dt`` Hz.

    Each record gets its own child seed, so record ``i`` does not depend on
    how many attempts earlier records needed.
    """
    params = params or PlantParams()
    cfg = cfg or ExcitationConfig()
    gains = gains or InnerLoopGains()
    seeds = np.random.SeedSequence(seed).spawn(cfg.n_records)
    records = []
    for i, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        for _ in range(cfg.max_attempts):
            rec = _fly(rng, params, cfg, gains)
            if rec is not None:
                records.append(rec)
                break
        else:
            raise GenerationFailed(f"record {i}: Euler guard tripped {cfg.max_attempts} times")
    return records


# ---------------------------------------------------------------------------
# nonlinear MPC baseline

@dataclass
class NmpcConfig:
    """Tracking problem in raw units for the SQP baseline.

    ``Q`` (n_x) and ``R`` (n_u) are diagonal weight vectors; inputs are
    penalized as deviations from ``u_ref``.  ``time_budget_ms`` stops the
    outer loop once the budget is spent (``None``: iteration caps only).
    """
    horizon: int = 10
    Q: object = 1.0
    R: object = 0.1
    u_min: object = 0.0
    u_max: object = 1000.0
    u_ref: object = 500.0
    dt: float = 0.01
    max_outer: int = 30
    max_inner: int = 200
    # SQP stops once the step is below ``tol`` (raw input units)
    tol: float = 1e-2
    qp_tol: float = 1e-6
    time_budget_ms: float = None
    strict: bool = False

    def __post_init__(self):
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ValueError("horizon must be a positive integer")
        self.horizon = int(self.horizon)

    @classmethod
    def from_normalizer(cls, normalizer, mpc_cfg, **kw):
        """Same horizon, weights and box as a latent controller.

        A weight ``w`` on a normalized coordinate ``x' = s x + c`` becomes
        ``w s^2`` on the raw coordinate.  The latent state weight is taken
        as a weight on every normalized state channel.
        """
        sx = normalizer.state.scale
        su = normalizer.input.scale
        n_x, n_u = len(sx), len(su)
        q = np.diag(_diag_weight(mpc_cfg.Q, n_x)) if np.ndim(mpc_cfg.Q) == 2 \
            else _diag_weight(mpc_cfg.Q, n_x)
        r = np.diag(_diag_weight(mpc_cfg.R, n_u)) if np.ndim(mpc_cfg.R) == 2 \
            else _diag_weight(mpc_cfg.R, n_u)
        lo, hi = mpc_cfg.bounds(n_u)
        return cls(horizon=mpc_cfg.horizon, Q=q * sx * sx, R=r * su * su,
                   u_min=normalizer.input.invert(lo), u_max=normalizer.input.invert(hi),
                   u_ref=normalizer.input.invert(np.zeros(n_u)), **kw)


def _diag_weight(w, dim):
    w = np.asarray(w, dtype=float)
    if w.ndim == 2:
        if w.shape != (dim, dim) or np.any(w != np.diag(np.diag(w))):
            raise ValueError("baseline weights must be diagonal")
        return np.diag(w).copy()
    out = np.broadcast_to(w, (dim,)).astype(float)
    if np.any(out < 0) or not np.all(np.isfinite(out)):
        raise ValueError("weights must be finite and non-negative")
    return out


def plant_model(params=None, dt=0.01):
    """``f(x, u) -> (x_next, dx, du)`` for the RK4 plant."""
    packed = (params or PlantParams()).packed()

    def f(x, u):
        return kernels.rk4_step_jac(x, u, dt, packed)
    return f


@dataclass
class NmpcInfo:
    """``outer`` counts accepted SQP steps, ``qp_solves`` every QP solved."""
    solve_ms: float
    outer: int
    inner: int
    cost: float
    converged: bool
    saturated_count: int = 0
    qp_solves: int = 0


class Nmpc:
    """Single-shooting Gauss-Newton SQP on a discrete model.

    ``model(x, u)`` returns the next state and its Jacobians; the default
    is the RK4 plant.  Each outer iteration linearizes along the current
    input sequence, solves the box QP for the step with the fast gradient
    kernel, and backtracks on the true cost.
    """

    def __init__(self, cfg, model=None, params=None, n_x=12, n_u=4, warm_start=True):
        self.cfg = cfg
        self.model = model or plant_model(params, cfg.dt)
        self.n_x = n_x
        self.warm_start = warm_start
        H = cfg.horizon
        self.q = _diag_weight(cfg.Q, n_x)
        self.m = n_u
        self.r = _diag_weight(cfg.R, self.m)
        self.lo = np.broadcast_to(np.asarray(cfg.u_min, float), (self.m,)).copy()
        self.hi = np.broadcast_to(np.asarray(cfg.u_max, float), (self.m,)).copy()
        self.u_ref = np.broadcast_to(np.asarray(cfg.u_ref, float), (self.m,)).copy()
        self.LB = np.tile(self.lo, H + 1)
        self.UB = np.tile(self.hi, H + 1)
        self.Rbar = np.tile(self.r, H + 1)
        self.Qbar = np.tile(self.q, H)
        self._U = None

    def reset(self):
        self._U = None

    def rollout(self, x0, U, jac=False):
        """States ``x_1 .. x_H`` (and Jacobians) under inputs ``U``."""
        H, m, n = self.cfg.horizon, self.m, self.n_x
        X = np.empty((H, n))
        As = np.empty((H, n, n)) if jac else None
        Bs = np.empty((H, n, m)) if jac else None
        x = np.asarray(x0, dtype=float)
        for k in range(H):
            x, dx, du = self.model(x, U[k * m:(k + 1) * m])
            if not np.all(np.isfinite(x)) or (n == 12 and abs(x[PITCH]) >= EULER_LIMIT):
                return None, None, None
            X[k] = x
            if jac:
                As[k], Bs[k] = dx, du
        return X, As, Bs

    def cost(self, X, U, R_ref):
        if X is None:
            return math.inf
        e = X - R_ref
        du = U - np.tile(self.u_ref, self.cfg.horizon + 1)
        return float(np.sum(self.Qbar * e.ravel() ** 2) + np.sum(self.Rbar * du * du))

    def _condense(self, As, Bs):
        H, m, n = self.cfg.horizon, self.m, self.n_x
        G = np.zeros((H, n, (H + 1) * m))
        for k in range(H):
            if k:
                G[k] = As[k] @ G[k - 1]
            G[k][:, k * m:(k + 1) * m] = Bs[k]
        return G.reshape(H * n, (H + 1) * m)

    def step(self, x, x_ref_window):
        cfg = self.cfg
        H, m = cfg.horizon, self.m
        t0 = time.perf_counter()
        refs = _pad(x_ref_window, H + 1)[1:]
        if self.warm_start and self._U is not None:
            U = np.concatenate([self._U[m:], self._U[-m:]])
        else:
            U = np.tile(self.u_ref, H + 1)
        U = np.clip(U, self.LB, self.UB)
        X, As, Bs = self.rollout(x, U, jac=True)
        if X is None:
            U = np.clip(np.tile(self.u_ref, H + 1), self.LB, self.UB)
            X, As, Bs = self.rollout(x, U, jac=True)
        J = self.cost(X, U, refs)
        outer = inner = solves = 0
        converged = False
        while solves < cfg.max_outer and X is not None:
            if cfg.time_budget_ms is not None and solves > 0 \
                    and 1e3 * (time.perf_counter() - t0) >= cfg.time_budget_ms:
                break
            G = self._condense(As, Bs)
            GQ = G.T * self.Qbar
            P = 2.0 * (GQ @ G)
            P[np.diag_indices_from(P)] += 2.0 * self.Rbar
            g = 2.0 * (GQ @ (X - refs).ravel()) + 2.0 * self.Rbar * (U - np.tile(self.u_ref, H + 1))
            res = solve_box_qp(P, g, self.LB - U, self.UB - U, None, cfg.qp_tol,
                               cfg.max_inner, U_unc=unconstrained_minimizer(P, g))
            inner += res.iterations
            dU = res.U
            solves += 1
            if np.max(np.abs(dU), initial=0.0) <= cfg.tol:
                converged = True
                break
            slope = float(g @ dU)
            alpha, accepted = 1.0, False
            while alpha >= 1e-4:
                Un = np.clip(U + alpha * dU, self.LB, self.UB)
                Xn, An, Bn = self.rollout(x, Un, jac=True)
                Jn = self.cost(Xn, Un, refs)
                if Jn <= J + 1e-4 * alpha * min(slope, 0.0):
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                converged = True  # no descent left along the Gauss-Newton step
                break
            U, X, As, Bs, J = Un, Xn, An, Bn, Jn
            outer += 1
        if X is None:
            raise NonFinite("baseline rollout left the admissible state region")
        self._U = U
        ms = 1e3 * (time.perf_counter() - t0)
        if cfg.strict and not converged:
            raise MaxIterations("SQP hit its iteration cap", U[:m])
        sat = int(np.sum((U[:m] <= self.lo) | (U[:m] >= self.hi)))
        return U[:m].copy(), NmpcInfo(ms, outer, inner, J, converged, sat, solves)


def _pad(window, length):
    window = np.atleast_2d(np.asarray(window, dtype=float))
    if len(window) >= length:
        return window[:length]
    return np.vstack([window, np.repeat(window[-1:], length - len(window), axis=0)])


def nmpc_control_step(params, cfg, x, x_ref_window, controller=None):
    """First input of the SQP baseline; pass ``controller`` to keep warm starts."""
    ctl = controller if controller is not None else Nmpc(cfg, params=params)
    return ctl.step(x, x_ref_window)
