"""Receding-horizon control in the learned latent space.

The latent model ``z' = A z + B u`` is condensed over the horizon into a
box-constrained QP over the stacked inputs ``U = (u_0, ..., u_H)``::

    minimize 0.5 U'PU + q'U   s.t.  u_min <= u_k <= u_max

with ``P = 2 (G'QG + R)`` and ``q = 2 G'Q (F z0 - r)``, where ``F`` and
``G`` stack the free and forced responses of ``z_1 .. z_H``.  The state
term at ``k = 0`` does not depend on ``U`` and is left out.  The last
input block reaches no penalized state; it is kept so that ``U`` has
``H + 1`` blocks and simply settles at the input-penalty minimizer.
"""
import csv
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import kernels
from .errors import DimensionMismatch, MaxIterations, NonFinite, NotPsd

DIAG_HEADER = ["t", "solve_ms", "iterations", "objective", "saturated_count"]


def _as_weight(w, dim, name):
    w = np.asarray(w, dtype=float)
    if w.ndim == 0:
        w = float(w) * np.eye(dim)
    elif w.ndim == 1:
        w = np.diag(w)
    if w.shape != (dim, dim):
        raise DimensionMismatch(f"{name} must be {dim}x{dim}")
    if not np.all(np.isfinite(w)):
        raise NonFinite(f"{name} has non-finite entries")
    if np.max(np.abs(w - w.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(w))):
        raise NotPsd(f"{name} is not symmetric")
    if dim and np.linalg.eigvalsh(w).min() < -1e-12 * max(1.0, np.max(np.abs(w))):
        raise NotPsd(f"{name} is not positive semi-definite")
    return w


@dataclass
class MpcConfig:
    """Horizon, weights and input box in normalized units.

    ``Q`` and ``R`` accept a scalar (times identity), a diagonal vector or
    a full matrix; they are resolved against the model dimensions by
    :meth:`weights`.
    """
    horizon: int = 10
    Q: object = 1.0
    R: object = 0.1
    u_min: object = -1.0
    u_max: object = 1.0
    tol: float = 1e-5
    max_iter: int = 2000
    strict: bool = False
    scaling: bool = False
    exact_check: bool = True

    def __post_init__(self):
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ValueError("horizon must be a positive integer")
        self.horizon = int(self.horizon)
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("tolerance and iteration cap must be positive")

    def weights(self, n, m):
        return _as_weight(self.Q, n, "Q"), _as_weight(self.R, m, "R")

    def bounds(self, m):
        lo = np.broadcast_to(np.asarray(self.u_min, dtype=float), (m,)).copy()
        hi = np.broadcast_to(np.asarray(self.u_max, dtype=float), (m,)).copy()
        if np.any(lo > hi):
            raise ValueError("u_min must not exceed u_max")
        return lo, hi


def power_iteration(P, iters=500, tol=1e-10):
    """Upper bound on the largest eigenvalue of a symmetric PSD matrix.

    Power iteration from a fixed start vector (deterministic) gives the
    estimate; it can stall short of the top eigenvalue when the leading
    eigenvalues are clustered, so the inflated estimate ``L`` is certified
    by a Cholesky factorization of ``L I - P`` and grown until that succeeds.
    """
    k = P.shape[0]
    if k == 0:
        return 1.0
    v = np.ones(k) / np.sqrt(k)
    lam = 0.0
    for _ in range(iters):
        w = P @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            break
        v = w / nrm
        if abs(nrm - lam) <= tol * nrm:
            lam = nrm
            break
        lam = nrm
    lam = max(lam, float(v @ P @ v))
    L = 1.01 * lam if lam > 0.0 else 1.0
    eye = np.eye(k)
    while True:
        try:
            np.linalg.cholesky(L * eye - P)
            return L
        except np.linalg.LinAlgError:
            L *= 1.1


@dataclass
class MpcProblem:
    """Condensed QP data for one (A, B, Q, R, H, box) combination."""
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    horizon: int
    u_min: np.ndarray
    u_max: np.ndarray
    F: np.ndarray = field(repr=False)   # (H n, n) free response
    G: np.ndarray = field(repr=False)   # (H n, (H+1) m) forced response
    P: np.ndarray = field(repr=False)
    Kz: np.ndarray = field(repr=False)  # q = Kz z0 - Kr r
    Kr: np.ndarray = field(repr=False)
    lb: np.ndarray = field(repr=False)
    ub: np.ndarray = field(repr=False)
    scale: np.ndarray = field(repr=False)
    P_scaled: np.ndarray = field(repr=False)
    lipschitz: float = 1.0
    P_inv: np.ndarray = field(default=None, repr=False)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def n_var(self):
        return (self.horizon + 1) * self.m

    def linear_term(self, z0, z_ref):
        """``q`` for initial latent ``z0`` and references ``z_ref`` (H+1, n)."""
        z0 = np.asarray(z0, dtype=float)
        z_ref = np.asarray(z_ref, dtype=float)
        if z0.shape != (self.n,):
            raise DimensionMismatch(f"z0 must have {self.n} entries")
        if z_ref.shape != (self.horizon + 1, self.n):
            raise DimensionMismatch(f"z_ref must be ({self.horizon + 1}, {self.n})")
        return self.Kz @ z0 - self.Kr @ z_ref[1:].ravel()

    def objective(self, U, q):
        U = np.asarray(U, dtype=float).ravel()
        return float(0.5 * U @ self.P @ U + q @ U)

    def predict(self, z0, U):
        """Latent states ``z_1 .. z_H`` under the stacked inputs ``U``."""
        x = self.F @ np.asarray(z0, float) + self.G @ np.asarray(U, float).ravel()
        return x.reshape(self.horizon, self.n)


def condense(A, B, Q, R, horizon):
    """Prediction maps and Hessian of the condensed problem."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n, m = B.shape
    if A.shape != (n, n):
        raise DimensionMismatch("A must be n x n and B n x m")
    H = horizon
    F = np.empty((H * n, n))
    G = np.zeros((H * n, (H + 1) * m))
    powers = [np.eye(n)]
    for k in range(1, H + 1):
        powers.append(A @ powers[-1])
        F[(k - 1) * n:k * n] = powers[k]
    AB = [p @ B for p in powers[:H]]
    for k in range(1, H + 1):
        rows = slice((k - 1) * n, k * n)
        for j in range(k):
            G[rows, j * m:(j + 1) * m] = AB[k - 1 - j]
    Qbar = np.kron(np.eye(H), Q)
    Rbar = np.kron(np.eye(H + 1), R)
    GtQ = G.T @ Qbar
    P = 2.0 * (GtQ @ G + Rbar)
    P = 0.5 * (P + P.T)
    return F, G, P, 2.0 * GtQ @ F, 2.0 * GtQ


def build_problem(A, B, cfg):
    """Condense the latent MPC problem for dynamics ``(A, B)``.

    ``A`` and ``B`` may also be given through a model exposing
    ``A_matrix``/``B_matrix`` (pass the model as ``A`` and ``None``).
    """
    if B is None:
        A, B = A.A_matrix, A.B_matrix
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n, m = B.shape
    Q, R = cfg.weights(n, m)
    lo, hi = cfg.bounds(m)
    H = cfg.horizon
    F, G, P, Kz, Kr = condense(A, B, Q, R, H)
    scale, Ps, lip = qp_scaling(P, cfg.scaling)
    lb = np.tile(lo, H + 1) / scale
    ub = np.tile(hi, H + 1) / scale
    return MpcProblem(A, B, Q, R, H, lo, hi, F, G, P, Kz, Kr, lb, ub, scale, Ps, lip,
                      _inverse(P))


def qp_scaling(P, jacobi):
    """Diagonal scaling vector, scaled Hessian and its Lipschitz bound."""
    if jacobi:
        d = np.diag(P).copy()
        scale = np.where(d > 0.0, 1.0 / np.sqrt(np.where(d > 0.0, d, 1.0)), 1.0)
    else:
        scale = np.ones(P.shape[0])
    Ps = P * scale[:, None] * scale[None, :]
    return scale, Ps, power_iteration(Ps)


def _inverse(P):
    """Inverse of a positive definite Hessian, or ``None`` if singular."""
    try:
        c = scipy.linalg.cho_factor(P)
    except np.linalg.LinAlgError:
        return None
    return scipy.linalg.cho_solve(c, np.eye(P.shape[0]))


def unconstrained_minimizer(P, q):
    """``-P^{-1} q`` via Cholesky, or ``None`` if ``P`` is not definite."""
    try:
        c = scipy.linalg.cho_factor(P)
    except np.linalg.LinAlgError:
        return None
    return -scipy.linalg.cho_solve(c, q)


@dataclass
class QpResult:
    U: np.ndarray
    iterations: int
    objective: float
    converged: bool
    history: list = None


def solve_box_qp(P, q, lo, hi, U0=None, tol=1e-5, max_iter=2000, P_inv=None,
                 scale=None, P_scaled=None, lipschitz=None, exact_check=True,
                 history=False, U_unc=None):
    """Minimize ``0.5 U'PU + q'U`` subject to ``lo <= U <= hi``.

    With ``P_inv`` and ``exact_check`` the unconstrained minimizer is tried
    first; when it lies inside the box it is the exact optimum and no
    iterations are spent.  Otherwise the fast gradient kernel runs, warm
    started from ``U0`` (default: the clipped unconstrained minimizer, or
    zero without ``P_inv``).  ``U_unc`` supplies the unconstrained
    minimizer directly when the caller has a cheaper way to get it.
    """
    q = np.asarray(q, dtype=float)
    if not np.all(np.isfinite(q)):
        raise NonFinite("QP linear term is not finite")
    if scale is None or P_scaled is None or lipschitz is None:
        scale, P_scaled, lipschitz = qp_scaling(P, False)
    hist = [] if history else None
    if U_unc is None and P_inv is not None:
        U_unc = -(P_inv @ q)
    if U_unc is not None:
        if exact_check and np.all(U_unc >= lo) and np.all(U_unc <= hi):
            obj = float(0.5 * U_unc @ P @ U_unc + q @ U_unc)
            if hist is not None:
                hist.append(obj)
            return QpResult(U_unc, 0, obj, True, hist)
    if U0 is None:
        U0 = np.zeros_like(q) if U_unc is None else U_unc
    v0 = np.clip(np.asarray(U0, float).ravel(), lo, hi) / scale
    v, it, _, ok = kernels.fgm_box_qp(P_scaled, q * scale, lo / scale, hi / scale, scale,
                                      v0, lipschitz, tol, max_iter, hist)
    # exact projection in the original coordinates
    U = np.clip(np.asarray(v) * scale, lo, hi)
    obj = float(0.5 * U @ P @ U + q @ U)
    if not np.isfinite(obj):
        raise NonFinite("QP objective is not finite")
    return QpResult(U, it, obj, ok, hist)


def solve_qp(problem, q, U0=None, tol=1e-5, max_iter=2000, strict=False, history=False,
             exact_check=True):
    """Solve the condensed QP of ``problem`` for linear term ``q``."""
    H1 = problem.horizon + 1
    res = solve_box_qp(problem.P, q, np.tile(problem.u_min, H1), np.tile(problem.u_max, H1),
                       U0, tol, max_iter, problem.P_inv, problem.scale, problem.P_scaled,
                       problem.lipschitz, exact_check, history)
    if strict and not res.converged:
        raise MaxIterations(f"QP not solved to {tol} in {max_iter} iterations", res)
    return res


def solve(problem, z0, z_ref, U0=None, tol=1e-5, max_iter=2000, strict=False,
          exact_check=True):
    """Solve the latent MPC problem; returns a :class:`QpResult`."""
    return solve_qp(problem, problem.linear_term(z0, z_ref), U0, tol, max_iter, strict,
                    exact_check=exact_check)


def pad_window(window, length):
    """Repeat the last row until ``window`` has ``length`` rows."""
    window = np.atleast_2d(np.asarray(window, dtype=float))
    if len(window) == 0:
        raise ValueError("reference window is empty")
    if len(window) >= length:
        return window[:length]
    return np.vstack([window, np.repeat(window[-1:], length - len(window), axis=0)])


@dataclass
class StepInfo:
    solve_ms: float
    iterations: int
    objective: float
    saturated_count: int
    converged: bool


class LatentMpc:
    """Latent-space MPC controller bound to a trained model.

    The condensed problem is built once per (model, config) pair and
    reused.  With ``warm_start`` successive calls start the solver from the
    previous solution shifted by one block; otherwise every solve starts
    from zero.
    """

    def __init__(self, model, cfg=None, warm_start=True):
        self.model = model
        self.cfg = cfg or MpcConfig()
        self.warm_start = warm_start
        self._problem = None
        self._key = None
        self._U = None

    @property
    def problem(self):
        key = (id(self.model), self.model.A_matrix.tobytes(), self.model.B_matrix.tobytes(),
               repr(self.cfg))
        if self._problem is None or key != self._key:
            self._problem = build_problem(self.model.A_matrix, self.model.B_matrix, self.cfg)
            self._key = key
            self._U = None
        return self._problem

    def reset(self):
        self._U = None

    def input_bounds(self):
        """Raw-unit input box implied by the normalized bounds."""
        lo, hi = self.cfg.bounds(self.model.n_u)
        sc = self.model.normalizer.input
        return sc.invert(lo), sc.invert(hi)

    def step(self, x, x_ref_window):
        """First optimal input (raw units) for state ``x``.

        ``x_ref_window`` holds raw reference states for ``t .. t+H``; a
        shorter window is padded with its last row.
        """
        p = self.problem
        t0 = time.perf_counter()
        refs = pad_window(x_ref_window, p.horizon + 1)
        z = self.model.encode(np.vstack([np.asarray(x, float)[None], refs]))
        if self.warm_start and self._U is not None:
            m = p.m
            U0 = np.concatenate([self._U[m:], self._U[-m:]])
        elif self.warm_start:
            U0 = None  # first call: clipped unconstrained minimizer
        else:
            U0 = np.zeros(p.n_var)
        res = solve(p, z[0], z[1:], U0, self.cfg.tol, self.cfg.max_iter, self.cfg.strict,
                    self.cfg.exact_check)
        self._U = res.U
        u = self.model.normalizer.input.invert(res.U[:p.m])
        ms = 1e3 * (time.perf_counter() - t0)
        sat = int(np.sum((res.U[:p.m] <= p.u_min) | (res.U[:p.m] >= p.u_max)))
        return u, StepInfo(ms, res.iterations, res.objective, sat, res.converged)


def control_step(model, cfg, x, x_ref_window, controller=None):
    """Functional form of :meth:`LatentMpc.step`.

    Pass the same ``controller`` across calls to keep the cached problem
    and the warm start.
    """
    ctl = controller if controller is not None else LatentMpc(model, cfg)
    return ctl.step(x, x_ref_window)


def write_diagnostics(rows, path):
    """``rows`` are ``(t, StepInfo)`` pairs."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIAG_HEADER)
        for t, info in rows:
            w.writerow(["%.17g" % t, "%.6f" % info.solve_ms, info.iterations,
                        "%.17g" % info.objective, info.saturated_count])


def read_diagnostics(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    conv = {"iterations": int, "saturated_count": int}
    return [{k: conv.get(k, float)(v) for k, v in r.items()} for r in rows]
