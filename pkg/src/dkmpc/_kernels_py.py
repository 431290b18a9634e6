"""Pure-Python implementations of the hot kernels.

These mirror ``_core.pyx`` line for line and are used when the compiled
extension is not available.  ``params`` is the packed vector
``(mass, g, Jx, Jy, Jz, kf, km, d)`` where ``d`` is the arm length
projected on the body axes (X configuration).
"""
from math import cos, sin, sqrt

import numpy as np

# rotor layout: body-frame x/y signs and reaction-torque signs
RX = (1.0, -1.0, -1.0, 1.0)
RY = (1.0, 1.0, -1.0, -1.0)
SPIN = (1.0, -1.0, 1.0, -1.0)


def quad_deriv(s, u, params):
    m, g, jx, jy, jz, kf, km, d = params
    phi, th, psi = s[6], s[7], s[8]
    p, q, r = s[9], s[10], s[11]
    f1, f2, f3, f4 = (kf * u[0] * u[0], kf * u[1] * u[1],
                      kf * u[2] * u[2], kf * u[3] * u[3])
    thrust = f1 + f2 + f3 + f4
    tx = d * (f1 + f2 - f3 - f4)
    ty = -d * (f1 - f2 - f3 + f4)
    tz = km * (u[0] * u[0] - u[1] * u[1] + u[2] * u[2] - u[3] * u[3])
    cph, sph = cos(phi), sin(phi)
    cth, sth = cos(th), sin(th)
    cps, sps = cos(psi), sin(psi)
    a = thrust / m
    out = np.empty(12)
    out[0] = s[3]
    out[1] = s[4]
    out[2] = s[5]
    out[3] = a * (cph * sth * cps + sph * sps)
    out[4] = a * (cph * sth * sps - sph * cps)
    out[5] = a * cph * cth - g
    w = q * sph + r * cph
    out[6] = p + w * sth / cth
    out[7] = q * cph - r * sph
    out[8] = w / cth
    out[9] = (tx + (jy - jz) * q * r) / jx
    out[10] = (ty + (jz - jx) * r * p) / jy
    out[11] = (tz + (jx - jy) * p * q) / jz
    return out


def quad_jac(s, u, params):
    """Analytic ``(df/ds, df/du)`` of :func:`quad_deriv`."""
    m, g, jx, jy, jz, kf, km, d = params
    phi, th, psi = s[6], s[7], s[8]
    p, q, r = s[9], s[10], s[11]
    thrust = kf * (u[0] * u[0] + u[1] * u[1] + u[2] * u[2] + u[3] * u[3])
    cph, sph = cos(phi), sin(phi)
    cth, sth = cos(th), sin(th)
    cps, sps = cos(psi), sin(psi)
    tth = sth / cth
    a = thrust / m
    fx = np.zeros((12, 12))
    fu = np.zeros((12, 4))
    fx[0, 3] = fx[1, 4] = fx[2, 5] = 1.0

    r13 = cph * sth * cps + sph * sps
    r23 = cph * sth * sps - sph * cps
    r33 = cph * cth
    fx[3, 6] = a * (-sph * sth * cps + cph * sps)
    fx[3, 7] = a * cph * cth * cps
    fx[3, 8] = a * (-cph * sth * sps + sph * cps)
    fx[4, 6] = a * (-sph * sth * sps - cph * cps)
    fx[4, 7] = a * cph * cth * sps
    fx[4, 8] = a * (cph * sth * cps + sph * sps)
    fx[5, 6] = -a * sph * cth
    fx[5, 7] = -a * cph * sth

    w = q * sph + r * cph
    dw = q * cph - r * sph
    fx[6, 6] = dw * tth
    fx[6, 7] = w / (cth * cth)
    fx[6, 9] = 1.0
    fx[6, 10] = sph * tth
    fx[6, 11] = cph * tth
    fx[7, 6] = -q * sph - r * cph
    fx[7, 10] = cph
    fx[7, 11] = -sph
    fx[8, 6] = dw / cth
    fx[8, 7] = w * sth / (cth * cth)
    fx[8, 10] = sph / cth
    fx[8, 11] = cph / cth

    fx[9, 10] = (jy - jz) * r / jx
    fx[9, 11] = (jy - jz) * q / jx
    fx[10, 9] = (jz - jx) * r / jy
    fx[10, 11] = (jz - jx) * p / jy
    fx[11, 9] = (jx - jy) * q / jz
    fx[11, 10] = (jx - jy) * p / jz

    for i in range(4):
        dfi = 2.0 * kf * u[i]
        fu[3, i] = dfi * r13 / m
        fu[4, i] = dfi * r23 / m
        fu[5, i] = dfi * r33 / m
        fu[9, i] = d * RY[i] * dfi / jx
        fu[10, i] = -d * RX[i] * dfi / jy
        fu[11, i] = km * SPIN[i] * 2.0 * u[i] / jz
    return fx, fu


def rk4_step(s, u, dt, params):
    s = np.asarray(s, dtype=float)
    k1 = quad_deriv(s, u, params)
    k2 = quad_deriv(s + 0.5 * dt * k1, u, params)
    k3 = quad_deriv(s + 0.5 * dt * k2, u, params)
    k4 = quad_deriv(s + dt * k3, u, params)
    return s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step_jac(s, u, dt, params):
    """One RK4 step and its exact Jacobians ``(s_next, dS, dU)``."""
    s = np.asarray(s, dtype=float)
    eye = np.eye(12)
    h = 0.5 * dt
    k1 = quad_deriv(s, u, params)
    a1, b1 = quad_jac(s, u, params)
    s2 = s + h * k1
    k2 = quad_deriv(s2, u, params)
    a2, b2 = quad_jac(s2, u, params)
    dk2x = a2 @ (eye + h * a1)
    dk2u = a2 @ (h * b1) + b2
    s3 = s + h * k2
    k3 = quad_deriv(s3, u, params)
    a3, b3 = quad_jac(s3, u, params)
    dk3x = a3 @ (eye + h * dk2x)
    dk3u = a3 @ (h * dk2u) + b3
    s4 = s + dt * k3
    k4 = quad_deriv(s4, u, params)
    a4, b4 = quad_jac(s4, u, params)
    dk4x = a4 @ (eye + dt * dk3x)
    dk4u = a4 @ (dt * dk3u) + b4
    c = dt / 6.0
    nxt = s + c * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    dx = eye + c * (a1 + 2.0 * dk2x + 2.0 * dk3x + dk4x)
    du = c * (b1 + 2.0 * dk2u + 2.0 * dk3u + dk4u)
    return nxt, dx, du


def fgm_box_qp(P, q, lb, ub, scale, v0, lip, tol, max_iter, history=None):
    """Accelerated projected gradient on ``0.5 v'Pv + q'v``, ``lb <= v <= ub``.

    The problem is given in scaled coordinates ``v = u / scale``; the
    stopping test ``|u - clip(u - grad_u)|_inf <= tol`` is evaluated in the
    original coordinates.  Momentum is reset whenever an accelerated step
    fails to decrease the objective, which keeps the objective sequence
    non-increasing.  ``history`` (a list) receives that sequence, tracked
    through exact per-step differences.  Returns ``(v, iterations, objective, converged)``.
    """
    v = np.clip(v0, lb, ub)
    pv = P @ v
    fv = 0.5 * v @ pv + q @ v
    if history is not None:
        history.append(fv)
    y, py, t = v, pv, 1.0
    inv_l = 1.0 / lip
    lo_u, hi_u = lb * scale, ub * scale
    if v.size == 0 or _residual(v, pv, q, scale, lo_u, hi_u) <= tol:
        return v, 0, fv, True
    it = 0
    while it < max_iter:
        it += 1
        vn = np.clip(y - inv_l * (py + q), lb, ub)
        pvn = P @ vn
        delta = _decrease(v, pv, vn, pvn, q)
        if delta > 0.0:
            t = 1.0
            vn = np.clip(v - inv_l * (pv + q), lb, ub)
            pvn = P @ vn
            delta = _decrease(v, pv, vn, pvn, q)
            if delta > 0.0:
                # rounding floor: v is already optimal to machine precision
                break
        res = _residual(vn, pvn, q, scale, lo_u, hi_u)
        tn = 0.5 * (1.0 + sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / tn
        y = vn + beta * (vn - v)
        py = pvn + beta * (pvn - pv)
        v, pv, t = vn, pvn, tn
        fv = fv + delta
        if history is not None:
            history.append(fv)
        if res <= tol:
            break
    fv = 0.5 * v @ pv + q @ v
    return v, it, fv, bool(_residual(v, pv, q, scale, lo_u, hi_u) <= tol)


def _decrease(v, pv, vn, pvn, q):
    """f(vn) - f(v), evaluated without cancellation."""
    return float((vn - v) @ (0.5 * (pvn + pv) + q))


def _residual(v, pv, q, scale, lo_u, hi_u):
    u = v * scale
    g = (pv + q) / scale
    return float(np.max(np.abs(u - np.clip(u - g, lo_u, hi_u))))
