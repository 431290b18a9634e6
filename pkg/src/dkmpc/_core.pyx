# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: quadrotor RK4 (with Jacobians) and the box-QP loop.

Same contracts as ``_kernels_py``; see that module for documentation.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, sqrt, fabs

cnp.import_array()

cdef double RX[4]
cdef double RY[4]
cdef double SPIN[4]
RX[:] = [1.0, -1.0, -1.0, 1.0]
RY[:] = [1.0, 1.0, -1.0, -1.0]
SPIN[:] = [1.0, -1.0, 1.0, -1.0]


cdef void _deriv(const double* s, const double* u, const double* prm, double* out) noexcept nogil:
    cdef double m = prm[0], g = prm[1], jx = prm[2], jy = prm[3], jz = prm[4]
    cdef double kf = prm[5], km = prm[6], d = prm[7]
    cdef double phi = s[6], th = s[7], psi = s[8]
    cdef double p = s[9], q = s[10], r = s[11]
    cdef double f1 = kf * u[0] * u[0], f2 = kf * u[1] * u[1]
    cdef double f3 = kf * u[2] * u[2], f4 = kf * u[3] * u[3]
    cdef double thrust = f1 + f2 + f3 + f4
    cdef double tx = d * (f1 + f2 - f3 - f4)
    cdef double ty = -d * (f1 - f2 - f3 + f4)
    cdef double tz = km * (u[0] * u[0] - u[1] * u[1] + u[2] * u[2] - u[3] * u[3])
    cdef double cph = cos(phi), sph = sin(phi)
    cdef double cth = cos(th), sth = sin(th)
    cdef double cps = cos(psi), sps = sin(psi)
    cdef double a = thrust / m
    cdef double w = q * sph + r * cph
    out[0] = s[3]
    out[1] = s[4]
    out[2] = s[5]
    out[3] = a * (cph * sth * cps + sph * sps)
    out[4] = a * (cph * sth * sps - sph * cps)
    out[5] = a * cph * cth - g
    out[6] = p + w * sth / cth
    out[7] = q * cph - r * sph
    out[8] = w / cth
    out[9] = (tx + (jy - jz) * q * r) / jx
    out[10] = (ty + (jz - jx) * r * p) / jy
    out[11] = (tz + (jx - jy) * p * q) / jz


cdef void _jac(const double* s, const double* u, const double* prm,
               double* fx, double* fu) noexcept nogil:
    # fx: 12x12 row-major, fu: 12x4 row-major; both fully overwritten
    cdef double m = prm[0], jx = prm[2], jy = prm[3], jz = prm[4]
    cdef double kf = prm[5], km = prm[6], d = prm[7]
    cdef double phi = s[6], th = s[7], psi = s[8]
    cdef double p = s[9], q = s[10], r = s[11]
    cdef double thrust = kf * (u[0] * u[0] + u[1] * u[1] + u[2] * u[2] + u[3] * u[3])
    cdef double cph = cos(phi), sph = sin(phi)
    cdef double cth = cos(th), sth = sin(th)
    cdef double cps = cos(psi), sps = sin(psi)
    cdef double tth = sth / cth
    cdef double a = thrust / m
    cdef double r13, r23, r33, w, dw, dfi
    cdef int i
    for i in range(144):
        fx[i] = 0.0
    for i in range(48):
        fu[i] = 0.0
    fx[0 * 12 + 3] = 1.0
    fx[1 * 12 + 4] = 1.0
    fx[2 * 12 + 5] = 1.0
    r13 = cph * sth * cps + sph * sps
    r23 = cph * sth * sps - sph * cps
    r33 = cph * cth
    fx[3 * 12 + 6] = a * (-sph * sth * cps + cph * sps)
    fx[3 * 12 + 7] = a * cph * cth * cps
    fx[3 * 12 + 8] = a * (-cph * sth * sps + sph * cps)
    fx[4 * 12 + 6] = a * (-sph * sth * sps - cph * cps)
    fx[4 * 12 + 7] = a * cph * cth * sps
    fx[4 * 12 + 8] = a * (cph * sth * cps + sph * sps)
    fx[5 * 12 + 6] = -a * sph * cth
    fx[5 * 12 + 7] = -a * cph * sth
    w = q * sph + r * cph
    dw = q * cph - r * sph
    fx[6 * 12 + 6] = dw * tth
    fx[6 * 12 + 7] = w / (cth * cth)
    fx[6 * 12 + 9] = 1.0
    fx[6 * 12 + 10] = sph * tth
    fx[6 * 12 + 11] = cph * tth
    fx[7 * 12 + 6] = -q * sph - r * cph
    fx[7 * 12 + 10] = cph
    fx[7 * 12 + 11] = -sph
    fx[8 * 12 + 6] = dw / cth
    fx[8 * 12 + 7] = w * sth / (cth * cth)
    fx[8 * 12 + 10] = sph / cth
    fx[8 * 12 + 11] = cph / cth
    fx[9 * 12 + 10] = (jy - jz) * r / jx
    fx[9 * 12 + 11] = (jy - jz) * q / jx
    fx[10 * 12 + 9] = (jz - jx) * r / jy
    fx[10 * 12 + 11] = (jz - jx) * p / jy
    fx[11 * 12 + 9] = (jx - jy) * q / jz
    fx[11 * 12 + 10] = (jx - jy) * p / jz
    for i in range(4):
        dfi = 2.0 * kf * u[i]
        fu[3 * 4 + i] = dfi * r13 / m
        fu[4 * 4 + i] = dfi * r23 / m
        fu[5 * 4 + i] = dfi * r33 / m
        fu[9 * 4 + i] = d * RY[i] * dfi / jx
        fu[10 * 4 + i] = -d * RX[i] * dfi / jy
        fu[11 * 4 + i] = km * SPIN[i] * 2.0 * u[i] / jz


cdef void _rk4(const double* s, const double* u, double dt, const double* prm,
               double* out) noexcept nogil:
    cdef double k1[12]
    cdef double k2[12]
    cdef double k3[12]
    cdef double k4[12]
    cdef double tmp[12]
    cdef int i
    _deriv(s, u, prm, k1)
    for i in range(12):
        tmp[i] = s[i] + 0.5 * dt * k1[i]
    _deriv(tmp, u, prm, k2)
    for i in range(12):
        tmp[i] = s[i] + 0.5 * dt * k2[i]
    _deriv(tmp, u, prm, k3)
    for i in range(12):
        tmp[i] = s[i] + dt * k3[i]
    _deriv(tmp, u, prm, k4)
    for i in range(12):
        out[i] = s[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


cdef inline void _mm12(const double* a, const double* b, int nc, double* out) noexcept nogil:
    # out (12 x nc) = a (12 x 12) @ b (12 x nc)
    cdef int i, j, k
    cdef double acc
    for i in range(12):
        for j in range(nc):
            acc = 0.0
            for k in range(12):
                acc += a[i * 12 + k] * b[k * nc + j]
            out[i * nc + j] = acc


def quad_deriv(s, u, params):
    cdef double[::1] sv = np.ascontiguousarray(s, dtype=np.float64)
    cdef double[::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef double[::1] pv = np.ascontiguousarray(params, dtype=np.float64)
    out = np.empty(12)
    cdef double[::1] ov = out
    _deriv(&sv[0], &uv[0], &pv[0], &ov[0])
    return out


def quad_jac(s, u, params):
    cdef double[::1] sv = np.ascontiguousarray(s, dtype=np.float64)
    cdef double[::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef double[::1] pv = np.ascontiguousarray(params, dtype=np.float64)
    fx = np.empty((12, 12))
    fu = np.empty((12, 4))
    cdef double[:, ::1] fxv = fx
    cdef double[:, ::1] fuv = fu
    _jac(&sv[0], &uv[0], &pv[0], &fxv[0, 0], &fuv[0, 0])
    return fx, fu


def rk4_step(s, u, double dt, params):
    cdef double[::1] sv = np.ascontiguousarray(s, dtype=np.float64)
    cdef double[::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef double[::1] pv = np.ascontiguousarray(params, dtype=np.float64)
    out = np.empty(12)
    cdef double[::1] ov = out
    _rk4(&sv[0], &uv[0], dt, &pv[0], &ov[0])
    return out


def rk4_step_jac(s, u, double dt, params):
    cdef double[::1] sv = np.ascontiguousarray(s, dtype=np.float64)
    cdef double[::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef double[::1] pv = np.ascontiguousarray(params, dtype=np.float64)
    nxt = np.empty(12)
    dx = np.empty((12, 12))
    du = np.empty((12, 4))
    cdef double[::1] nv = nxt
    cdef double[:, ::1] dxv = dx
    cdef double[:, ::1] duv = du
    with nogil:
        _rk4_jac(&sv[0], &uv[0], dt, &pv[0], &nv[0], &dxv[0, 0], &duv[0, 0])
    return nxt, dx, du


cdef void _rk4_jac(const double* s, const double* u, double dt, const double* prm,
                   double* nxt, double* dx, double* du) noexcept nogil:
    cdef double k1[12]
    cdef double k2[12]
    cdef double k3[12]
    cdef double k4[12]
    cdef double st[12]
    cdef double a[144]
    cdef double b[48]
    cdef double m[144]
    cdef double mu[48]
    cdef double dkx[144]
    cdef double dku[48]
    cdef double accx[144]
    cdef double accu[48]
    cdef double h = 0.5 * dt
    cdef double c = dt / 6.0
    cdef int i, stage
    cdef double coef, wgt

    _deriv(s, u, prm, k1)
    _jac(s, u, prm, a, b)
    for i in range(144):
        dkx[i] = a[i]
        accx[i] = a[i]
    for i in range(48):
        dku[i] = b[i]
        accu[i] = b[i]
    for stage in range(1, 4):
        coef = h if stage < 3 else dt
        wgt = 2.0 if stage < 3 else 1.0
        if stage == 1:
            for i in range(12):
                st[i] = s[i] + coef * k1[i]
            _deriv(st, u, prm, k2)
        elif stage == 2:
            for i in range(12):
                st[i] = s[i] + coef * k2[i]
            _deriv(st, u, prm, k3)
        else:
            for i in range(12):
                st[i] = s[i] + coef * k3[i]
            _deriv(st, u, prm, k4)
        _jac(st, u, prm, a, b)
        # dk = a @ (I + coef * dk_prev), du_k = a @ (coef * du_prev) + b
        for i in range(144):
            m[i] = coef * dkx[i]
        for i in range(12):
            m[i * 12 + i] += 1.0
        for i in range(48):
            mu[i] = coef * dku[i]
        _mm12(a, m, 12, dkx)
        _mm12(a, mu, 4, dku)
        for i in range(48):
            dku[i] += b[i]
        for i in range(144):
            accx[i] += wgt * dkx[i]
        for i in range(48):
            accu[i] += wgt * dku[i]
    for i in range(12):
        nxt[i] = s[i] + c * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    for i in range(144):
        dx[i] = c * accx[i]
    for i in range(12):
        dx[i * 12 + i] += 1.0
    for i in range(48):
        du[i] = c * accu[i]


cdef inline void _matvec(const double* P, const double* x, double* out, int n) noexcept nogil:
    cdef int i, j
    cdef double acc
    for i in range(n):
        acc = 0.0
        for j in range(n):
            acc += P[i * n + j] * x[j]
        out[i] = acc


cdef inline double _clip(double x, double lo, double hi) noexcept nogil:
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


cdef double _residual(const double* v, const double* pv, const double* q,
                      const double* scale, const double* lb, const double* ub,
                      int n) noexcept nogil:
    cdef int i
    cdef double u, g, r, worst = 0.0
    for i in range(n):
        u = v[i] * scale[i]
        g = (pv[i] + q[i]) / scale[i]
        r = fabs(u - _clip(u - g, lb[i] * scale[i], ub[i] * scale[i]))
        if r > worst:
            worst = r
    return worst


cdef double _decrease(const double* v, const double* pv, const double* vn,
                      const double* pvn, const double* q, int n) noexcept nogil:
    cdef int i
    cdef double acc = 0.0
    for i in range(n):
        acc += (vn[i] - v[i]) * (0.5 * (pvn[i] + pv[i]) + q[i])
    return acc


cdef double _objective(const double* v, const double* pv, const double* q, int n) noexcept nogil:
    cdef int i
    cdef double acc1 = 0.0, acc2 = 0.0
    for i in range(n):
        acc1 += v[i] * pv[i]
        acc2 += q[i] * v[i]
    return 0.5 * acc1 + acc2


def fgm_box_qp(P, q, lb, ub, scale, v0, double lip, double tol, int max_iter,
               history=None):
    cdef double[:, ::1] Pm = np.ascontiguousarray(P, dtype=np.float64)
    cdef double[::1] qv = np.ascontiguousarray(q, dtype=np.float64)
    cdef double[::1] lo = np.ascontiguousarray(lb, dtype=np.float64)
    cdef double[::1] hi = np.ascontiguousarray(ub, dtype=np.float64)
    cdef double[::1] sc = np.ascontiguousarray(scale, dtype=np.float64)
    cdef int n = qv.shape[0]
    cdef int i, it = 0, status = 0
    cdef double fv, delta, t = 1.0, tn, beta, res, inv_l = 1.0 / lip
    cdef bint record = history is not None

    v_arr = np.clip(np.asarray(v0, dtype=np.float64), np.asarray(lo), np.asarray(hi))
    if n == 0:
        return v_arr, 0, 0.0, True
    cdef double[::1] v = v_arr
    cdef double[::1] pv = np.empty(n)
    cdef double[::1] y = np.empty(n)
    cdef double[::1] py = np.empty(n)
    cdef double[::1] vn = np.empty(n)
    cdef double[::1] pvn = np.empty(n)
    cdef double[::1] hist = np.empty(max_iter + 1 if record else 1)
    cdef int nhist = 0

    _matvec(&Pm[0, 0], &v[0], &pv[0], n)
    fv = _objective(&v[0], &pv[0], &qv[0], n)
    if record:
        hist[0] = fv
        nhist = 1
    if _residual(&v[0], &pv[0], &qv[0], &sc[0], &lo[0], &hi[0], n) <= tol:
        status = 1
    else:
        with nogil:
            for i in range(n):
                y[i] = v[i]
                py[i] = pv[i]
            while it < max_iter:
                it += 1
                for i in range(n):
                    vn[i] = _clip(y[i] - inv_l * (py[i] + qv[i]), lo[i], hi[i])
                _matvec(&Pm[0, 0], &vn[0], &pvn[0], n)
                delta = _decrease(&v[0], &pv[0], &vn[0], &pvn[0], &qv[0], n)
                if delta > 0.0:
                    t = 1.0
                    for i in range(n):
                        vn[i] = _clip(v[i] - inv_l * (pv[i] + qv[i]), lo[i], hi[i])
                    _matvec(&Pm[0, 0], &vn[0], &pvn[0], n)
                    delta = _decrease(&v[0], &pv[0], &vn[0], &pvn[0], &qv[0], n)
                    if delta > 0.0:
                        break
                res = _residual(&vn[0], &pvn[0], &qv[0], &sc[0], &lo[0], &hi[0], n)
                tn = 0.5 * (1.0 + sqrt(1.0 + 4.0 * t * t))
                beta = (t - 1.0) / tn
                for i in range(n):
                    y[i] = vn[i] + beta * (vn[i] - v[i])
                    py[i] = pvn[i] + beta * (pvn[i] - pv[i])
                    v[i] = vn[i]
                    pv[i] = pvn[i]
                fv = fv + delta
                t = tn
                if record:
                    hist[nhist] = fv
                    nhist += 1
                if res <= tol:
                    status = 1
                    break
        if status == 0:
            status = _residual(&v[0], &pv[0], &qv[0], &sc[0], &lo[0], &hi[0], n) <= tol
        fv = _objective(&v[0], &pv[0], &qv[0], n)
    if record:
        history.extend(np.asarray(hist[:nhist]).tolist())
    return v_arr, it, fv, bool(status)
