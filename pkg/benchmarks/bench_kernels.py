"""Time the compiled and pure-Python kernel backends side by side.

    python3 benchmarks/bench_kernels.py [--repeat 200]

Prints one line per kernel with the median wall time of each backend and
the speed-up, then the same for one full closed-loop controller step.
"""
import argparse
import time

import numpy as np

from dkmpc import kernels
from dkmpc.plant import Nmpc, NmpcConfig, PlantParams, hover_state


def median_us(fn, repeat):
    fn()  # warm-up
    ts = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return 1e6 * float(np.median(ts))


def cases(rng):
    params = PlantParams().packed()
    s = hover_state((0.1, -0.2, 0.3), 0.2)
    s[9:] = (0.2, -0.1, 0.05)
    u = np.full(4, 500.0) + rng.uniform(-50, 50, 4)
    n = 44  # 4 inputs over 11 blocks, i.e. horizon 10
    M = rng.normal(size=(n, n))
    P = M @ M.T + np.eye(n)
    q = rng.normal(size=n) * 10
    lb, ub = -np.ones(n), np.ones(n)
    lip = float(np.linalg.eigvalsh(P).max())
    qp = (P, q, lb, ub, np.ones(n), np.zeros(n), lip, 1e-6, 2000)
    return [
        ("quad_deriv", lambda k: k.quad_deriv(s, u, params)),
        ("quad_jac", lambda k: k.quad_jac(s, u, params)),
        ("rk4_step", lambda k: k.rk4_step(s, u, 0.01, params)),
        ("rk4_step_jac", lambda k: k.rk4_step_jac(s, u, 0.01, params)),
        ("fgm_box_qp n=44", lambda k: k.fgm_box_qp(*qp)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    if "compiled" not in kernels.BACKENDS:
        print("compiled backend not built; only the python backend is available")
    names = [n for n in ("compiled", "python") if n in kernels.BACKENDS]
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}" + "".join(f"{n + ' us':>14}" for n in names) + f"{'speed-up':>10}")
    for label, fn in cases(rng):
        t = [median_us(lambda: fn(kernels.get_backend(n)), args.repeat) for n in names]
        ratio = t[-1] / t[0] if len(t) == 2 else 1.0
        print(f"{label:<18}" + "".join(f"{v:>14.2f}" for v in t) + f"{ratio:>10.1f}x")

    import dkmpc.plant as plant
    saved = plant.kernels
    t = []
    for n in names:
        plant.kernels = kernels.get_backend(n)
        params = PlantParams()
        cfg = NmpcConfig(horizon=10, Q=np.ones(12), R=1e-6 * np.ones(4), u_ref=params.u_hover)
        ref = np.tile(hover_state((0.5, 0.0, 0.2)), (11, 1))
        t.append(median_us(lambda: Nmpc(cfg, params=params).step(hover_state(), ref),
                           max(5, args.repeat // 20)))
    plant.kernels = saved
    ratio = t[-1] / t[0] if len(t) == 2 else 1.0
    print(f"{'nmpc step H=10':<18}" + "".join(f"{v:>14.2f}" for v in t) + f"{ratio:>10.1f}x")


if __name__ == "__main__":
    main()
