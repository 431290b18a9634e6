import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import jacobian_fd, rel_err
from dkmpc.errors import EulerSingularity, GenerationFailed, NonFinite
from dkmpc.plant import (EULER_LIMIT, ExcitationConfig, PlantParams, clamp_input, dynamics,
                         flat_reference, generate_flights, hover_state, step_rk4,
                         step_rk4_jac)


def test_hover_balance(params):
    assert 4 * params.kf * params.u_hover ** 2 == pytest.approx(params.mass * params.gravity)
    assert params.u_hover == pytest.approx(0.5 * params.u_max)
    d = dynamics(hover_state(), np.full(4, params.u_hover), params)
    assert np.max(np.abs(d[3:6])) <= 1e-12 and np.max(np.abs(d[9:])) <= 1e-12


def test_free_fall(params):
    d = dynamics(hover_state(), np.zeros(4), params)
    assert np.allclose(d[3:6], [0.0, 0.0, -params.gravity], atol=1e-15)


def test_diagonal_pair_gives_pure_yaw(params):
    u = np.full(4, params.u_hover)
    u[[0, 2]] += 20.0
    u[[1, 3]] = np.sqrt(params.u_hover ** 2 - (u[0] ** 2 - params.u_hover ** 2))
    d = dynamics(hover_state(), u, params)
    assert abs(d[9]) <= 1e-12 and abs(d[10]) <= 1e-12
    assert d[11] > 0
    mixed = params.mixer() @ (params.kf * u ** 2)
    assert mixed[1] == pytest.approx(0, abs=1e-12) and mixed[2] == pytest.approx(0, abs=1e-12)


def test_roll_and_pitch_torque_signs(params):
    u = np.full(4, params.u_hover)
    u[[0, 1]] += 10.0  # rotors at +y arm side
    assert dynamics(hover_state(), u, params)[9] > 0


def test_input_clamped_with_flag(params):
    c, flag = clamp_input([-5.0, 10.0, 2000.0, 3.0], params)
    assert flag and c[0] == 0.0 and c[2] == params.u_max
    assert not clamp_input([1.0] * 4, params)[1]


def test_hover_is_fixed_point(params):
    s = hover_state((0.3, -0.2, 1.0), yaw=0.4)
    nxt = step_rk4(s, np.full(4, params.u_hover), 0.01, params)
    assert np.max(np.abs(nxt - s)) <= 1e-9


def test_ballistic_arc(params):
    s = hover_state()
    s[3:6] = (0.5, -0.2, 3.0)
    t = 0.0
    for _ in range(100):
        s = step_rk4(s, np.zeros(4), 0.01, params)
        t += 0.01
    want = np.array([0.5 * t, -0.2 * t, 3.0 * t - 0.5 * params.gravity * t * t])
    assert np.max(np.abs(s[:3] - want)) <= 1e-6


def rk4_order(params, T=0.64, dts=(0.04, 0.02, 0.01, 0.005)):
    """Slope of log(error) vs log(dt) against a fine-step reference."""
    assert all(abs(T / dt - round(T / dt)) < 1e-9 for dt in dts), "dt must divide T"
    def run(dt):
        s = hover_state()
        s[9:] = (0.3, -0.2, 0.5)
        u = params.u_hover + np.array([15.0, -10.0, 5.0, -12.0])
        for _ in range(int(round(T / dt))):
            s = step_rk4(s, u, dt, params)
        return s
    ref = run(dts[-1] / 16)
    errs = [np.max(np.abs(run(dt) - ref)) for dt in dts]
    return np.polyfit(np.log(dts), np.log(errs), 1)[0]


def test_rk4_order(params):
    assert rk4_order(params) >= 3.8


def test_rk4_guards(params):
    s = hover_state()
    s[7] = EULER_LIMIT + 1e-6
    with pytest.raises(EulerSingularity):
        step_rk4(s, np.full(4, 500.0), 0.01, params)
    with pytest.raises(EulerSingularity):
        dynamics(s, np.zeros(4), params)
    s[7] = 0.0
    s[0] = np.nan
    with pytest.raises(NonFinite):
        step_rk4(s, np.zeros(4), 0.01, params)
    with pytest.raises(ValueError):
        step_rk4(hover_state(), np.zeros(4), 0.0, params)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_jacobians_match_finite_differences(seed):
    params = PlantParams()
    rng = np.random.default_rng(seed)
    s = np.concatenate([rng.normal(size=3), rng.normal(size=3), rng.uniform(-0.6, 0.6, 3),
                        rng.normal(size=3)])
    u = params.u_hover + rng.uniform(-100, 100, 4)
    nxt, dx, du = step_rk4_jac(s, u, 0.01, params)
    assert np.allclose(nxt, step_rk4(s, u, 0.01, params), rtol=0, atol=1e-14)
    fx = jacobian_fd(lambda v: step_rk4(v, u, 0.01, params), s, 1e-6)
    fu = jacobian_fd(lambda v: step_rk4(s, v, 0.01, params), u, 1e-4)
    assert rel_err(dx, fx) <= 1e-5
    assert rel_err(du, fu) <= 1e-5


def test_params_validation(tmp_path):
    with pytest.raises(ValueError):
        PlantParams(mass=-1.0)
    with pytest.raises(ValueError):
        PlantParams(u_min=2000.0)
    p = PlantParams(jx=0.02)
    p.save(tmp_path / "plant.cfg")
    assert PlantParams.from_file(tmp_path / "plant.cfg") == p


def test_flat_reference_hover_and_consistency(params):
    s = flat_reference(lambda t: (np.array([1.0, 2.0, 3.0]), 0.2), 1.0)
    assert np.allclose(s, hover_state((1, 2, 3), 0.2), atol=1e-6)
    # pitch tilts the thrust along the demanded acceleration
    curve = lambda t: (np.array([np.sin(t), 0.0, 0.0]), 0.0)  # noqa: E731
    s = flat_reference(curve, 1.0)
    acc_x = -np.sin(1.0)
    assert math.tan(s[7]) == pytest.approx(acc_x / params.gravity, rel=1e-5)
    assert s[3] == pytest.approx(np.cos(1.0), rel=1e-6)


# data generation ------------------------------------------------------------
def test_generation_deterministic(params):
    cfg = ExcitationConfig(n_records=2, duration=2.0)
    a = generate_flights(params, cfg, seed=7)
    b = generate_flights(params, cfg, seed=7)
    assert all(x.states.tobytes() == y.states.tobytes() and
               x.inputs.tobytes() == y.inputs.tobytes() for x, y in zip(a, b))
    c = generate_flights(params, cfg, seed=8)
    assert a[0].states.tobytes() != c[0].states.tobytes()


def test_generation_limits_and_envelope(small_flights, params):
    cfg = ExcitationConfig()
    for r in small_flights:
        assert r.dt == 0.01 and len(r) == 301
        assert np.all(r.inputs >= params.u_min) and np.all(r.inputs <= params.u_max)
        assert np.all(np.abs(r.inputs - params.u_hover) <= cfg.envelope + 1e-9)
        assert np.all(np.abs(r.states[:, 7]) < EULER_LIMIT)


def test_generation_covers_box(params):
    cfg = ExcitationConfig(n_records=12, duration=10.0)
    recs = generate_flights(params, cfg, seed=0)
    pos = np.concatenate([r.states[:, :3] for r in recs])
    span = pos.max(axis=0) - pos.min(axis=0)
    assert np.all(span[:2] >= cfg.box_xy) and span[2] >= cfg.box_z


def test_generation_failure_is_bounded(params, monkeypatch):
    import dkmpc.plant as plant
    calls = []

    def tripped(*args):
        calls.append(1)
        return None  # every attempt hits the Euler guard
    monkeypatch.setattr(plant, "_fly", tripped)
    with pytest.raises(GenerationFailed):
        generate_flights(params, ExcitationConfig(n_records=3, max_attempts=4), 0)
    assert len(calls) == 4
