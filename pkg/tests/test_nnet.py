import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from oracles import central_diff, rel_err
from dkmpc.errors import ConvergenceFailure, DimensionMismatch, NoForwardPass
from dkmpc.nnet import (AdamState, Dense, Mlp, Tensor, adam_step, build_mlp,
                        spectral_radius)


# forward -------------------------------------------------------------------
def test_identity_layer():
    net = Mlp([Dense(np.eye(2))])
    assert np.array_equal(net([1.0, 2.0]), [[1.0, 2.0]])


def test_zero_tanh_layer():
    net = Mlp([Dense(np.zeros((3, 2)), np.zeros(3), "tanh")])
    assert np.array_equal(net([[5.0, -7.0]]), np.zeros((1, 3)))


def test_affine_layer():
    net = Mlp([Dense([[2.0]], [1.0])])
    assert net([3.0])[0, 0] == 7.0


def test_dimension_checks():
    with pytest.raises(DimensionMismatch):
        Mlp([Dense(np.ones((3, 2))), Dense(np.ones((1, 4)))])
    net = Mlp([Dense(np.ones((3, 2)))])
    with pytest.raises(DimensionMismatch):
        net(np.ones((1, 5)))
    with pytest.raises(DimensionMismatch):
        Dense(np.ones((3, 2)), np.ones(2))
    with pytest.raises(DimensionMismatch):
        Tensor(np.ones(3), grad=np.ones(2))


# backward ------------------------------------------------------------------
def test_linear_grad_example():
    layer = Dense([[1.0]])
    net = Mlp([layer])
    net.forward([[2.0]])
    net.backward(np.ones((1, 1)))
    assert layer.weight.grad[0, 0] == 2.0


def test_backward_before_forward():
    with pytest.raises(NoForwardPass):
        Mlp([Dense(np.eye(2))]).backward(np.ones((1, 2)))


def test_zero_upstream_gives_zero_grads():
    net = build_mlp((3, 4, 2), np.random.default_rng(0))
    net.zero_grad()
    net.forward(np.ones((2, 3)))
    net.backward(np.zeros((2, 2)))
    assert all(np.all(p.grad == 0) for p in net.parameters())


def _loss(net, x, c):
    return float(np.sum(c * net(x)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["tanh", "relu", "identity"]))
def test_mlp_grad_matches_finite_differences(seed, act):
    rng = np.random.default_rng(seed)
    net = build_mlp((3, 5, 2), rng, hidden=act, output=act)
    x = rng.normal(size=(4, 3))
    c = rng.normal(size=(4, 2))
    if act == "relu":
        # central differences are meaningless next to a kink
        h = x
        for layer in net.layers:
            pre = h @ layer.weight.values.T + layer.bias.values
            assume(np.min(np.abs(pre)) > 1e-4)
            h = layer(h)
    net.zero_grad()
    net.forward(x)
    dx = net.backward(c)
    for p in net.parameters():
        def f(v, p=p):
            old = p.values.copy()
            p.values[...] = v
            out = _loss(net, x, c)
            p.values[...] = old
            return out
        fd = central_diff(f, p.values)
        assert rel_err(p.grad, fd) <= 1e-5
    fdx = central_diff(lambda v: _loss(net, v, c), x)
    assert rel_err(dx, fdx) <= 1e-5


def test_bias_free_layers_are_matrix_maps():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(3, 3))
    layer = Dense(W)
    z = rng.normal(size=3)
    assert layer.bias is None and sum(p.size for p in layer.parameters()) == 9
    assert np.array_equal(layer(z[None])[0], z @ W.T)
    assert np.allclose(layer(z[None])[0], W @ z, rtol=0, atol=1e-15)


# Adam ----------------------------------------------------------------------
def test_adam_zero_grad_keeps_params():
    p = Tensor([1.0, -2.0])
    st_ = AdamState([p])
    adam_step([p], [np.zeros(2)], st_)
    assert np.array_equal(p.values, [1.0, -2.0])


def test_adam_first_step_size():
    # step 1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
    p = Tensor([0.0, 0.0])
    g = np.array([3.0, -0.01])
    st_ = AdamState([p], lr=1e-4)
    adam_step([p], [g], st_)
    want = -1e-4 * g / (np.abs(g) + 1e-8)
    assert np.allclose(p.values, want, rtol=1e-12, atol=0)


def test_adam_second_identical_step_shrinks():
    # step 2 by hand for a constant gradient of 1
    p = Tensor([0.0])
    st_ = AdamState([p], lr=0.1)
    adam_step([p], [np.array([1.0])], st_)
    d1 = -p.values[0]
    adam_step([p], [np.array([1.0])], st_)
    d2 = -p.values[0] - d1
    assert 0 < d2 <= d1
    m2 = 0.1 * 1.0 + 0.9 * 0.1 * 1.0
    v2 = 0.999 * 0.001 + 0.001
    want = 0.1 * (m2 / (1 - 0.81)) / (np.sqrt(v2 / (1 - 0.999 ** 2)) + 1e-8)
    assert d2 == pytest.approx(want, rel=1e-12)


def test_adam_shape_check():
    p = Tensor([0.0, 0.0])
    with pytest.raises(DimensionMismatch):
        adam_step([p], [np.zeros(3)], AdamState([p]))


# spectral radius -----------------------------------------------------------
def test_rho_diagonal():
    rho, g = spectral_radius(np.diag([0.5, -0.3]))
    assert rho == 0.5
    assert np.allclose(g, [[1.0, 0.0], [0.0, 0.0]], atol=1e-14)


def test_rho_scaled_identity():
    assert spectral_radius(1.5 * np.eye(2))[0] == pytest.approx(1.5)


def test_rho_nonfinite():
    with pytest.raises(ConvergenceFailure):
        spectral_radius(np.array([[np.nan, 0.0], [0.0, 1.0]]))


def test_rho_defective_falls_back_to_singular_vectors():
    A = np.array([[1.0, 1.0], [0.0, 1.0]])  # Jordan block
    rho, g = spectral_radius(A)
    u, s, vh = np.linalg.svd(A)
    assert rho == pytest.approx(1.0)
    assert np.allclose(g, np.outer(u[:, 0], vh[0]))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_rho_grad_matches_finite_differences(seed):
    A = np.random.default_rng(seed).normal(size=(4, 4))
    lam = np.sort(np.abs(np.linalg.eigvals(A)))[::-1]
    # away from ties between distinct dominant eigenvalues (a complex pair shares |lambda|)
    ev = np.linalg.eigvals(A)
    top = ev[np.argmax(np.abs(ev))]
    others = [e for e in ev if abs(e - top) > 1e-9 and abs(e - np.conj(top)) > 1e-9]
    assume(not others or lam[0] - max(abs(e) for e in others) > 1e-3)
    rho, g = spectral_radius(A)
    assert rho == pytest.approx(lam[0], rel=1e-12)
    fd = central_diff(lambda M: max(abs(np.linalg.eigvals(M))), A)
    assert rel_err(g, fd) <= 1e-4
