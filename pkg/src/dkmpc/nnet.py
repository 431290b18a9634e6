"""A small dense-network engine with hand-written reverse mode.

Activations flow through the networks as plain ``(batch, features)`` numpy
arrays; trainable parameters are :class:`Tensor` objects that carry their
own gradient accumulator.  Layers compute ``y = x @ W.T + b`` so that a
bias-free identity layer with weight ``W`` is exactly the matrix map
``z -> W z`` on column vectors.
"""
import os

import numpy as np
import scipy.linalg

from .errors import ConvergenceFailure, DimensionMismatch, NoForwardPass, NonFinite

DEBUG = os.environ.get("DKMPC_DEBUG", "") not in ("", "0")
ACTIVATIONS = ("tanh", "relu", "identity")


def _finite(arr, what):
    if DEBUG and not np.all(np.isfinite(arr)):
        raise NonFinite(f"non-finite values after {what}")
    return arr


class Tensor:
    """Dense row-major parameter array with a same-shape gradient slot."""

    __slots__ = ("values", "grad")

    def __init__(self, values, grad=None):
        self.values = np.array(values, dtype=float, ndmin=1)
        if grad is not None and np.shape(grad) != self.values.shape:
            raise DimensionMismatch("gradient shape differs from value shape")
        self.grad = grad

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def zero_grad(self):
        self.grad = np.zeros_like(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Dense:
    def __init__(self, weight, bias=None, activation="identity"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.weight = weight if isinstance(weight, Tensor) else Tensor(np.atleast_2d(weight))
        if self.weight.values.ndim != 2:
            raise DimensionMismatch("weight must be a matrix")
        if bias is not None and not isinstance(bias, Tensor):
            bias = Tensor(bias)
        if bias is not None and bias.shape != (self.out_dim,):
            raise DimensionMismatch("bias length must equal the output dimension")
        self.bias = bias
        self.activation = activation
        self._cache = None

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]

    def parameters(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def __call__(self, x):
        y = x @ self.weight.values.T
        if self.bias is not None:
            y += self.bias.values
        if self.activation == "tanh":
            y = np.tanh(y)
        elif self.activation == "relu":
            y = np.maximum(y, 0.0)
        return _finite(y, "dense layer")

    def forward(self, x):
        y = self(x)
        self._cache = (x, y)
        return y

    def backward(self, dy):
        if self._cache is None:
            raise NoForwardPass("backward called before forward")
        x, y = self._cache
        if self.activation == "tanh":
            dy = dy * (1.0 - y * y)
        elif self.activation == "relu":
            dy = dy * (y > 0.0)
        w = self.weight
        if w.grad is None:
            w.zero_grad()
        w.grad += dy.T @ x
        if self.bias is not None:
            if self.bias.grad is None:
                self.bias.zero_grad()
            self.bias.grad += dy.sum(axis=0)
        return _finite(dy @ w.values, "dense backward")


class Mlp:
    """Chain of :class:`Dense` layers."""

    def __init__(self, layers):
        self.layers = list(layers)
        if not self.layers:
            raise ValueError("an MLP needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise DimensionMismatch(
                    f"layer output {a.out_dim} does not feed layer input {b.in_dim}")

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def weights(self):
        return [layer.weight for layer in self.layers]

    def _check(self, x):
        x = x.values if isinstance(x, Tensor) else np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.in_dim:
            raise DimensionMismatch(f"expected {self.in_dim} input columns, got {x.shape[1]}")
        return x

    def __call__(self, x):
        """Inference only: no intermediates are stored, safe to share."""
        x = self._check(x)
        for layer in self.layers:
            x = layer(x)
        return x

    def forward(self, x):
        x = self._check(x)
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, upstream):
        """Accumulate parameter gradients; return the gradient w.r.t. the input."""
        g = np.asarray(upstream, dtype=float)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def to_dict(self):
        return {"layers": [{
            "shape": list(layer.weight.shape),
            "activation": layer.activation,
            "bias": layer.bias is not None,
            "weight": [float(v) for v in layer.weight.values.ravel()],
            "bias_values": ([float(v) for v in layer.bias.values]
                            if layer.bias is not None else None),
        } for layer in self.layers]}

    @classmethod
    def from_dict(cls, d):
        layers = []
        for spec in d["layers"]:
            w = np.array(spec["weight"], dtype=float).reshape(spec["shape"])
            b = np.array(spec["bias_values"], dtype=float) if spec["bias"] else None
            layers.append(Dense(w, b, spec["activation"]))
        return cls(layers)


def glorot(rng, fan_out, fan_in):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def build_mlp(sizes, rng, hidden="tanh", output="identity", bias=True):
    """``sizes = (in, h1, ..., out)`` with Glorot-uniform weights and zero biases."""
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        act = output if i == len(sizes) - 2 else hidden
        layers.append(Dense(glorot(rng, b, a), np.zeros(b) if bias else None, act))
    return Mlp(layers)


class AdamState:
    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step = 0
        self.m = [np.zeros_like(p.values) for p in params]
        self.v = [np.zeros_like(p.values) for p in params]

    def to_dict(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "step": self.step}


def adam_step(params, grads, state):
    """Bias-corrected Adam update of ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionMismatch("params, grads and optimizer state differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.values.shape:
            raise DimensionMismatch(f"gradient shape {g.shape} != parameter {p.values.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.values -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def spectral_radius(A):
    """Spectral radius of ``A`` and its gradient with respect to ``A``.

    The gradient comes from first-order perturbation of the dominant
    eigenvalue, d(lambda) = w^H dA v / (w^H v) with left/right eigenvectors
    ``w`` and ``v``.  When ``|w^H v| < 1e-10`` the eigenvalue is (nearly)
    defective and the gradient of the largest singular value is returned
    instead, which bounds the spectral radius from above.
    """
    A = np.asarray(A.values if isinstance(A, Tensor) else A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch("spectral radius needs a square matrix")
    if not np.all(np.isfinite(A)):
        raise ConvergenceFailure("matrix has non-finite entries")
    try:
        lam, vl, vr = scipy.linalg.eig(A, left=True, right=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise ConvergenceFailure(str(exc)) from exc
    mods = np.abs(lam)
    i = int(np.argmax(mods))
    rho = float(mods[i])
    if not np.isfinite(rho):
        raise ConvergenceFailure("eigensolver returned non-finite eigenvalues")
    if rho == 0.0:
        return rho, np.zeros_like(A)
    v = vr[:, i] / np.linalg.norm(vr[:, i])
    w = vl[:, i] / np.linalg.norm(vl[:, i])
    denom = np.vdot(w, v)
    if abs(denom) < 1e-10:
        u, _, vh = np.linalg.svd(A)
        return rho, np.outer(u[:, 0], vh[0])
    dlam = np.outer(w.conj(), v) / denom
    grad = np.real(np.conj(lam[i]) / rho * dlam)
    return rho, grad
