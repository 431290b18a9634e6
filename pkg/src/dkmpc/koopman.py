"""Deep Koopman autoencoder: encoder, decoder and linear latent dynamics.

The encoder lifts a normalized state into ``n`` latent coordinates in which
the flight dynamics are modelled as ``z' = A z + B u`` (``u`` normalized,
no input lifting).  All four networks are trained jointly on one-step
transitions with the loss::

    total = l1 * recon + l2 * linear + l3 * stability + l4 * sum ||W||^2

where ``stability = max(0, rho(A) - 1)**2``.
"""
import copy
import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import INPUT_NAMES, STATE_NAMES, Normalizer, TripleSet
from .errors import DimensionMismatch, DivergenceDetected, EmptyBatch, EmptyDataset
from .nnet import AdamState, Dense, Mlp, adam_step, build_mlp, spectral_radius

TABLE1_WEIGHTS = (1.0, 50.0, 1.0, 1e-4)
CHECKPOINT_FORMAT = "dkmpc-koopman/1"


class KoopmanModel:
    def __init__(self, encoder, decoder, A, B, normalizer,
                 state_names=STATE_NAMES, input_names=INPUT_NAMES):
        self.encoder = encoder
        self.decoder = decoder
        self.A = A
        self.B = B
        self.normalizer = normalizer
        self.state_names = tuple(state_names)
        self.input_names = tuple(input_names)
        self.meta = {}
        n = encoder.out_dim
        if decoder.in_dim != n or decoder.out_dim != encoder.in_dim:
            raise DimensionMismatch("decoder must map the latent space back to the state")
        if A.weight.shape != (n, n) or A.bias is not None:
            raise DimensionMismatch("A must be a bias-free n x n layer")
        if B.weight.shape[0] != n or B.bias is not None:
            raise DimensionMismatch("B must be a bias-free n x m layer")
        if A.activation != "identity" or B.activation != "identity":
            raise ValueError("A and B are linear maps")
        if len(normalizer.state) != self.n_x or len(normalizer.input) != self.n_u:
            raise DimensionMismatch("normalizer does not match model dimensions")

    @classmethod
    def initialize(cls, normalizer, latent_dim=8, hidden=(64, 64), seed=0,
                   state_names=STATE_NAMES, input_names=INPUT_NAMES):
        """Glorot encoder/decoder, ``A`` close to ``0.99 I``, small ``B``."""
        rng = np.random.default_rng(seed)
        n_x, n_u = len(normalizer.state), len(normalizer.input)
        enc = build_mlp((n_x, *hidden, latent_dim), rng)
        dec = build_mlp((latent_dim, *hidden[::-1], n_x), rng)
        a = 0.99 * np.eye(latent_dim) + rng.uniform(-0.01, 0.01, (latent_dim, latent_dim))
        b = rng.uniform(-0.01, 0.01, (latent_dim, n_u))
        return cls(enc, dec, Dense(a), Dense(b), normalizer, state_names, input_names)

    @property
    def n_x(self):
        return self.encoder.in_dim

    @property
    def n_u(self):
        return self.B.weight.shape[1]

    @property
    def latent_dim(self):
        return self.encoder.out_dim

    @property
    def A_matrix(self):
        return self.A.weight.values

    @property
    def B_matrix(self):
        return self.B.weight.values

    def parameters(self):
        return (self.encoder.parameters() + self.decoder.parameters()
                + self.A.parameters() + self.B.parameters())

    def weights(self):
        return self.encoder.weights() + self.decoder.weights() + [self.A.weight, self.B.weight]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # inference ------------------------------------------------------------
    def encode(self, x, normalized=False):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if x.shape[-1] != self.n_x:
            raise DimensionMismatch(f"state must have {self.n_x} entries")
        xn = x if normalized else self.normalizer.state.apply(x)
        z = self.encoder(xn)
        return z[0] if single else z

    def decode(self, z, normalized=False):
        z = np.asarray(z, dtype=float)
        single = z.ndim == 1
        if z.shape[-1] != self.latent_dim:
            raise DimensionMismatch(f"latent vector must have {self.latent_dim} entries")
        x = self.decoder(z)
        if not normalized:
            x = self.normalizer.state.invert(x)
        return x[0] if single else x

    def latent_step(self, z, u):
        """``A z + B u`` with ``u`` already normalized."""
        z = np.asarray(z, dtype=float)
        u = np.asarray(u, dtype=float)
        if z.shape[-1] != self.latent_dim or u.shape[-1] != self.n_u:
            raise DimensionMismatch("latent or input vector has the wrong length")
        return z @ self.A_matrix.T + u @ self.B_matrix.T

    def predict_rollout(self, x0, inputs):
        """Open-loop latent rollout decoded at every step.

        ``x0`` may be one state or a batch ``(W, n_x)``; ``inputs`` is then
        ``(T, n_u)`` or ``(W, T, n_u)`` raw commands.  Returns ``T`` raw
        states per rollout, the first being ``decode(encode(x0))``.
        """
        x0 = np.asarray(x0, dtype=float)
        inputs = np.asarray(inputs, dtype=float)
        single = x0.ndim == 1
        if single:
            x0, inputs = x0[None], inputs[None]
        if inputs.ndim != 3 or inputs.shape[0] != x0.shape[0] or inputs.shape[2] != self.n_u:
            raise DimensionMismatch("inputs must be (T, n_u) per rollout")
        steps = inputs.shape[1]
        un = self.normalizer.input.apply(inputs)
        z = self.encode(x0)
        zs = np.empty((x0.shape[0], steps, self.latent_dim))
        for k in range(steps):
            zs[:, k] = z
            z = self.latent_step(z, un[:, k])
        out = self.decode(zs.reshape(-1, self.latent_dim)).reshape(x0.shape[0], steps, self.n_x)
        return out[0] if single else out

    # persistence ----------------------------------------------------------
    def to_dict(self):
        return {
            "format": CHECKPOINT_FORMAT,
            "n_x": self.n_x, "n_u": self.n_u, "latent_dim": self.latent_dim,
            "state_names": list(self.state_names),
            "input_names": list(self.input_names),
            "encoder": self.encoder.to_dict(),
            "decoder": self.decoder.to_dict(),
            "A": Mlp([self.A]).to_dict(),
            "B": Mlp([self.B]).to_dict(),
            "normalizer": self.normalizer.to_dict(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a {CHECKPOINT_FORMAT} checkpoint")
        model = cls(Mlp.from_dict(d["encoder"]), Mlp.from_dict(d["decoder"]),
                    Mlp.from_dict(d["A"]).layers[0], Mlp.from_dict(d["B"]).layers[0],
                    Normalizer.from_dict(d["normalizer"]),
                    d.get("state_names", STATE_NAMES), d.get("input_names", INPUT_NAMES))
        model.meta = d.get("meta", {})
        return model

    def save(self, path):
        # json writes floats with repr(), the shortest exact round-trip form
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def copy(self):
        return copy.deepcopy(self)


@dataclass
class LossBreakdown:
    recon: float
    linear: float
    stability: float
    l2_reg: float
    weights: tuple = TABLE1_WEIGHTS
    total: float = field(init=False)

    def __post_init__(self):
        w1, w2, w3, w4 = self.weights
        self.total = w1 * self.recon + w2 * self.linear + w3 * self.stability + w4 * self.l2_reg

    def as_dict(self):
        return {"recon": self.recon, "linear": self.linear, "stability": self.stability,
                "l2": self.l2_reg, "total": self.total}


def compute_loss(model, batch, weights=TABLE1_WEIGHTS, grad=False):
    """Loss terms on a normalized batch; with ``grad`` also backpropagate.

    Reconstruction and linear-dynamics errors are squared L2 norms averaged
    over the batch.  Gradients accumulate into the parameters' grad slots.
    """
    n = len(batch)
    if n == 0:
        raise EmptyBatch("loss needs at least one triple")
    if batch.x.shape[1] != model.n_x or batch.u.shape[1] != model.n_u:
        raise DimensionMismatch("batch does not match the model dimensions")
    w1, w2, w3, w4 = weights
    enc, dec = model.encoder, model.decoder
    both = np.concatenate([batch.x, batch.x_next])
    if grad:
        zall = enc.forward(both)
        z, z_next = zall[:n], zall[n:]
        xhat = dec.forward(z)
        zpred = model.A.forward(z) + model.B.forward(batch.u)
    else:
        zall = enc(both)
        z, z_next = zall[:n], zall[n:]
        xhat = dec(z)
        zpred = model.A(z) + model.B(batch.u)
    r_rec = xhat - batch.x
    r_lin = z_next - zpred
    recon = float(np.sum(r_rec * r_rec)) / n
    linear = float(np.sum(r_lin * r_lin)) / n
    rho, drho = spectral_radius(model.A_matrix)
    excess = max(0.0, rho - 1.0)
    l2 = float(sum(np.sum(w.values * w.values) for w in model.weights()))
    out = LossBreakdown(recon, linear, excess * excess, l2, tuple(weights))
    if not grad or not math.isfinite(out.total):
        return out  # no backward pass through a non-finite loss
    dz = dec.backward((2.0 * w1 / n) * r_rec)
    d_lin = (2.0 * w2 / n) * r_lin
    dz += model.A.backward(-d_lin)
    model.B.backward(-d_lin)
    enc.backward(np.concatenate([dz, d_lin]))
    if excess > 0.0:
        model.A.weight.grad += (2.0 * w3 * excess) * drho
    for w in model.weights():
        w.grad += (2.0 * w4) * w.values
    return out


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-4
    weights: tuple = TABLE1_WEIGHTS
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class EpochLog:
    epoch: int
    train: LossBreakdown
    val: LossBreakdown = None


@dataclass
class TrainResult:
    model: KoopmanModel
    best: KoopmanModel
    log: list
    best_epoch: int = 0


def _mean_breakdown(sums, count, weights):
    return LossBreakdown(*(s / count for s in sums), weights=tuple(weights))


def train(model, train_set, val_set, config=None, callback=None):
    """Joint Adam training of encoder, decoder, A and B.

    Each epoch visits the training triples in a fresh seeded permutation.
    The logged training breakdown is the size-weighted mean over the
    epoch's mini-batches; validation is evaluated once per epoch on the
    whole split.  ``best`` is the checkpoint with the lowest validation
    total (training total when there is no validation data).
    """
    config = config or TrainConfig()
    if len(train_set) == 0:
        raise EmptyDataset("training split is empty")
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    adam = AdamState(params, config.lr, config.beta1, config.beta2, config.eps)
    weights = tuple(config.weights)
    log = []
    best, best_score, best_epoch = model.copy(), math.inf, 0
    n = len(train_set)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(4)
        for start in range(0, n, config.batch_size):
            batch = train_set.take(order[start:start + config.batch_size])
            model.zero_grad()
            lb = compute_loss(model, batch, weights, grad=True)
            if not math.isfinite(lb.total):
                raise DivergenceDetected(f"loss became {lb.total} in epoch {epoch}")
            sums += len(batch) * np.array([lb.recon, lb.linear, lb.stability, lb.l2_reg])
            adam_step(params, [p.grad for p in params], adam)
        entry = EpochLog(epoch, _mean_breakdown(sums, n, weights))
        if val_set is not None and len(val_set):
            entry.val = compute_loss(model, val_set, weights)
        score = entry.val.total if entry.val is not None else entry.train.total
        if not math.isfinite(score):
            raise DivergenceDetected(f"validation loss became {score} in epoch {epoch}")
        if score < best_score:
            best, best_score, best_epoch = model.copy(), score, epoch
        log.append(entry)
        if callback is not None:
            callback(entry)
    meta = {"seed": config.seed, "epochs": config.epochs, "lr": config.lr,
            "batch_size": config.batch_size, "weights": list(weights),
            "final": log[-1].train.as_dict() if log else None}
    model.meta = dict(meta, epoch=config.epochs)
    best.meta = dict(meta, epoch=best_epoch)
    return TrainResult(model, best, log, best_epoch)


LOSS_LOG_HEADER = ["epoch", "recon", "linear", "stability", "l2", "total", "val_total"]


def write_loss_log(log, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_LOG_HEADER)
        for e in log:
            t = e.train
            val = e.val.total if e.val is not None else float("nan")
            w.writerow([e.epoch] + ["%.17g" % v for v in
                                    (t.recon, t.linear, t.stability, t.l2_reg, t.total, val)])


def read_loss_log(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]


def triples_from_records(records, normalizer, tag="test"):
    """Normalized triples of every record (no splitting)."""
    from .dataset import _triples
    return _triples(list(records), normalizer, tag)


def as_tripleset(x, u, x_next, split="train"):
    return TripleSet(np.asarray(x, float), np.asarray(u, float), np.asarray(x_next, float), split)
