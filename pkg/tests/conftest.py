import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from dkmpc.dataset import FlightRecord, fit_normalizer  # noqa: E402
from dkmpc.koopman import KoopmanModel  # noqa: E402
from dkmpc.plant import ExcitationConfig, PlantParams, generate_flights  # noqa: E402

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def params():
    return PlantParams()


@pytest.fixture(scope="session")
def small_flights(params):
    cfg = ExcitationConfig(n_records=6, duration=3.0)
    return generate_flights(params, cfg, seed=3)


@pytest.fixture(scope="session")
def small_normalizer(small_flights):
    return fit_normalizer(small_flights)


@pytest.fixture
def tiny_model(small_normalizer):
    return KoopmanModel.initialize(small_normalizer, latent_dim=4, hidden=(8,), seed=1)


def make_record(T=5, n_x=3, n_u=2, seed=0, dt=0.01):
    rng = np.random.default_rng(seed)
    return FlightRecord(dt, rng.normal(size=(T, n_x)), rng.normal(size=(T, n_u)),
                        tuple(f"s{i}" for i in range(n_x)), tuple(f"u{i}" for i in range(n_u)))


def toy_problem(seed, n_x=3, n_u=2, latent=2, hidden=(4,), triples=2, unstable=True):
    """Tiny model plus a normalized batch for gradient checks.

    With ``unstable`` the A matrix is scaled to spectral radius 1.2 so the
    stability penalty and its gradient are active.
    """
    from dkmpc.dataset import MinMaxScaler, Normalizer
    from dkmpc.koopman import as_tripleset
    rng = np.random.default_rng(seed)
    norm = Normalizer(MinMaxScaler(-np.ones(n_x), np.ones(n_x)),
                      MinMaxScaler(-np.ones(n_u), np.ones(n_u)))
    model = KoopmanModel.initialize(norm, latent, hidden, seed=seed,
                                    state_names=[f"s{i}" for i in range(n_x)],
                                    input_names=[f"u{i}" for i in range(n_u)])
    for p in model.parameters():
        p.values[...] = rng.normal(scale=0.7, size=p.shape)
    if unstable:
        A = model.A.weight.values
        A *= 1.2 / max(abs(np.linalg.eigvals(A)))
    batch = as_tripleset(rng.uniform(-1, 1, (triples, n_x)), rng.uniform(-1, 1, (triples, n_u)),
                         rng.uniform(-1, 1, (triples, n_x)))
    return model, batch


def loss_gradient_error(model, batch, weights=(1.0, 50.0, 1.0, 1e-4), h=1e-6):
    """Max relative error of the analytic loss gradient against central differences."""
    from dkmpc.koopman import compute_loss
    from oracles import central_diff
    model.zero_grad()
    compute_loss(model, batch, weights, grad=True)
    analytic = np.concatenate([p.grad.ravel() for p in model.parameters()])
    numeric = []
    for p in model.parameters():
        def f(v, p=p):
            old = p.values.copy()
            p.values[...] = v
            out = compute_loss(model, batch, weights).total
            p.values[...] = old
            return out
        numeric.append(central_diff(f, p.values, h).ravel())
    numeric = np.concatenate(numeric)
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-8))


@pytest.fixture(scope="session")
def settings():
    from dkmpc.cli import load_settings
    return load_settings()


@pytest.fixture(scope="session")
def trained(settings):
    """The default configuration's data and trained checkpoint (about a minute)."""
    from types import SimpleNamespace
    from dkmpc import cli
    from dkmpc.dataset import segment, split_records
    from dkmpc.koopman import train
    recs = generate_flights(cli.plant_params(settings), cli.excitation_config(settings),
                            int(settings["seed"]))
    splits = tuple(cli._floats(settings["splits"], 3))
    tr, va, te = split_records(recs, splits)
    norm = fit_normalizer(tr)
    train_set, val_set, _ = segment(recs, norm, splits)
    model = KoopmanModel.initialize(norm, int(settings["latent_dim"]),
                                    tuple(int(h) for h in cli._floats(settings["hidden"])),
                                    int(settings["seed"]))
    res = train(model, train_set, val_set, cli.train_config(settings))
    return SimpleNamespace(model=res.best, result=res, records=recs, test=te,
                           mpc=cli.mpc_config(settings), nmpc=cli.nmpc_overrides(settings))
