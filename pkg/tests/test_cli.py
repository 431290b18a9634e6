import json
import os
import time

import numpy as np
import pytest

from dkmpc import bench
from dkmpc.cli import load_settings, main
from dkmpc.config import read_kv
from dkmpc.dataset import fit_normalizer
from dkmpc.koopman import KoopmanModel

TINY = ["--set", "hidden=16", "--set", "duration=3.0"]


def run(argv, capsys=None):
    code = main([str(a) for a in argv])
    out = capsys.readouterr() if capsys else None
    return code, out


def test_usage_errors(capsys, tmp_path):
    code, out = run(["fly"], capsys)
    assert code == 1 and "usage:" in out.err
    code, out = run([], capsys)
    assert code == 1 and "usage:" in out.err
    code, out = run(["train"], capsys)  # --data is required
    assert code == 1 and "--data" in out.err
    code, _ = run(["generate-data", "--set", "records"], capsys)
    assert code == 1
    code, _ = run(["track", "--model", "m.json", "--controller", "pid"], capsys)
    assert code == 1


def test_runtime_failure_exit_code(capsys, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    code, out = run(["train", "--data", empty, "--run-dir", tmp_path / "r"], capsys)
    assert code == 2 and "no CSV" in out.err
    manifest = json.loads((tmp_path / "r" / "manifest.json").read_text())
    assert manifest["status"] == "failed" and "error" in manifest


def test_settings_precedence(tmp_path):
    cfg = tmp_path / "my.cfg"
    cfg.write_text("epochs = 7\nlr = 0.5\n")
    s = load_settings(str(cfg), ["lr=0.25"], seed=9)
    assert s["epochs"] == 7 and s["lr"] == 0.25 and s["seed"] == 9
    assert s["batch_size"] == 32  # untouched defaults survive


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("gen")
    assert main(["generate-data", "--records", "4", "--run-dir", str(d)] + TINY) == 0
    return d


def test_generate_data_outputs(tiny_data):
    files = sorted(os.listdir(tiny_data / "data"))
    assert files == [f"flight_{i:03d}.csv" for i in range(4)]
    m = json.loads((tiny_data / "manifest.json").read_text())
    assert m["command"] == "generate-data" and m["seed"] == 0 and m["status"] == "ok"
    assert m["config"]["n_records"] == 4
    assert set(m["versions"]) >= {"dkmpc", "python", "numpy", "kernel_backend"}
    assert "generate" in m["timings_s"]
    assert read_kv(tiny_data / "plant.cfg")["mass"] == 1.6


def test_train_zero_epochs_is_initialization(tiny_data, tmp_path):
    out = tmp_path / "t"
    assert main(["train", "--data", str(tiny_data / "data"), "--epochs", "0",
                 "--latent-dim", "4", "--seed", "3", "--run-dir", str(out)] + TINY) == 0
    saved = KoopmanModel.load(out / "model.json")
    from dkmpc.cli import load_records
    from dkmpc.dataset import split_records
    tr, _, _ = split_records(load_records(tiny_data / "data"))
    init = KoopmanModel.initialize(fit_normalizer(tr), 4, (16,), seed=3)
    for key in ("encoder", "decoder", "A", "B"):
        assert saved.to_dict()[key] == init.to_dict()[key]
    assert (out / "loss_log.csv").read_text().strip() == "epoch,recon,linear,stability,l2,total,val_total"


def test_pipeline_smoke(tiny_data, tmp_path, capsys):
    t0 = time.perf_counter()
    tr = tmp_path / "train"
    assert main(["train", "--data", str(tiny_data / "data"), "--epochs", "2",
                 "--latent-dim", "4", "--run-dir", str(tr)] + TINY) == 0
    ev = tmp_path / "eval"
    assert main(["eval-model", "--model", str(tr / "model.json"), "--data",
                 str(tiny_data / "data"), "--steps", "50", "--run-dir", str(ev)] + TINY) == 0
    tk = tmp_path / "track"
    assert main(["track", "--model", str(tr / "model.json"), "--duration", "2",
                 "--run-dir", str(tk)]) == 0
    sw = tmp_path / "sweep"
    assert main(["sweep", "--model", str(tr / "model.json"), "--horizons", "5,10",
                 "--duration", "0.5", "--controller", "dk-mpc", "--run-dir", str(sw)]) == 0
    assert time.perf_counter() - t0 < 60.0
    capsys.readouterr()

    header, data = bench.read_trajectory(tk / "dk-mpc" / "trajectory.csv")
    assert data.shape == (200, len(header)) and header[-1] == "solve_ms"
    assert (tk / "nmpc" / "trajectory.csv").exists()
    rows = bench.read_metrics_csv(tk / "metrics.csv")
    assert {r["controller"] for r in rows} == {"dk-mpc", "nmpc"}
    metrics = json.loads((tk / "metrics.json").read_text())
    assert metrics["scenario"] == "track" and metrics["horizon"] == 10
    sweep = bench.read_sweep(sw / "sweep.csv")
    assert [(r["H"], r["controller"]) for r in sweep] == [(5, "dk-mpc"), (10, "dk-mpc")]
    ev_json = json.loads((ev / "metrics.json").read_text())
    assert ev_json["rollout_steps"] == 50 and len(ev_json["r2_score_channels"]) == 4
    for d in (tr, ev, tk, sw):
        m = json.loads((d / "manifest.json").read_text())
        assert m["status"] == "ok" and m["outputs"]
        assert all((d / o).exists() for o in m["outputs"])


def test_stabilize_records_settling(tiny_data, tmp_path, capsys):
    tr = tmp_path / "train"
    assert main(["train", "--data", str(tiny_data / "data"), "--epochs", "1",
                 "--latent-dim", "4", "--run-dir", str(tr)] + TINY) == 0
    st = tmp_path / "stab"
    assert main(["stabilize", "--model", str(tr / "model.json"), "--controller", "dk-mpc",
                 "--horizon", "5", "--duration", "2",
                 "--set", "stabilize_schedule=0 0 0 0 0 | 1 0.2 0 0 0",
                 "--run-dir", str(st)]) == 0
    capsys.readouterr()
    met = json.loads((st / "metrics.json").read_text())
    assert met["horizon"] == 5
    assert np.asarray(met["controllers"]["dk-mpc"]["settling_error"]).shape == (1, 4)
