import json
import os

import numpy as np
import pytest

from flowlens import cli
from flowlens.imageio import decode_pgm16, write_ppm


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--n", 24, "--jitter", "--out", d / "data") == 0
    assert run("train-features", "--data", d / "data" / "data.bin", "--epochs", 1,
               "--detector-epochs", 2, "--out", d / "models") == 0
    assert run("train-flow", "--data", d / "data" / "data.bin", "--features", d / "models" / "features.ckpt",
               "--epochs", 1, "--out", d / "models") == 0
    img = np.random.default_rng(0).uniform(0, 1, (32, 32, 3))
    write_ppm(d / "in.ppm", img)
    return d


def test_help_exits_zero(capsys):
    assert run("--help") == 0
    assert "gen-data" in capsys.readouterr().out
    assert run("gradmap", "--help") == 0
    assert "--variant" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["gen-data", "--out", "x", "--bogus"],
    ["gen-data"],  # --out is required
    ["gen-data", "--out", "x", "--n", "0"],
    ["gen-data", "--out", "x", "--threads", "0"],
    ["gradmap", "--flow", "nope", "--features", "nope", "--image", "nope", "--out", "x"],
])
def test_usage_errors_exit_two(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(*argv) == 2
    assert not os.path.exists(tmp_path / "x")


def test_bad_thread_env(monkeypatch, tmp_path):
    monkeypatch.setenv("FLOWLENS_THREADS", "many")
    assert run("gen-data", "--n", 1, "--out", tmp_path) == 2


def test_corrupt_checkpoint_exits_one(trained, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage that is not a checkpoint")
    rc = run("gradmap", "--flow", bad, "--features", trained / "models" / "features.ckpt",
             "--image", trained / "in.ppm", "--out", tmp_path / "o")
    assert rc == 1


def test_gradmap_outputs(trained, tmp_path):
    out = tmp_path / "g"
    assert run("gradmap", "--flow", trained / "models" / "flow.ckpt", "--features",
               trained / "models" / "features.ckpt", "--image", trained / "in.ppm", "--out", out) == 0
    factor = float((out / "in.grad.factor.txt").read_text())
    gmap = decode_pgm16((out / "in.grad.pgm").read_bytes(), factor)
    assert gmap.shape == (32, 32) and gmap.min() >= 0
    rows = (out / "in.grad.csv").read_text().splitlines()
    assert rows[0].startswith("image,variant") and rows[1].startswith("in,log-density-gradient,")


def test_score_outputs(trained, tmp_path):
    assert run("score", "--flow", trained / "models" / "flow.ckpt", "--features",
               trained / "models" / "features.ckpt", "--image", trained / "in.ppm", "--out", tmp_path) == 0
    rows = (tmp_path / "scores.csv").read_text().splitlines()
    assert rows[0] == "image,score,value"
    assert [r.split(",")[1] for r in rows[1:]] == ["log-density", "avg-abs-gradient"]


def test_gen_data_split(tmp_path):
    from flowlens import datasets, experiments as ex
    assert run("gen-data", "--preset", "low-light", "--split", "test", "--n", 3, "--out", tmp_path) == 0
    ds = datasets.load_dataset((tmp_path / "data.bin").read_bytes())
    assert ds.seeds == ex.family_seeds("low-light", "test")[:3] and ds.preset == "low-light"


def test_manifest_kind_mismatch(trained, tmp_path):
    m = tmp_path / "m.json"
    m.write_text(json.dumps({"kind": "ood"}))
    assert run("adapt", "--manifest", m) == 2
    assert run("correlate", "--manifest", tmp_path / "absent.json") == 2


def test_report(tmp_path, capsys):
    csv = tmp_path / "t.csv"
    csv.write_text("class,default\ndisk,3\ntotal,3\n")
    assert run("report", csv, "--title", "T", "--out", tmp_path / "r") == 0
    text = (tmp_path / "r" / "t.txt").read_text()
    assert text.startswith("T\n") and "| total" in text
    assert text == capsys.readouterr().out


def test_inputs_not_mutated(trained, tmp_path):
    data = trained / "data" / "data.bin"
    before = data.read_bytes()
    assert run("train-flow", "--data", data, "--features", trained / "models" / "features.ckpt",
               "--epochs", 1, "--out", tmp_path) == 0
    assert data.read_bytes() == before
