import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from gestream.cli import main
from gestream.codec import read_tokens
from tests.conftest import CACHE


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def tiny_ckpt(tiny_bundle):
    # tiny_bundle trains into the cache as a side effect
    return str(CACHE / "tiny")


def test_synth_data_deterministic(runner, tmp_path_factory):
    d1 = tmp_path_factory.mktemp("c1")
    d2 = tmp_path_factory.mktemp("c2")
    r1 = runner.invoke(main, ["--config", "tiny", "synth-data",
                              "--out", str(d1 / "corpus")])
    r2 = runner.invoke(main, ["--config", "tiny", "synth-data",
                              "--out", str(d2 / "corpus")])
    assert r1.exit_code == 0 and r2.exit_code == 0
    h1 = json.loads(r1.output)["sha256"]
    h2 = json.loads(r2.output)["sha256"]
    assert h1 == h2


def test_synth_data_seed_changes_hash(runner, tmp_path):
    r1 = runner.invoke(main, ["--config", "tiny", "synth-data",
                              "--out", str(tmp_path / "a")])
    r2 = runner.invoke(main, ["--config", "tiny", "--seed", "9",
                              "synth-data", "--out", str(tmp_path / "b")])
    assert r1.exit_code == 0 and r2.exit_code == 0
    assert json.loads(r1.output)["sha256"] != json.loads(r2.output)["sha256"]


def test_missing_checkpoint_exit_code(runner, tmp_path):
    r = runner.invoke(main, ["--checkpoint-dir", str(tmp_path / "nope"),
                             "evaluate"])
    assert r.exit_code == 3
    err = json.loads(r.output.strip().splitlines()[-1])
    assert err["error"] == "CheckpointMissing"


def test_bad_config_exit_code(runner):
    r = runner.invoke(main, ["--config", "no-such-preset", "synth-data",
                             "--out", "x"])
    assert r.exit_code == 4


def test_evaluate_writes_report(runner, tiny_ckpt, tmp_path):
    out = tmp_path / "report.json"
    r = runner.invoke(main, ["--config", "tiny", "--checkpoint-dir",
                             tiny_ckpt, "evaluate", "--out", str(out),
                             "--minutes", "0.25"])
    assert r.exit_code == 0, r.output
    doc = json.loads(out.read_text())
    for key in ("fgd", "beat_align", "l1_div", "mpjpe", "facial_mse",
                "latency"):
        assert key in doc
    assert out.with_suffix(".csv").exists()


def test_bench_latency_reports_stats(runner, tiny_ckpt, tmp_path):
    corpus = tmp_path / "corpus"
    runner.invoke(main, ["--config", "tiny", "synth-data",
                         "--out", str(corpus)])
    cond = next(corpus.glob("*.conditions.jsonl"))
    r = runner.invoke(main, ["--config", "tiny", "--checkpoint-dir",
                             tiny_ckpt, "bench-latency",
                             "--conditions", str(cond), "--steps", "20"])
    assert r.exit_code == 0, r.output
    doc = json.loads(r.output)
    assert doc["steps"] == 20
    assert doc["p50"] > 0 and doc["p95"] >= doc["p50"]


def test_dump_tokens(runner, tiny_ckpt, tmp_path):
    corpus = tmp_path / "corpus"
    runner.invoke(main, ["--config", "tiny", "synth-data",
                         "--out", str(corpus)])
    mbm = next(corpus.glob("*.mbm"))
    r = runner.invoke(main, ["--config", "tiny", "--checkpoint-dir",
                             tiny_ckpt, "dump-tokens", str(mbm)])
    assert r.exit_code == 0, r.output
    doc = json.loads(r.output)
    tokens = read_tokens(doc["tokens"])
    assert tokens.shape == (doc["steps"], doc["levels"])
    assert doc["levels"] == 20


def test_dump_tokens_bad_file_exit_code(runner, tiny_ckpt, tmp_path):
    bad = tmp_path / "bad.mbm"
    bad.write_bytes(b"XXXX" + b"\0" * 16)
    r = runner.invoke(main, ["--config", "tiny", "--checkpoint-dir",
                             tiny_ckpt, "dump-tokens", str(bad)])
    assert r.exit_code == 4
