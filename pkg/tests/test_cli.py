from __future__ import annotations

import csv
import io
import subprocess
import sys
from pathlib import Path

import pytest

from mmfree.cli import main

ROOT = Path(__file__).resolve().parents[1]
TINY_CFG = str(ROOT / "configs" / "tiny.cfg")


@pytest.fixture()
def small_text(tmp_path, corpus_path):
    path = tmp_path / "train.txt"
    path.write_bytes(corpus_path.read_bytes()[:20_000])
    return path


def test_params_report(capsys):
    assert main(["params", "--config", str(ROOT / "configs" / "published_scale.cfg"), "--variant", "grc"]) == 0
    out = capsys.readouterr().out
    assert "296,788,992" in out or "296788992" in out
    assert "note:" in out


def test_params_writes_csv_and_figure(tmp_path):
    assert main(["params", "--config", TINY_CFG, "--out", str(tmp_path), "--csv", str(tmp_path / "one.csv")]) == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "params.csv").read_text())))
    assert [r["variant"] for r in rows] == ["base", "rc", "grc"]
    assert (tmp_path / "params.png").stat().st_size > 0
    assert len((tmp_path / "one.csv").read_text().splitlines()) == 2


def test_usage_errors_exit_one(capsys, small_text):
    assert main(["train", "--config", TINY_CFG]) == 1  # --data missing
    assert main(["params", "--bogus"]) == 1
    assert main([]) == 1
    assert main(["train", "--data", str(small_text), "--variant", "huge"]) == 1
    assert main(["bench", "--steps", "2"]) == 1
    capsys.readouterr()


def test_data_errors_exit_two(tmp_path, capsys, small_text):
    bad = tmp_path / "bad.tlm"
    bad.write_bytes(b"TLM1 this is not a checkpoint")
    assert main(["eval", "--ckpt", str(bad), "--data", str(small_text)]) == 2
    assert main(["generate", "--ckpt", str(tmp_path / "missing.tlm")]) == 2
    short = tmp_path / "short.txt"
    short.write_text("abc")
    assert main(["train", "--config", TINY_CFG, "--data", str(short), "--out", str(tmp_path / "r")]) == 2
    cfg = tmp_path / "broken.cfg"
    cfg.write_text("depth = 3\n")
    assert main(["params", "--config", str(cfg)]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_bench_prints_csv(capsys):
    assert main(["bench", "--config", TINY_CFG, "--variant", "rc", "--steps", "3"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [r["impl"] for r in rows] == ["fused", "unfused"]
    fused, unfused = rows
    t = 32
    assert int(unfused["reads"]) + int(unfused["writes"]) - int(fused["reads"]) - int(fused["writes"]) == 4 * t


def test_train_eval_generate_roundtrip(tmp_path, capsys, small_text):
    out = tmp_path / "run"
    assert main(["train", "--config", TINY_CFG, "--variant", "rc", "--data", str(small_text),
                 "--steps", "20", "--out", str(out)]) == 0
    assert (out / "final.tlm").exists() and (out / "loss.png").exists()
    with open(out / "metrics.csv", newline="") as fh:
        assert len(list(csv.reader(fh, strict=True))) == 21
    capsys.readouterr()

    assert main(["eval", "--ckpt", str(out / "final.tlm"), "--data", str(small_text)]) == 0
    text = capsys.readouterr().out
    assert text.startswith("mean_loss ") and "perplexity" in text

    assert main(["generate", "--ckpt", str(out / "final.tlm"), "--prompt", "def ", "--n-tokens", "0"]) == 0
    assert capsys.readouterr().out == "def \n"
    assert main(["generate", "--ckpt", str(out / "final.tlm"), "--prompt", "def ", "--n-tokens", "10"]) == 0
    first = capsys.readouterr().out
    main(["generate", "--ckpt", str(out / "final.tlm"), "--prompt", "def ", "--n-tokens", "10"])
    assert capsys.readouterr().out == first and first.startswith("def ")

    # resuming to a larger step budget appends to the same metrics file
    assert main(["train", "--config", TINY_CFG, "--variant", "rc", "--data", str(small_text), "--steps", "20",
                 "--ckpt", str(out / "final.tlm"), "--out", str(out)]) == 0


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mmfree", "params", "--config", TINY_CFG],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and "total" in proc.stdout.lower()
    proc = subprocess.run([sys.executable, "-m", "mmfree", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 1
