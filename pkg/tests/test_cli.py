import io
import subprocess
import sys
from pathlib import Path

import pytest

from pand.cli import main

TOY = str(Path(__file__).resolve().parents[1] / "configs" / "toy.cfg")
FAST = ["--set", "psc.epochs=15", "--set", "nsd.epochs=3"]


def run(*argv):
    out = io.StringIO()
    code = main(list(argv), out=out)
    return code, out.getvalue()


def test_calibrate_distill_evaluate_chain(tmp_path):
    anchors = tmp_path / "anchors.bin"
    code, text = run("calibrate", "--config", TOY, *FAST, "--out", str(anchors))
    assert code == 0 and anchors.exists()
    assert text.startswith("# config_hash = ")
    assert f"paths.anchors = {anchors}" in text

    ck = tmp_path / "ck"
    code, text = run("distill", "--config", TOY, *FAST, "--anchors", str(anchors), "--out", str(ck),
                     "--set", f"paths.metrics={tmp_path / 'm.jsonl'}")
    assert code == 0 and (ck / "student.ckpt").exists()
    assert "student_top1" in text and (tmp_path / "m.jsonl").read_text().count("\n") == 3

    code, text = run("evaluate", "--config", TOY, *FAST, "--anchors", str(anchors),
                     "--checkpoint", str(ck / "student.ckpt"), "--out", str(tmp_path / "emb.tsv"))
    assert code == 0 and "consistency:" in text and (tmp_path / "emb.tsv").exists()


def test_repeated_commands_are_bitwise_identical(tmp_path):
    outputs = []
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        code, _ = run("distill", "--config", TOY, *FAST, "--seed", "3",
                      "--set", f"paths.metrics={d / 'm.jsonl'}")
        assert code == 0
        code, _ = run("sweep", "--config", TOY, *FAST, "--seed", "3", "--grid", "0,0.5",
                      "--out", str(d / "sweep.csv"))
        assert code == 0
        outputs.append([(d / f).read_bytes() for f in ("m.jsonl", "sweep.csv", "sweep.txt")])
    assert outputs[0] == outputs[1]


def test_gen_toy_then_file_source(tmp_path):
    data = tmp_path / "toy.bin"
    assert run("gen-toy", "--config", TOY, "--out", str(data))[0] == 0
    code, text = run("calibrate", "--config", TOY, *FAST, "--set", "data.source=file",
                     "--set", f"data.path={data}", "--out", str(tmp_path / "a.bin"))
    assert code == 0 and "teacher_top1" in text


def test_usage_and_config_errors_exit_2(tmp_path, capsys):
    assert run("distill", "--config", TOY, "--set", "nsd.weights.k=400")[0] == 2
    assert "k exceeds C-1: k=400, C=10" in capsys.readouterr().err
    assert run("distill", "--bogus")[0] == 2
    assert run("distill", "--set", "no_equals_sign")[0] == 2
    assert run("distill", "--set", "nsd.unknown=1")[0] == 2
    assert run("sweep", "--config", TOY, "--grid", "a,b")[0] == 2
    assert run("sweep", "--config", TOY, "--workers", "0")[0] == 2
    assert run("evaluate", "--config", TOY)[0] == 2
    assert run("distill", "--config", str(tmp_path / "missing.cfg"))[0] == 2


def test_runtime_errors_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"PANDANCH\x01\x00\x00\x00")
    assert run("distill", "--config", TOY, *FAST, "--anchors", str(bad))[0] == 1
    assert "short" in capsys.readouterr().err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "pand", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "calibrate" in proc.stdout
