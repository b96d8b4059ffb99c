import json
import subprocess
import sys

import pytest

from poflab.cli import main

TINY = ["--set", "dataset.n_train=96", "--set", "dataset.n_test=96",
        "--set", "model.layer_widths=[2, 8, 8, 4]", "--set", "pretrain.epochs=2",
        "--set", "pretrain.batch_size=32", "--set", "posttrain.epochs=1",
        "--set", "posttrain.batch_size=48", "--set", "diagnostics.n_batches=6"]


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_gen_data_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        code, out, _ = _run(capsys, "gen-data", "--seed", 5, "--out", tmp_path / name,
                            "--set", "dataset.n_train=50")
        assert code == 0 and json.loads(out)["n_train"] == 50
    for f in ("train.csv", "test.csv", "dataset.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_usage_and_config_errors_exit_2(tmp_path, capsys):
    code, _, err = _run(capsys, "frobnicate")
    assert code == 2 and json.loads(err)["exit_code"] == 2
    code, _, err = _run(capsys, "run", "--set", "pretrain.nope=1", "--out", tmp_path / "x")
    assert code == 2 and "pretrain.nope" in json.loads(err)["message"]
    code, _, err = _run(capsys, "run", "--set", "pretrain.epochs=abc", "--out", tmp_path / "y")
    assert code == 2
    code, _, err = _run(capsys, "diagnose", "xi-hist", "--ckpt", tmp_path / "missing.ckpt",
                        "--out", tmp_path / "z")
    assert code == 2 and json.loads(err)["error"] in ("CheckpointError", "FileNotFoundError")


def test_existing_output_dir(tmp_path, capsys):
    (tmp_path / "d").mkdir()
    code, _, err = _run(capsys, "gen-data", "--out", tmp_path / "d")
    assert code == 2 and json.loads(err)["error"] == "FileExistsError"
    code, _, _ = _run(capsys, "gen-data", "--out", tmp_path / "d", "--force")
    assert code == 0 and (tmp_path / "d" / "train.csv").exists()


def test_runtime_failure_reports_stage(tmp_path, capsys):
    code, _, err = _run(capsys, "run", *TINY, "--set", "pretrain.lr=1.0e+300",
                        "--out", tmp_path / "bad")
    rec = json.loads(err)
    assert code == 1 and rec["stage"] == "pretrain"


def test_train_pof_diagnose_compare_chain(tmp_path, capsys):
    code, out, _ = _run(capsys, "train", *TINY, "--recipe", "sam", "--out", tmp_path / "t")
    assert code == 0
    ckpt = json.loads(out)["checkpoint"]
    code, out, _ = _run(capsys, "pof", *TINY, "--ckpt", ckpt, "--out", tmp_path / "p")
    assert code == 0
    post = json.loads(out)["checkpoint"]
    code, out, _ = _run(capsys, "diagnose", "xi-hist", *TINY, "--ckpt", post, "--scope", "test",
                        "--out", tmp_path / "x", "--figures")
    rec = json.loads(out)
    assert code == 0 and rec["n"] == 6 and rec["median"] > 0
    assert (tmp_path / "x" / "xi-hist.png").exists()
    code, out, _ = _run(capsys, "diagnose", "perturbation", "--ckpt", post,
                        "--steps", tmp_path / "p" / "pof_steps.tsv", "--out", tmp_path / "q")
    assert code == 0 and json.loads(out)["n"] == 2
    code, out, _ = _run(capsys, "diagnose", "slice", "--ckpt", post, "--block", "dense9",
                        "--out", tmp_path / "s")
    assert code == 2
    code, out, _ = _run(capsys, "compare", "--ckpt-a", ckpt, "--ckpt-b", post,
                        "--n-batches", 4, "--out", tmp_path / "c")
    assert code == 0 and any(r["metric"] == "test_error" for r in json.loads(out)["rows"])


def test_output_root_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("POFLAB_OUTPUT_ROOT", str(tmp_path))
    code, out, _ = _run(capsys, "gen-data")
    assert code == 0 and json.loads(out)["out"] == str(tmp_path / "data")


@pytest.mark.slow
def test_console_help():
    res = subprocess.run([sys.executable, "-m", "poflab.cli", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "run" in res.stdout and "diagnose" in res.stdout
