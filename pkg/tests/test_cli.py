import subprocess
import sys

import pytest

from jointface.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main

TINY = ["--set", "model.conv_channels=(3,3,3,3,3)", "--set", "model.rpn_channels=3", "--set", "model.fc_dim=8",
        "--set", "run.images_per_batch=1"]


def test_no_command_and_unknown_subcommand(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_bad_override_is_usage_error():
    assert main(["gen-data", "--out", "/tmp/x", "--set", "model.nope=1"]) == EXIT_USAGE


def test_gradcheck_subcommand(capsys):
    assert main(["gradcheck", "--seeds", "1", "--only", "conv", "--only", "mse"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "ok  conv" in out and "ok  mse" in out
    assert main(["gradcheck", "--only", "bogus"]) == EXIT_USAGE


def test_missing_dataset_is_runtime_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--run-dir", str(tmp_path / "r")]) == EXIT_RUNTIME


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-data", "--out", str(data), "--count", "30", "--seed", "2"]) == EXIT_OK
    assert main(["train", "--data", str(data), "--run-dir", str(root / "run"), "--iterations", "4", *TINY]) == EXIT_OK
    return root, data


def test_train_outputs(trained):
    root, _ = trained
    run = root / "run"
    assert {"config.txt", "train_log.csv", "model.ckpt"} <= {p.name for p in run.iterdir()}
    assert len((run / "train_log.csv").read_text().splitlines()) == 5


def test_eval_writes_reports_and_reproduces_from_snapshot(trained):
    root, data = trained
    ckpt = str(root / "run" / "model.ckpt")
    assert main(["eval", "--checkpoint", ckpt, "--data", str(data), "--run-dir", str(root / "e1")]) == EXIT_OK
    names = {p.name for p in (root / "e1").iterdir()}
    assert {"metrics.csv", "attributes.csv", "pr_joint.csv", "pr_joint.svg", "config.txt"} <= names
    # re-run purely from the snapshot
    assert main(["eval", "--checkpoint", ckpt, "--config", str(root / "e1" / "config.txt"),
                 "--run-dir", str(root / "e2")]) == EXIT_OK
    assert (root / "e1" / "metrics.csv").read_bytes() == (root / "e2" / "metrics.csv").read_bytes()


def test_propose_and_visualize(trained, tmp_path):
    root, data = trained
    ckpt = str(root / "run" / "model.ckpt")
    out = tmp_path / "p.csv"
    assert main(["propose", "--checkpoint", ckpt, "--data", str(data), "--top-k", "5", "--out", str(out)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == "rank,x1,y1,x2,y2,score,anchor" and 1 < len(lines) <= 6
    pgm = tmp_path / "f.pgm"
    assert main(["visualize", "--checkpoint", ckpt, "--data", str(data), "--out", str(pgm)]) == EXIT_OK
    assert pgm.read_bytes().startswith(b"P5\n32 32\n255\n")  # 64 px scenes at stride 2
    assert main(["visualize", "--checkpoint", ckpt, "--data", str(data), "--layer", "conv9",
                 "--out", str(pgm)]) == EXIT_RUNTIME
    assert main(["propose", "--checkpoint", ckpt, "--data", str(data), "--record", "999"]) == EXIT_USAGE


def test_finetune_and_baseline(trained, tmp_path):
    root, data = trained
    assert main(["finetune", "--checkpoint", str(root / "run" / "model.ckpt"), "--data", str(data),
                 "--run-dir", str(tmp_path / "ft"), "--iterations", "2", *TINY]) == EXIT_OK
    assert main(["baseline", "--data", str(data), "--run-dir", str(tmp_path / "b"), "--iterations", "3",
                 "--mode", "aligned", *TINY]) == EXIT_OK
    assert "aligned" in (tmp_path / "b" / "attributes.csv").read_text()


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "jointface", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-data" in r.stdout
