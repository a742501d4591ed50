import json
import subprocess
import sys

import pytest

from stam.cli import main
from stam.synthetic import load_dataset

SMALL = ["--train-size", "64", "--test-size", "32", "--epochs", "2"]

COMMANDS = {
    "train": ["train", *SMALL, "--layers", "1"],
    "train-baseline": ["train", *SMALL, "--baseline", "vanilla_stack"],
    "sweep-layers": ["sweep-layers", *SMALL, "--layer-counts", "0,1", "--seeds", "0,1"],
    "compare-baselines": ["compare-baselines", *SMALL, "--seeds", "3"],
    "export-trace": ["export-trace", *SMALL, "--init", "max", "--samples", "0,4,31"],
    "check-grads": ["check-grads", "--init", "avg,tconv", "--layer-counts", "1"],
    "gen-data": ["gen-data", "--train-size", "16", "--test-size", "8"],
    "oracle": ["oracle", "--draws", "5000"],
}


def run_twice(tmp_path, argv):
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main([*argv, "--out", str(out)]) == 0
        outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    return outputs


@pytest.mark.parametrize("name", sorted(COMMANDS))
def test_subcommands_are_byte_reproducible(tmp_path, name, capsys):
    first, second = run_twice(tmp_path, COMMANDS[name])
    assert first and first == second


def test_expected_files(tmp_path, capsys):
    expected = {
        "train": {"metrics.csv", "report.json"},
        "export-trace": {"metrics.csv", "trace.json"},
        "check-grads": {"grad_check.json"},
        "gen-data": {"dataset.bin"},
        "oracle": {"calibration.json"},
    }
    for name, files in expected.items():
        out = tmp_path / name
        main([*COMMANDS[name], "--out", str(out)])
        assert {p.name for p in out.iterdir()} == files


def test_overrides_reach_the_run(tmp_path, capsys):
    out = tmp_path / "o"
    main(["train", *SMALL, "--layers", "2", "--lambda", "0,0,1", "--init", "tconv", "--seed", "11", "--out", str(out)])
    report = json.loads((out / "report.json").read_text())
    assert report["seed"] == 11 and report["layers"] == 2 and report["initializer"] == "tconv"


def test_config_file_and_clip_override(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"task": {"train_size": 8, "test_size": 4}, "train": {"epochs": 0}}))
    out = tmp_path / "o"
    assert main(["gen-data", "--config", str(cfg), "--clips", "3", "--out", str(out)]) == 0
    spec, train, test = load_dataset(out / "dataset.bin")
    assert spec.clip_count == 3 and train.clips.shape == (8, 3, 32) and len(test) == 4


@pytest.mark.parametrize(
    "argv",
    [
        ["train", *SMALL, "--lambda", "1,1"],
        ["train", *SMALL, "--layers", "-1"],
        ["export-trace", *SMALL, "--samples", "32"],
        ["gen-data", "--config", "/nonexistent/cfg.json"],
        ["check-grads", "--init", "lstm", "--layer-counts", "1"],
    ],
)
def test_configuration_errors_exit_2(tmp_path, argv, capsys):
    assert main([*argv, "--out", str(tmp_path)]) == 2
    assert "configuration error" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_exits_3(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"learning_rate": 1e300, "epochs": 2}}))
    assert main(["train", "--config", str(cfg), "--train-size", "64", "--test-size", "8", "--out", str(tmp_path)]) == 3
    assert "non-finite loss" in capsys.readouterr().err


def test_failed_gradient_check_exits_4(tmp_path, capsys):
    argv = ["check-grads", "--init", "avg", "--layer-counts", "1", "--tol", "1e-15", "--out", str(tmp_path)]
    assert main(argv) == 4
    assert "FAIL" in capsys.readouterr().out
    assert json.loads((tmp_path / "grad_check.json").read_text())["cases"][0]["passed"] is False


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "stam.cli", "gen-data", "--train-size", "4", "--test-size", "4", "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "dataset.bin").exists()
