import json
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from sinklab.analysis import read_heatmap_csv
from sinklab.cli import EXIT_CHECK, EXIT_NONCONVERGED, EXIT_OK, EXIT_USAGE, check_manifest, main
from sinklab.model import LayerHeadParams, ModelParams, save_model
from sinklab.taskgen import read_binary, read_csv


def run(capsys, *argv, stderr=False):
    """Run the CLI; returns (exit code, run directory or None[, stderr])."""
    try:
        code = main([str(a) for a in argv])
    except SystemExit as exc:
        code = exc.code
    captured = capsys.readouterr()
    lines = captured.out.strip().splitlines()
    run_dir = Path(lines[-1]) if code in (EXIT_OK, EXIT_CHECK, EXIT_NONCONVERGED) and lines else None
    return (code, run_dir, captured.err) if stderr else (code, run_dir)


def test_construct_then_verify(capsys, tmp_path):
    code, run_dir = run(capsys, "construct", "--L", 16, "--n", 16, "--out", tmp_path)
    assert code == EXIT_OK and run_dir.parent == tmp_path
    code, vdir = run(capsys, "verify", run_dir / "model.json", "--suite", "construction", "--count", 100)
    assert code == EXIT_OK
    report = json.loads((vdir / "report.json").read_text())
    assert report["passed"] and report["suites"]["construction"]["status"] == "pass"
    assert check_manifest(run_dir) == [] and check_manifest(vdir) == []


def test_binary_checkpoint_verifies(capsys):
    _, run_dir = run(capsys, "construct", "--L", 8, "--n", 6)
    code, _ = run(capsys, "verify", run_dir / "model.bin", "--suite", "construction", "--L", 8, "--count", 20)
    assert code == EXIT_OK


@pytest.mark.parametrize("argv", [("--L", 3), ("--n", 4)])
def test_small_dimensions_are_usage_errors(capsys, argv):
    code, _, err = run(capsys, "train", "--seed", 0, *argv, stderr=True)
    assert code == EXIT_USAGE
    assert "need L >=" in err


def test_seed_is_required(capsys, tmp_path):
    code, _ = run(capsys, "train", "--max-steps", 1)
    assert code == EXIT_USAGE
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 1, "typo": {}}))
    assert run(capsys, "train", "--config", cfg)[0] == EXIT_USAGE


def test_pin_outside_sequence_is_usage_error(capsys):
    code, _, err = run(capsys, "train", "--seed", 0, "--L", 6, stderr=True)
    assert code == EXIT_USAGE and "trigger_pin" in err


def test_bad_flag_is_usage_error(capsys):
    assert run(capsys, "export")[0] == EXIT_USAGE
    assert run(capsys, "train", "--heads", 0, "--seed", 0)[0] == EXIT_USAGE


def test_train_not_converged_then_export(capsys):
    code, run_dir = run(capsys, "train", "--seed", 2, "--L", 6, "--n", 5, "--max-steps", 4, "--eval-every", 2, "--trigger-pin", 4, "--quiet")
    assert code == EXIT_NONCONVERGED
    names = {p.name for p in run_dir.iterdir()}
    assert {"model.json", "model.bin", "history.jsonl", "timing.json", "config.json", "manifest.json"} <= names
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["status"] == "not-converged" and manifest["kernel_backend"] in ("cython", "python")
    assert [json.loads(l)["step"] for l in (run_dir / "history.jsonl").read_text().splitlines()] == [0, 2, 4]
    assert check_manifest(run_dir) == []

    code, edir = run(capsys, "export", run_dir / "model.json", "--count", 1, "--trigger-pin", 4)
    assert code == EXIT_OK
    std, meta = read_heatmap_csv(edir / "heatmaps" / "attn_L0_H0_std.csv")
    assert std.shape == (6, 6) and np.all(std == 0)
    assert meta["trigger_pos"] == "4"
    assert (edir / "heatmaps" / "attn_L0_H0_mean.pgm").read_bytes()[:2] == b"P5"
    assert "classes" in json.loads((edir / "sink_report.json").read_text())


def test_manifest_detects_tampering(capsys):
    _, run_dir = run(capsys, "construct", "--L", 6, "--n", 5)
    (run_dir / "model.json").write_text("{}")
    assert check_manifest(run_dir) == ["model.json"]


def test_run_dirs_are_never_reused(capsys, tmp_path):
    dirs = {run(capsys, "construct", "--L", 5, "--n", 5, "--out", tmp_path)[1] for _ in range(3)}
    assert len(dirs) == 3


def test_sample(capsys):
    code, run_dir = run(capsys, "sample", "--seed", 3, "--count", 4, "--L", 6, "--n", 5, "--trigger-pin", 3)
    assert code == EXIT_OK
    a, b = read_binary(run_dir / "sequences.bin"), read_csv(run_dir / "sequences.csv")
    assert_array_equal(a.tokens, b.tokens)
    assert np.all(a.trigger_pos == 3)


def test_lemma_mutation_is_caught(capsys, tmp_path, softmax_model):
    path = tmp_path / "good.json"
    save_model(softmax_model, path, {"L": 16})
    code, vdir = run(capsys, "verify", path, "--suite", "lemmas", "--count", 50)
    assert code == EXIT_OK
    eta = json.loads((vdir / "report.json").read_text())["suites"]["lemmas"]["measured_eta"]

    h = softmax_model.layers[0][0]
    broken = ModelParams(((LayerHeadParams(h.W_Q, h.W_K, h.W_V + 1.0, h.W_O),),), "softmax")
    save_model(broken, tmp_path / "bad.json", {"L": 16})
    code, vdir = run(capsys, "verify", tmp_path / "bad.json", "--suite", "lemmas", "--count", 50, "--eta", eta)
    assert code == EXIT_CHECK
    failed = [r["name"] for r in json.loads((vdir / "report.json").read_text())["suites"]["lemmas"]["records"] if not r["passed"]]
    assert "bos-small" in failed


def test_relu_suites_are_skipped_not_failed(capsys):
    _, run_dir = run(capsys, "construct", "--L", 8, "--n", 6)
    code, vdir = run(capsys, "verify", run_dir / "model.json", "--count", 20)
    suites = json.loads((vdir / "report.json").read_text())["suites"]
    assert code == EXIT_OK
    assert suites["lemmas"]["status"] == suites["sink"]["status"] == "skipped"
