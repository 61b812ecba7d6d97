import csv

import numpy as np
import pytest

from advseg.cli import main
from advseg.kitti import load_kitti_scan, scan_paths
from advseg.network import load_model


def run(args):
    assert main(args) == 0


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A synthetic dataset tree plus a pre-trained checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    run(["synth", "--out", str(root / "clean"), "--scans", "2",
         "--points", "2500", "--seed", "3"])
    run(["pretrain", "--data", str(root / "clean"), "--out",
         str(root / "model.ckpt"), "--loss", "ce", "--steps", "60",
         "--batch-points", "1024", "--seed", "0"])
    return root


def test_synth_writes_layout(workspace):
    scans = scan_paths(workspace / "clean")
    assert len(scans) == 2
    cloud = load_kitti_scan(scans[0][1], scans[0][2])
    assert len(cloud) == 2500


def test_pretrain_checkpoint_loads(workspace):
    model = load_model(workspace / "model.ckpt")
    assert model.num_classes == 8


def test_attack_and_report(workspace, capsys):
    run(["attack", "--in", str(workspace / "clean"), "--out",
         str(workspace / "adv"), "--model", str(workspace / "model.ckpt"),
         "--epsilon", "0.2", "--steps", "3", "--selection-perc", "0.5",
         "--flip-fraction", "0.5", "--seed", "1"])
    out = capsys.readouterr().out
    assert "contaminated 2/2" in out
    assert (workspace / "adv" / "manifest.txt").exists()
    run(["report", "--before", str(workspace / "clean"), "--after",
         str(workspace / "adv"), "--out", str(workspace / "shift.csv")])
    with open(workspace / "shift.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8


def test_eval_prints_miou(workspace, capsys):
    run(["eval", "--model", str(workspace / "model.ckpt"), "--data",
         str(workspace / "clean"), "--csv", str(workspace / "eval.csv")])
    out = capsys.readouterr().out
    assert "mIoU" in out
    assert (workspace / "eval.csv").exists()


def test_train_decoder_adapt_finetune(workspace):
    run(["synth", "--out", str(workspace / "target"), "--scans", "1",
         "--points", "2000", "--domain", "target", "--seed", "9"])
    run(["train-decoder", "--data", str(workspace / "clean"), "--out",
         str(workspace / "dec.ckpt"), "--epochs", "6", "--coarse-points", "48",
         "--points-per-cloud", "256", "--seed", "0"])
    run(["adapt", "--source", str(workspace / "clean"), "--target",
         str(workspace / "target"), "--model", str(workspace / "model.ckpt"),
         "--decoder", str(workspace / "dec.ckpt"), "--out",
         str(workspace / "adapted.ckpt"), "--steps", "6", "--seed", "0"])
    assert load_model(workspace / "adapted.ckpt").num_classes == 8
    run(["finetune", "--model", str(workspace / "adapted.ckpt"), "--data",
         str(workspace / "clean"), "--out", str(workspace / "tuned.ckpt"),
         "--clean-frac", "0.05", "--patience", "3", "--seed", "0"])
    assert (workspace / "tuned.ckpt").exists()


def test_tune_lambda_writes_trace(workspace, capsys):
    run(["tune-lambda", "--budget", "5", "--epochs", "1", "--points", "1200",
         "--seed", "0", "--trace", str(workspace / "trace.csv")])
    out = capsys.readouterr().out
    assert "best lambda" in out
    with open(workspace / "trace.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 5
    assert all(0.0 <= float(r["lambda"]) <= 1.0 for r in rows)


def test_run_grid_small(workspace, capsys):
    run(["run", "--seeds", "0", "--points", "2000", "--source-scans", "2",
         "--target-scans", "1", "--eval-scans", "1", "--rows", "baseline",
         "--adapt-steps", "6", "--pretrain-steps", "40",
         "--out", str(workspace / "grid")])
    out = capsys.readouterr().out
    assert "baseline" in out
    assert (workspace / "grid" / "results.csv").exists()
    assert (workspace / "grid" / "summary.txt").exists()


def test_config_file_supplies_defaults(workspace, tmp_path, capsys):
    cfg = tmp_path / "advseg.ini"
    cfg.write_text("[tune-lambda]\nbudget = 4\npoints = 1200\nepochs = 1\n")
    run(["--config", str(cfg), "tune-lambda", "--seed", "1"])
    out = capsys.readouterr().out
    assert "4 evaluations" in out


def test_cli_flag_overrides_config(workspace, tmp_path, capsys):
    cfg = tmp_path / "advseg.ini"
    cfg.write_text("[tune-lambda]\nbudget = 4\npoints = 1200\nepochs = 1\n")
    run(["--config", str(cfg), "tune-lambda", "--budget", "3", "--seed", "1"])
    out = capsys.readouterr().out
    assert "3 evaluations" in out
