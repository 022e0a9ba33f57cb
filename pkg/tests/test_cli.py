"""End-to-end command runs on small synthetic sets."""

import csv
import json
import math

import pytest

from cli import main
from data import format_record, make_synthetic, SyntheticSpec
from model import load_checkpoint, save_checkpoint

SMALL = ["--synthetic", "planted", "--n", "1500", "--epochs", "2", "--cin-layers", "4,4",
         "--dnn-layers", "16,8", "--train-batch", "256"]


def _metrics(capsys):
    line = [l for l in capsys.readouterr().out.splitlines() if l.startswith("auc=")][-1]
    auc_part, loss_part = line.split()
    return float(auc_part.split("=")[1]), float(loss_part.split("=")[1])


@pytest.fixture
def run_dir(tmp_path):
    out = tmp_path / "run1"
    assert main(["train", *SMALL, "--out", str(out)]) == 0
    return out


class TestTrain:
    def test_writes_run_directory(self, run_dir):
        for name in ("manifest.json", "metrics.csv", "best.ckpt", "final.ckpt", "vocab.txt",
                     "test.tsv"):
            assert (run_dir / name).exists(), name
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["config"]["epochs"] == 2
        assert manifest["data"]["n"] == 1500
        assert manifest["seed"] == manifest["config"]["model"]["seed"]

    def test_rerun_from_manifest_is_byte_identical(self, run_dir, tmp_path):
        rerun = tmp_path / "run2"
        assert main(["train", "--manifest", str(run_dir / "manifest.json"), "--out", str(rerun)]) == 0
        assert (rerun / "metrics.csv").read_bytes() == (run_dir / "metrics.csv").read_bytes()

    @pytest.mark.parametrize("content", [
        '{"tool": "ctr-forge"}',
        '{"config": {"model": {"dropout": 0.5}}}',
        '{"config": {"model": "big"}}',
        '[1, 2]',
        'not json',
    ])
    def test_malformed_manifest(self, tmp_path, content):
        path = tmp_path / "manifest.json"
        path.write_text(content)
        assert main(["train", "--manifest", str(path), "--out", str(tmp_path / "run")]) == 2

    def test_missing_data_file(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "missing.tsv")]) == 2

    def test_no_data_source(self):
        assert main(["train", "--epochs", "1"]) == 2

    def test_bad_config_file(self, tmp_path):
        path = tmp_path / "bad.conf"
        path.write_text("epochs = lots\n")
        assert main(["train", *SMALL, "--config", str(path)]) == 2

    def test_bad_flag_value(self):
        assert main(["train", "--epochs", "x"]) == 2


class TestEval:
    def test_matches_best_csv_row(self, run_dir, capsys):
        capsys.readouterr()
        assert main(["eval", "--out", str(run_dir)]) == 0
        auc_value, loss_value = _metrics(capsys)
        with open(run_dir / "metrics.csv", newline="") as handle:
            rows = list(csv.DictReader(handle))
        best = min(rows, key=lambda row: float(row["eval_logloss"]))
        assert auc_value == pytest.approx(float(best["eval_auc"]), abs=1e-12)
        assert loss_value == pytest.approx(float(best["eval_logloss"]), abs=1e-12)

    def test_corrupted_checkpoint(self, run_dir):
        path = run_dir / "best.ckpt"
        path.write_bytes(b"NOTACKPT" + path.read_bytes()[8:])
        assert main(["eval", "--out", str(run_dir)]) == 2

    def test_single_class_file(self, run_dir, tmp_path, capsys):
        records = [r for r in make_synthetic(SyntheticSpec(num_records=200)) if r.label == 0]
        path = tmp_path / "negatives.tsv"
        path.write_text("".join(format_record(r) + "\n" for r in records))
        assert main(["eval", "--out", str(run_dir), "--data", str(path)]) == 3
        assert "MetricError" in capsys.readouterr().err

    def test_overflowing_checkpoint(self, run_dir, capsys):
        path = run_dir / "best.ckpt"
        params = load_checkpoint(path)
        for f in range(params.config.num_cat_fields):
            params[f"embed.cat.{f}"].value[...] = 1e110
        save_checkpoint(path, params)
        assert main(["eval", "--out", str(run_dir)]) == 3
        assert "NumericError" in capsys.readouterr().err


class TestSweep:
    def test_one_value_one_row(self, tmp_path):
        out = tmp_path / "sweep"
        args = ["sweep", *SMALL, "--param", "lr", "--values", "0.05", "--out", str(out)]
        assert main(args) == 0
        lines = (out / "sweep.csv").read_text().splitlines()
        assert lines[0] == "param,value,best_auc,best_logloss,epochs_run"
        assert len(lines) == 2

    def test_default_lr_grid(self, tmp_path):
        out = tmp_path / "sweep"
        assert main(["sweep", *SMALL, "--epochs", "1", "--param", "lr", "--out", str(out)]) == 0
        with open(out / "sweep.csv", newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert len(rows) == 8
        for row in rows:
            assert math.isfinite(float(row["best_auc"])), row
            assert math.isfinite(float(row["best_logloss"])), row

    def test_unknown_param(self, tmp_path):
        assert main(["sweep", *SMALL, "--param", "dropout", "--out", str(tmp_path)]) == 2


class TestGradcheck:
    def test_default_passes(self):
        assert main(["gradcheck"]) == 0

    def test_unreachable_tolerance(self):
        assert main(["gradcheck", "--tol", "1e-12"]) == 1

    def test_corrupt_hook(self):
        assert main(["gradcheck", "--corrupt"]) == 1


def test_compare(tmp_path):
    out = tmp_path / "compare"
    assert main(["compare", *SMALL, "--models", "none,xdeepfm", "--out", str(out)]) == 0
    lines = (out / "compare.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in lines] == ["model", "none", "xdeepfm"]


def test_stats(capsys):
    assert main(["stats", "--synthetic", "planted", "--n", "400"]) == 0
    out = capsys.readouterr().out
    assert "records: 400" in out
    assert "C3: categorical, missing 0.00%, distinct 2" in out
