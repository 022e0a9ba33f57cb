"""Training loop, evaluation, sweeps, ablation comparison and the CSV reports."""

import math
from dataclasses import replace

import numpy as np
import pytest

from config import ModelConfig, TrainConfig
from data import SyntheticSpec, encode, make_synthetic, prepare
from errors import ConfigError, NumericError, TrainingError
from model import init_params, load_checkpoint, loss_and_trace
from trainer import (
    METRICS_HEADER,
    SWEEP_HEADER,
    EarlyStopping,
    SweepRow,
    auc_trend,
    compare_models,
    evaluate,
    fit,
    predict,
    sweep,
    with_param,
    write_metrics_csv,
    write_sweep_csv,
)


class TestEarlyStopping:
    def test_stops_after_patience(self):
        stopper = EarlyStopping(patience=2)
        assert [stopper(v) for v in (0.7, 0.6, 0.65, 0.61)] == [False, False, False, True]

    def test_improvement_resets_counter(self):
        stopper = EarlyStopping(patience=2)
        assert [stopper(v) for v in (0.7, 0.71, 0.5, 0.6)] == [False, False, False, False]


class TestEvaluate:
    def test_untrained_model_is_uninformative(self, planted_sets, planted_config):
        _, _, test = planted_sets
        params = init_params(planted_config.model)
        auc_value, loss_value = evaluate(test, params, planted_config)
        assert auc_value == 0.5
        assert loss_value == pytest.approx(math.log(2), abs=1e-12)

    def test_threads_keep_input_order(self, planted_sets, planted_config):
        _, _, test = planted_sets
        params = init_params(planted_config.model, init_std=0.3, zero_fusion=False)
        serial = predict(test, params, 300, threads=1)
        pooled = predict(test, params, 300, threads=4)
        assert serial.shape == (2_500,)
        np.testing.assert_array_equal(serial, pooled)

    def test_batch_size_does_not_change_scores(self, planted_sets, planted_config):
        _, _, test = planted_sets
        params = init_params(planted_config.model, init_std=0.3, zero_fusion=False)
        whole = predict(test, params, test.size)
        np.testing.assert_allclose(predict(test, params, 300), whole, rtol=0, atol=1e-12)
        small = evaluate(test, params, replace(planted_config, eval_batch=97))
        large = evaluate(test, params, replace(planted_config, eval_batch=test.size))
        np.testing.assert_allclose(small, large, rtol=0, atol=1e-12)


class TestFit:
    def test_zero_epochs(self, planted_sets, planted_config):
        _, train, test = planted_sets
        result = fit(train, test, replace(planted_config, epochs=0))
        assert result.reports == []
        assert result.best_epoch is None
        initial = init_params(planted_config.model)
        for name in initial.names:
            np.testing.assert_array_equal(result.params[name].value, initial[name].value)

    def test_deterministic(self, planted_sets, short_config, tmp_path):
        _, train, test = planted_sets
        first = fit(train, test, short_config)
        second = fit(train, test, short_config)
        strip = [(r.epoch, r.train_logloss, r.eval_auc, r.eval_logloss, r.lr) for r in first.reports]
        assert strip == [(r.epoch, r.train_logloss, r.eval_auc, r.eval_logloss, r.lr)
                         for r in second.reports]
        write_metrics_csv(tmp_path / "a.csv", first.reports)
        write_metrics_csv(tmp_path / "b.csv", second.reports)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_checkpoints_hold_best_epoch(self, planted_sets, short_config, tmp_path):
        _, train, test = planted_sets
        result = fit(train, test, short_config, checkpoint_dir=tmp_path)
        assert (tmp_path / "final.ckpt").exists()
        best = load_checkpoint(tmp_path / "best.ckpt")
        auc_value, loss_value = evaluate(test, best, short_config)
        assert auc_value == pytest.approx(result.best_report.eval_auc, abs=1e-12)
        assert loss_value == pytest.approx(result.best_report.eval_logloss, abs=1e-12)
        assert loss_value == min(r.eval_logloss for r in result.reports)

    def test_linear_data_loss_decreases(self):
        records = make_synthetic(SyntheticSpec(kind="linear", num_records=4_000, seed=5))
        prepared = prepare(records, TrainConfig(min_freq=1))
        model = ModelConfig(cat_vocab_sizes=prepared.vocab.bucket_counts, num_dense_fields=0,
                            embed_dim=4, num_heads=2, cin_layer_sizes=(4,), dnn_layer_sizes=(8,))
        config = TrainConfig(lr=0.01, epochs=5, train_batch=128, model=model)
        result = fit(encode(prepared.train, prepared.vocab), encode(prepared.test, prepared.vocab),
                     config)
        losses = [r.train_logloss for r in result.reports]
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_early_stop_truncates(self, planted_sets, short_config, monkeypatch):
        _, train, test = planted_sets
        scripted = iter([(0.6, 0.60), (0.7, 0.50), (0.7, 0.55), (0.8, 0.40)])
        monkeypatch.setattr("trainer.evaluate", lambda *args: next(scripted))
        config = replace(short_config, epochs=4, early_stop=True, early_stop_patience=1)
        result = fit(train, test, config)
        assert [r.eval_logloss for r in result.reports] == [0.60, 0.50, 0.55]
        assert result.best_epoch == 1

    def test_non_finite_loss_aborts(self, planted_sets, short_config, monkeypatch):
        _, train, test = planted_sets
        calls = []

        def poisoned(tape, batch, params):
            loss, trace = loss_and_trace(tape, batch, params)
            calls.append(batch.size)
            if len(calls) == 2:
                loss.value[...] = np.nan
            return loss, trace

        monkeypatch.setattr("trainer.loss_and_trace", poisoned)
        with pytest.raises(TrainingError, match="batch 1 of epoch 0"):
            fit(train, test, short_config)

    def test_overflow_inside_a_batch_aborts(self, planted_sets, short_config, monkeypatch):
        _, train, test = planted_sets

        def overflowing(tape, batch, params):
            raise NumericError("cin_layer produced a non-finite value")

        monkeypatch.setattr("trainer.loss_and_trace", overflowing)
        with pytest.raises(TrainingError, match="batch 0 of epoch 0.*cin_layer"):
            fit(train, test, short_config)


class TestSweep:
    def test_unknown_parameter(self, planted_config):
        with pytest.raises(ConfigError):
            with_param(planted_config, "dropout", 0.1)

    def test_with_param_updates_model(self, planted_config):
        assert with_param(planted_config, "num_heads", "4").model.num_heads == 4
        assert with_param(planted_config, "lr", 0.1).lr == 0.1

    def test_indivisible_heads_rejected(self, planted_config):
        with pytest.raises(ConfigError):
            with_param(planted_config, "num_heads", 3)

    def test_single_value(self, planted_sets, planted_config):
        _, train, test = planted_sets
        result = sweep("lr", [0.05], replace(planted_config, epochs=1), train, test)
        (row,) = result.rows
        assert row.param == "lr"
        assert row.epochs_run == 1
        assert math.isfinite(row.best_auc) and math.isfinite(row.best_logloss)

    def test_trend(self):
        rows = [SweepRow("embed_dim", v, a, 0.5, 1) for v, a in [(4, 0.8), (2, 0.7), (8, 0.81)]]
        assert auc_trend(rows) == "non-decreasing"
        rows.append(SweepRow("embed_dim", 6, 0.9, 0.5, 1))
        assert auc_trend(rows) == "mixed"

    def test_csv(self, tmp_path):
        path = tmp_path / "sweep.csv"
        write_sweep_csv(path, [SweepRow("lr", 0.05, 0.75, 0.5, 3)])
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(SWEEP_HEADER)
        assert lines[1] == "lr,0.05,0.75,0.5,3"


def test_compare_models(planted_sets, planted_config):
    _, train, test = planted_sets
    rows = compare_models(replace(planted_config, epochs=1), train, test)
    assert [row.model for row in rows] == ["none", "xdeepfm", "deepfm"]
    assert all(row.epochs_run == 1 for row in rows)


def test_metrics_csv_layout(tmp_path, planted_sets, short_config):
    _, train, test = planted_sets
    result = fit(train, test, short_config)
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, result.reports)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(METRICS_HEADER)
    assert len(lines) == 3
    assert all(line.endswith(",0.0") for line in lines[1:])
    write_metrics_csv(path, result.reports, record_wall_time=True)
    assert not path.read_text().splitlines()[1].endswith(",0.0")


@pytest.mark.slow
class TestLearning:
    def test_full_model_learns_planted_interaction(self, planted_sets, planted_config):
        _, train, test = planted_sets
        result = fit(train, test, planted_config)
        assert max(r.eval_auc for r in result.reports) >= 0.85

    def test_first_order_baseline_cannot(self, planted_sets, planted_config):
        _, train, test = planted_sets
        config = replace(planted_config, model=planted_config.model.with_ablation("linear"))
        result = fit(train, test, config)
        assert max(r.eval_auc for r in result.reports) <= 0.60

    def test_full_model_beats_xdeepfm_on_noisy_latent_pairs(self, factorized_sets,
                                                            factorized_config):
        _, train, test = factorized_sets
        full = fit(train, test, factorized_config)
        ablated = fit(train, test, replace(
            factorized_config, model=factorized_config.model.with_ablation("xdeepfm")))
        assert full.best_report.eval_logloss <= ablated.best_report.eval_logloss
