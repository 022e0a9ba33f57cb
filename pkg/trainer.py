"""
CTRForge Trainer
Mini-batch training with Adam and StepLR on the Logloss objective,
per-epoch held-out evaluation, best-epoch retention with optional early
stopping, checkpointing, and the grid sweep / ablation comparison runners.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from tqdm import tqdm

from data import iter_batches
from errors import ConfigError, NumericError, TrainingError
from metrics import ScoredSet, auc, logloss
from model import forward, init_params, loss_and_trace, save_checkpoint
from numerics import Adam, GradTape, steplr

logger = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "train_logloss", "eval_auc", "eval_logloss", "lr", "seconds")
SWEEP_HEADER = ("param", "value", "best_auc", "best_logloss", "epochs_run")
COMPARE_HEADER = ("model", "best_auc", "best_logloss", "epochs_run")
SWEEPABLE = {"lr": float, "embed_dim": int, "num_heads": int}


@dataclass
class EpochReport:
    epoch: int
    train_logloss: float
    eval_auc: float
    eval_logloss: float
    lr: float
    seconds: float


@dataclass
class TrainResult:
    """Best-epoch parameters, per-epoch reports and the final parameters."""

    params: object
    reports: list
    best_epoch: int | None
    final_params: object

    @property
    def best_report(self):
        if self.best_epoch is None:
            return None
        return next(r for r in self.reports if r.epoch == self.best_epoch)


class EarlyStopping:
    """
    Stops training when eval Logloss has not improved for `patience` epochs.
    """

    def __init__(self, patience):
        self.patience = patience
        self.best_loss = math.inf
        self.counter = 0
        self.should_stop = False

    def __call__(self, loss):
        if loss < self.best_loss:
            self.best_loss = loss
            self.counter = 0
        else:
            self.counter += 1
            if self.counter >= self.patience:
                self.should_stop = True
        return self.should_stop


# =============================================================================
# EVALUATION
# =============================================================================

def predict(encoded, params, batch_size, threads=1):
    """
    Click probabilities for an encoded set, in input order.
    With threads > 1 batches fan out to a worker pool over read-only params.

    Args:
        encoded: Batch holding the whole set
        params: ModelParams
        batch_size: Rows per forward pass
        threads: Worker thread cap

    Returns:
        np.ndarray: (n,) probabilities
    """
    chunks = list(iter_batches(encoded, batch_size))
    if not chunks:
        return np.zeros(0)

    def run(batch):
        return forward(batch, params)[0]

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads, thread_name_prefix="ctr-eval") as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(batch) for batch in chunks]
    return np.concatenate(parts)


def evaluate(test, params, config):
    """
    AUC and Logloss over the concatenated predictions of the test set.

    Returns:
        tuple: (auc, logloss)
    """
    scored = ScoredSet(predict(test, params, config.eval_batch, config.threads), test.labels)
    return auc(scored), logloss(scored)


# =============================================================================
# TRAINING
# =============================================================================

def fit(train, test, config, checkpoint_dir=None):
    """
    Train a fresh model and keep the parameters of the best eval-Logloss epoch.

    Args:
        train: Encoded training set (Batch)
        test: Encoded held-out set (Batch)
        config: TrainConfig
        checkpoint_dir: When given, best.ckpt and final.ckpt are written there

    Returns:
        TrainResult

    Raises:
        TrainingError: On a non-finite loss or gradient
    """
    config.validate()
    params = init_params(config.model)
    optimizer = Adam(params.parameters())
    stopper = EarlyStopping(config.early_stop_patience) if config.early_stop else None
    best = params.clone()
    best_epoch = None
    best_loss = math.inf
    reports = []
    num_batches = math.ceil(train.size / config.train_batch)

    for epoch in range(config.epochs):
        started = time.perf_counter()
        lr = steplr(config.lr, epoch, config.step_size, config.gamma)
        loss_sum = 0.0
        batches = iter_batches(train, config.train_batch, seed=[config.seed, epoch])
        progress = tqdm(batches, total=num_batches, desc=f"epoch {epoch}",
                        disable=not config.show_progress, leave=False)

        for index, batch in enumerate(progress):
            optimizer.zero_grad()
            tape = GradTape()
            try:
                loss, _ = loss_and_trace(tape, batch, params)
            except NumericError as exc:
                raise TrainingError(f"batch {index} of epoch {epoch}: {exc}") from exc
            value = loss.value.item()
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss at batch {index} of epoch {epoch}; "
                    f"parameter census {params.census()}"
                )
            tape.backward(loss)
            optimizer.step(lr)
            loss_sum += value * batch.size

        eval_auc, eval_loss = evaluate(test, params, config)
        report = EpochReport(epoch, loss_sum / train.size, eval_auc, eval_loss, lr,
                             time.perf_counter() - started)
        reports.append(report)
        logger.info("epoch %d: train %.5f | auc %.5f | logloss %.5f | lr %.6g",
                    epoch, report.train_logloss, eval_auc, eval_loss, lr)

        if eval_loss < best_loss:
            best_loss = eval_loss
            best_epoch = epoch
            best = params.clone()
            if checkpoint_dir:
                save_checkpoint(os.path.join(checkpoint_dir, "best.ckpt"), best)

        if stopper is not None and stopper(eval_loss):
            logger.info("early stop after epoch %d (best epoch %d)", epoch, best_epoch)
            break

    if checkpoint_dir:
        if best_epoch is None:
            save_checkpoint(os.path.join(checkpoint_dir, "best.ckpt"), best)
        save_checkpoint(os.path.join(checkpoint_dir, "final.ckpt"), params)
    return TrainResult(best, reports, best_epoch, params)


def _format(value):
    return repr(float(value))


def write_metrics_csv(path, reports, record_wall_time=False):
    """
    One row per epoch. `seconds` is written as 0 unless record_wall_time,
    so reruns of the same config produce identical bytes.
    """
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for r in reports:
            seconds = r.seconds if record_wall_time else 0.0
            writer.writerow([r.epoch, _format(r.train_logloss), _format(r.eval_auc),
                             _format(r.eval_logloss), _format(r.lr), _format(seconds)])


# =============================================================================
# SWEEPS AND COMPARISONS
# =============================================================================

@dataclass
class SweepRow:
    param: str
    value: float
    best_auc: float
    best_logloss: float
    epochs_run: int


@dataclass
class SweepResult:
    rows: list
    trend: str  # "non-decreasing" or "mixed" AUC as the value grows


def with_param(config, name, value):
    """
    Copy of a TrainConfig with one sweepable hyperparameter replaced.

    Raises:
        ConfigError: For a parameter outside SWEEPABLE
    """
    if name not in SWEEPABLE:
        raise ConfigError(f"cannot sweep '{name}', choose from {sorted(SWEEPABLE)}")
    try:
        value = SWEEPABLE[name](value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {name} value {value!r}") from exc
    if name == "lr":
        return replace(config, lr=value).validate()
    return replace(config, model=replace(config.model, **{name: value})).validate()


def best_metrics(result, test, config):
    best = result.best_report
    if best is None:
        return evaluate(test, result.params, config)
    return best.eval_auc, best.eval_logloss


def auc_trend(rows):
    ordered = sorted(rows, key=lambda row: row.value)
    aucs = [row.best_auc for row in ordered]
    return "non-decreasing" if all(b >= a for a, b in zip(aucs, aucs[1:])) else "mixed"


def sweep(param_name, values, base_config, train, test):
    """
    Train one model per value with shared seed and data.

    Args:
        param_name: One of SWEEPABLE
        values: Grid values
        base_config: TrainConfig shared by every run
        train, test: Encoded sets

    Returns:
        SweepResult
    """
    configs = [with_param(base_config, param_name, value) for value in values]
    rows = []
    for value, config in zip(values, configs):
        result = fit(train, test, config)
        best_auc, best_loss = best_metrics(result, test, config)
        rows.append(SweepRow(param_name, SWEEPABLE[param_name](value), best_auc, best_loss,
                             len(result.reports)))
        logger.info("sweep %s=%s: auc %.5f logloss %.5f", param_name, value, best_auc, best_loss)
    trend = auc_trend(rows)
    logger.info("sweep %s AUC trend: %s", param_name, trend)
    return SweepResult(rows, trend)


def write_sweep_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        for row in rows:
            writer.writerow([row.param, row.value, _format(row.best_auc),
                             _format(row.best_logloss), row.epochs_run])


@dataclass
class CompareRow:
    model: str
    best_auc: float
    best_logloss: float
    epochs_run: int


def compare_models(base_config, train, test, ablations=("none", "xdeepfm", "deepfm")):
    """
    Train each ablation preset under the same seed and data order.

    Returns:
        list: CompareRow per preset, in the given order
    """
    rows = []
    for name in ablations:
        config = replace(base_config, model=base_config.model.with_ablation(name)).validate()
        result = fit(train, test, config)
        best_auc, best_loss = best_metrics(result, test, config)
        rows.append(CompareRow(name, best_auc, best_loss, len(result.reports)))
        logger.info("compare %s: auc %.5f logloss %.5f", name, best_auc, best_loss)
    return rows


def write_compare_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(COMPARE_HEADER)
        for row in rows:
            writer.writerow([row.model, _format(row.best_auc), _format(row.best_logloss),
                             row.epochs_run])
