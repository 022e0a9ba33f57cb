#!/usr/bin/env python3
"""
CTRForge Command Line.
Binds data, model, trainer and metrics into reproducible runs:
train, eval, sweep, gradcheck, compare and stats.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone


from config import (
    APP_NAME,
    APP_VERSION,
    DEFAULT_OUT_DIR,
    EMBED_DIM_GRID,
    EVAL_BATCH,
    GRADCHECK_H,
    GRADCHECK_TOL,
    HEADS_GRID,
    LR_GRID,
    NUM_CAT_FIELDS,
    NUM_DENSE_FIELDS,
    SEED,
    TINY_BATCH,
    TrainConfig,
    resolve_config,
    threads_from_env,
    tiny_model_config,
)
from data import (
    SYNTHETIC_KINDS,
    SyntheticSpec,
    describe,
    encode,
    format_record,
    load_vocab,
    make_synthetic,
    prepare,
    read_tsv,
    save_vocab,
    write_tsv,
)
from errors import (
    EXIT_FAILED_CHECK,
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_USAGE,
    CTRForgeError,
    ConfigError,
    IngestionError,
)
from model import check_gradients, load_checkpoint, random_batch
from trainer import (
    SWEEPABLE,
    best_metrics,
    compare_models,
    evaluate,
    fit,
    sweep,
    with_param,
    write_compare_csv,
    write_metrics_csv,
    write_sweep_csv,
)
from utils import file_sha256, text_sha256

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
DEFAULT_GRIDS = {"lr": LR_GRID, "embed_dim": EMBED_DIM_GRID, "num_heads": HEADS_GRID}

# flag attribute -> config key
OVERRIDE_FLAGS = {
    "data": "data",
    "synthetic": "synthetic",
    "out": "out",
    "seed": "seed",
    "lr": "lr",
    "epochs": "epochs",
    "embed_dim": "embed_dim",
    "heads": "heads",
    "cin_layers": "cin_layers",
    "dnn_layers": "dnn_layers",
    "ablation": "ablation",
    "sample_size": "sample_size",
    "train_batch": "train_batch",
    "eval_batch": "eval_batch",
    "early_stop": "early_stop",
    "patience": "patience",
    "record_time": "record_wall_time",
    "progress": "show_progress",
}


# =============================================================================
# HELPERS
# =============================================================================

def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _overrides(args):
    return {key: getattr(args, attr, None) for attr, key in OVERRIDE_FLAGS.items()
            if getattr(args, attr, None) is not None}


def _read_manifest(path):
    """
    Load a run manifest and check its shape.

    Raises:
        ConfigError: When the file is unreadable or lacks a `config` mapping
    """
    try:
        with open(path, "r", encoding="utf-8") as handle:
            manifest = json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(manifest, dict) or not isinstance(manifest.get("config"), dict):
        raise ConfigError(f"manifest {path} has no 'config' mapping")
    if not isinstance(manifest.get("data", {}), dict):
        raise ConfigError(f"manifest {path}: 'data' must be a mapping")
    return manifest


def _resolve(args):
    """Defaults (or a manifest) < config file < flags, plus the thread cap."""
    base = None
    if getattr(args, "manifest", None):
        base = TrainConfig.from_dict(_read_manifest(args.manifest)["config"])
    config = resolve_config(args.config, _overrides(args), base)
    return replace(config, threads=threads_from_env(config.threads)).validate()


def _data_setting(args, name, default):
    """Flag value, else the value recorded in --manifest, else the default."""
    value = getattr(args, name, None)
    if value is not None:
        return value
    if getattr(args, "manifest", None):
        recorded = _read_manifest(args.manifest).get("data", {}).get(name)
        if recorded is not None:
            return recorded
    return default


def _load_records(config, args):
    """
    Read the TSV named by the config or generate a synthetic set.

    Returns:
        tuple: (records, data descriptor for the manifest)
    """
    if config.data_path:
        if not os.path.isfile(config.data_path):
            raise IngestionError(f"data file not found: {config.data_path}")
        dense_fields = _data_setting(args, "dense_fields", NUM_DENSE_FIELDS)
        cat_fields = _data_setting(args, "cat_fields", NUM_CAT_FIELDS)
        records = read_tsv(config.data_path, dense_fields, cat_fields)
        return records, {"source": config.data_path, "sha256": file_sha256(config.data_path),
                         "dense_fields": dense_fields, "cat_fields": cat_fields}
    if config.synthetic:
        if config.synthetic not in SYNTHETIC_KINDS:
            raise ConfigError(f"unknown synthetic generator '{config.synthetic}', "
                              f"choose from {list(SYNTHETIC_KINDS)}")
        num_records = _data_setting(args, "n", SyntheticSpec.num_records)
        spec = SyntheticSpec(kind=config.synthetic, num_records=num_records, seed=config.seed)
        records = make_synthetic(spec)
        text = "\n".join(format_record(r) for r in records)
        return records, {"source": spec.describe(), "sha256": text_sha256(text),
                         "n": num_records}
    raise ConfigError("give --data <tsv> or --synthetic <kind>")


def _check_manifest_data(args, descriptor):
    if not getattr(args, "manifest", None):
        return
    expected = _read_manifest(args.manifest).get("data", {}).get("sha256")
    if expected and expected != descriptor["sha256"]:
        raise IngestionError(f"data checksum differs from {args.manifest}")


def _prepare_sets(config, records):
    """Split, build the vocabulary, size the model to it and encode both sets."""
    prepared = prepare(records, config)
    num_dense = len(records[0].dense) if records else 0
    model = replace(config.model, cat_vocab_sizes=tuple(prepared.vocab.bucket_counts),
                    num_dense_fields=num_dense)
    config = replace(config, model=model).validate()
    return config, prepared, encode(prepared.train, prepared.vocab), \
        encode(prepared.test, prepared.vocab)


def _parse_values(text, name):
    parser = SWEEPABLE[name]
    try:
        return [parser(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --values for {name}: {text!r}") from exc


def _print_metrics(auc_value, loss_value):
    print(f"auc={auc_value!r} logloss={loss_value!r}")


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_train(args):
    """Split, build the vocabulary, fit, evaluate and write the run directory."""
    started = _now()
    config = _resolve(args)
    records, descriptor = _load_records(config, args)
    _check_manifest_data(args, descriptor)
    config, prepared, train_set, test_set = _prepare_sets(config, records)

    os.makedirs(config.out_dir, exist_ok=True)
    print(f"🚀 Training on {train_set.size} examples, evaluating on {test_set.size}")
    result = fit(train_set, test_set, config, checkpoint_dir=config.out_dir)

    save_vocab(os.path.join(config.out_dir, "vocab.txt"), prepared.vocab)
    write_tsv(os.path.join(config.out_dir, "test.tsv"), prepared.test)
    write_metrics_csv(os.path.join(config.out_dir, "metrics.csv"), result.reports,
                      config.record_wall_time)

    manifest = {
        "tool": APP_NAME,
        "version": APP_VERSION,
        "seed": config.seed,
        "config": config.to_dict(),
        "data": descriptor,
        "started": started,
        "finished": _now(),
    }
    with open(os.path.join(config.out_dir, MANIFEST_NAME), "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)

    auc_value, loss_value = best_metrics(result, test_set, config)
    print(f"✅ Run written to {config.out_dir} (best epoch {result.best_epoch})")
    _print_metrics(auc_value, loss_value)
    return EXIT_OK


def cmd_eval(args):
    """Evaluate a checkpoint and vocabulary on a TSV file."""
    run_dir = args.out or DEFAULT_OUT_DIR
    checkpoint = args.checkpoint or os.path.join(run_dir, "best.ckpt")
    vocab_path = args.vocab or os.path.join(run_dir, "vocab.txt")
    data_path = args.data or os.path.join(run_dir, "test.tsv")

    params = load_checkpoint(checkpoint)
    vocab = load_vocab(vocab_path, params.config.num_cat_fields)
    if not os.path.isfile(data_path):
        raise IngestionError(f"data file not found: {data_path}")
    records = read_tsv(data_path, params.config.num_dense_fields, params.config.num_cat_fields)

    eval_config = TrainConfig(eval_batch=args.eval_batch or EVAL_BATCH,
                              threads=threads_from_env(1))
    auc_value, loss_value = evaluate(encode(records, vocab), params, eval_config)
    _print_metrics(auc_value, loss_value)
    return EXIT_OK


def cmd_sweep(args):
    """Train one model per grid value and write sweep.csv."""
    if args.param not in SWEEPABLE:
        raise ConfigError(f"cannot sweep '{args.param}', choose from {sorted(SWEEPABLE)}")
    values = _parse_values(args.values, args.param) if args.values else list(DEFAULT_GRIDS[args.param])

    config = _resolve(args)
    for value in values:
        with_param(config, args.param, value)
    records, _ = _load_records(config, args)
    config, _, train_set, test_set = _prepare_sets(config, records)

    print(f"🔁 Sweeping {args.param} over {values}")
    result = sweep(args.param, values, config, train_set, test_set)
    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, "sweep.csv")
    write_sweep_csv(path, result.rows)
    for row in result.rows:
        print(f"  {row.param}={row.value}: auc={row.best_auc:.5f} logloss={row.best_logloss:.5f}")
    print(f"✅ {len(result.rows)} rows written to {path} (AUC trend: {result.trend})")
    return EXIT_OK


def cmd_compare(args):
    """Train the ablation presets under one seed and write compare.csv."""
    ablations = [name.strip() for name in args.models.split(",") if name.strip()]
    config = _resolve(args)
    for name in ablations:
        config.model.with_ablation(name)
    records, _ = _load_records(config, args)
    config, _, train_set, test_set = _prepare_sets(config, records)

    rows = compare_models(config, train_set, test_set, ablations)
    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, "compare.csv")
    write_compare_csv(path, rows)
    for row in rows:
        print(f"  {row.model}: auc={row.best_auc:.5f} logloss={row.best_logloss:.5f}")
    print(f"✅ Comparison written to {path}")
    return EXIT_OK


def cmd_gradcheck(args):
    """Finite-difference check on the tiny config; exit 1 when it fails."""
    seed = SEED if args.seed is None else args.seed
    config = tiny_model_config(seed)
    batch = random_batch(config, TINY_BATCH, seed)
    report = check_gradients(config, batch, h=args.h, tol=args.tol,
                             corrupt=args.corrupt)
    print(f"max relative error: {report.max_rel_error:.3e} ({report.worst_parameter})")
    if report.passed:
        print(f"✅ Gradient check passed (tol {args.tol:g})")
        return EXIT_OK
    print(f"❌ Gradient check failed (tol {args.tol:g})")
    return EXIT_FAILED_CHECK


def cmd_stats(args):
    """Print label balance and per-field statistics."""
    config = _resolve(args)
    records, descriptor = _load_records(config, args)
    print(f"📊 {descriptor['source']}")
    for line in describe(records).lines():
        print(f"  {line}")
    return EXIT_OK


# =============================================================================
# ARGUMENT PARSING
# =============================================================================

def _add_data_flags(parser):
    parser.add_argument("--data", help="Criteo-format TSV file")
    parser.add_argument("--synthetic", help=f"synthetic generator ({', '.join(SYNTHETIC_KINDS)})")
    parser.add_argument("--n", type=int,
                        help=f"synthetic record count (default {SyntheticSpec.num_records})")
    parser.add_argument("--dense-fields", type=int,
                        help=f"TSV integer columns (default {NUM_DENSE_FIELDS})")
    parser.add_argument("--cat-fields", type=int,
                        help=f"TSV categorical columns (default {NUM_CAT_FIELDS})")
    parser.add_argument("--config", help="flat 'key = value' config file")
    parser.add_argument("--out", help="run directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--sample-size", type=int)


def _add_training_flags(parser):
    parser.add_argument("--manifest", help="re-run from a run manifest")
    parser.add_argument("--lr", type=float)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--embed-dim", type=int)
    parser.add_argument("--heads", type=int)
    parser.add_argument("--cin-layers", help="comma-separated CIN sizes")
    parser.add_argument("--dnn-layers", help="comma-separated DNN sizes")
    parser.add_argument("--ablation", help="none, xdeepfm, deepfm or linear")
    parser.add_argument("--train-batch", type=int)
    parser.add_argument("--eval-batch", type=int)
    parser.add_argument("--early-stop", action="store_true", default=None)
    parser.add_argument("--patience", type=int)
    parser.add_argument("--record-time", action="store_true", default=None,
                        help="write wall time into metrics.csv")
    parser.add_argument("--progress", action="store_true", default=None,
                        help="show per-batch progress bars")


def build_parser():
    parser = argparse.ArgumentParser(prog="ctr-forge", description=f"{APP_NAME} {APP_VERSION}")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model and write a run directory")
    _add_data_flags(train)
    _add_training_flags(train)
    train.set_defaults(handler=cmd_train)

    evaluate_cmd = sub.add_parser("eval", help="evaluate a checkpoint on a TSV file")
    evaluate_cmd.add_argument("--out", help="run directory holding best.ckpt and vocab.txt")
    evaluate_cmd.add_argument("--checkpoint")
    evaluate_cmd.add_argument("--vocab")
    evaluate_cmd.add_argument("--data")
    evaluate_cmd.add_argument("--eval-batch", type=int)
    evaluate_cmd.set_defaults(handler=cmd_eval)

    sweep_cmd = sub.add_parser("sweep", help="grid sweep over one hyperparameter")
    _add_data_flags(sweep_cmd)
    _add_training_flags(sweep_cmd)
    sweep_cmd.add_argument("--param", required=True, help=f"one of {sorted(SWEEPABLE)}")
    sweep_cmd.add_argument("--values", help="comma-separated grid values")
    sweep_cmd.set_defaults(handler=cmd_sweep)

    compare = sub.add_parser("compare", help="train ablation presets side by side")
    _add_data_flags(compare)
    _add_training_flags(compare)
    compare.add_argument("--models", default="none,xdeepfm,deepfm")
    compare.set_defaults(handler=cmd_compare)

    gradcheck = sub.add_parser("gradcheck", help="finite-difference gradient check")
    gradcheck.add_argument("--seed", type=int)
    gradcheck.add_argument("--tol", type=float, default=GRADCHECK_TOL)
    gradcheck.add_argument("--h", type=float, default=GRADCHECK_H)
    gradcheck.add_argument("--corrupt", action="store_true",
                           help="negate one analytic gradient (harness self-test)")
    gradcheck.set_defaults(handler=cmd_gradcheck)

    stats = sub.add_parser("stats", help="print dataset statistics")
    _add_data_flags(stats)
    stats.set_defaults(handler=cmd_stats)
    return parser


def main(argv=None):
    """
    Parse arguments, run one command and map errors to exit codes.

    Returns:
        int: 0 ok, 1 failed check, 2 usage/input error, 3 runtime/numeric error
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except CTRForgeError as exc:
        print(f"❌ {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("\n🛑 Interrupted", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
