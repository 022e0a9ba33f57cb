"""
CTRForge Configuration
Central configuration for data handling, model shape, and training.
Contains the experimental defaults, numerical guards, and the typed
configuration objects built from them.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace

from errors import ConfigError

APP_NAME = "CTRForge"
APP_VERSION = "1.0.0"


# =============================================================================
# DATA CONFIGURATION
# =============================================================================

NUM_DENSE_FIELDS = 13        # Criteo integer columns I1..I13
NUM_CAT_FIELDS = 26          # Criteo categorical columns C1..C26
MIN_FREQ = 10                # Tokens rarer than this map to the OOV index 0
BUCKET_CAP = 1_000_000       # Per-field cap on vocabulary indices (rest are hashed)
SAMPLE_SIZE = 500_000        # Stratified training subsample drawn from the full dump
SPLIT_RATIO = 0.8            # Train share of the 8:2 split
MAX_SKIP_FRACTION = 0.01     # More malformed lines than this aborts ingestion

VOCAB_HEADER = "CTRVOCAB v1"


# =============================================================================
# MODEL CONFIGURATION
# =============================================================================

EMBED_DIM = 8                # Embedding width D (also the attention width)
NUM_HEADS = 2                # Attention heads h, head_dim = D / h
CIN_LAYER_SIZES = (128, 128) # H_1..H_L of the compressed interaction network
DNN_LAYER_SIZES = (256, 128) # Two-layer decreasing DNN
INIT_STD = 0.01              # Std of the normal init for embeddings and weights
LN_EPS = 1e-5                # Layer-norm variance floor
LOGIT_CLAMP = 30.0           # Logits are clamped to [-30, 30] before the sigmoid
PROB_EPS = 1e-7              # Probabilities are clamped to [1e-7, 1-1e-7] inside logs

FIRST_ORDER_HEADS = ("FM", "LR")
FUSION_WEIGHTS = ("w_fm", "w_cin", "w_dnn")

# Ablation presets: (use_attention, first_order_head, frozen fusion weights)
ABLATIONS = {
    "none": (True, "FM", ()),
    "xdeepfm": (False, "LR", ()),
    "deepfm": (False, "FM", ("w_cin",)),
    "linear": (True, "LR", ("w_cin", "w_dnn")),
}


# =============================================================================
# TRAINING CONFIGURATION
# =============================================================================

LEARNING_RATE = 0.05
EPOCHS = 100
TRAIN_BATCH = 2048
EVAL_BATCH = 4096
STEP_SIZE = 30               # StepLR period in epochs
GAMMA = 0.5                  # StepLR decay factor
EARLY_STOP_PATIENCE = 5      # Epochs without eval-Logloss improvement
SEED = 2024

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Default grids for the sweep runner
LR_GRID = (0.5, 0.1, 0.08, 0.06, 0.05, 0.001, 0.005, 0.0001)
EMBED_DIM_GRID = (2, 4, 6, 8)
HEADS_GRID = (1, 2, 4, 8)


# =============================================================================
# GRADIENT CHECK CONFIGURATION
# =============================================================================

GRADCHECK_H = 1e-5
GRADCHECK_TOL = 1e-4
GRADCHECK_INIT_STD = 0.3     # Larger init keeps every gradient well above rounding noise
GRADCHECK_REL_FLOOR = 1e-6   # Denominator floor of the relative error
TINY_CAT_VOCAB = (5, 5, 5, 5)
TINY_DENSE_FIELDS = 2
TINY_EMBED_DIM = 4
TINY_HEADS = 2
TINY_CIN = (3, 3)
TINY_DNN = (8, 4)
TINY_BATCH = 4


# =============================================================================
# RUNTIME
# =============================================================================

THREADS_ENV = "CTR_FORGE_THREADS"
DEFAULT_OUT_DIR = "runs/latest"


def _positive(name, value):
    if value <= 0:
        raise ConfigError(f"{name} must be positive, got {value}")


@dataclass(frozen=True)
class ModelConfig:
    """
    Shape and ablation settings of the network.
    Every field is integer-encodable so it fits the checkpoint config block.
    """

    cat_vocab_sizes: tuple[int, ...] = ()
    num_dense_fields: int = NUM_DENSE_FIELDS
    embed_dim: int = EMBED_DIM
    num_heads: int = NUM_HEADS
    cin_layer_sizes: tuple[int, ...] = CIN_LAYER_SIZES
    dnn_layer_sizes: tuple[int, ...] = DNN_LAYER_SIZES
    use_attention: bool = True
    first_order_head: str = "FM"
    frozen: tuple[str, ...] = ()
    seed: int = SEED

    @property
    def num_cat_fields(self):
        return len(self.cat_vocab_sizes)

    @property
    def num_fields(self):
        return self.num_cat_fields + self.num_dense_fields

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads

    def validate(self):
        """
        Check sizes and attention width.

        Raises:
            ConfigError: On any inconsistent setting
        """
        _positive("embed_dim", self.embed_dim)
        _positive("num_heads", self.num_heads)
        if self.num_fields <= 0:
            raise ConfigError("model needs at least one field")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"num_heads={self.num_heads} does not divide embed_dim={self.embed_dim}"
            )
        if any(size < 0 for size in self.cat_vocab_sizes) or self.num_dense_fields < 0:
            raise ConfigError("field counts must be non-negative")
        for size in self.cin_layer_sizes + self.dnn_layer_sizes:
            _positive("layer size", size)
        if not self.cin_layer_sizes or not self.dnn_layer_sizes:
            raise ConfigError("CIN and DNN need at least one layer each")
        if self.first_order_head not in FIRST_ORDER_HEADS:
            raise ConfigError(f"first_order_head must be one of {FIRST_ORDER_HEADS}")
        unknown = set(self.frozen) - set(FUSION_WEIGHTS)
        if unknown:
            raise ConfigError(f"unknown frozen weights: {sorted(unknown)}")
        return self

    def with_ablation(self, name):
        """
        Return a copy configured as one of the ABLATIONS presets.

        Args:
            name: Preset name (none, xdeepfm, deepfm, linear)
        """
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation '{name}', choose from {sorted(ABLATIONS)}")
        use_attention, head, frozen = ABLATIONS[name]
        return replace(self, use_attention=use_attention, first_order_head=head, frozen=frozen)


@dataclass(frozen=True)
class TrainConfig:
    """Every hyperparameter of a training run, defaults as in the experiments."""

    lr: float = LEARNING_RATE
    epochs: int = EPOCHS
    train_batch: int = TRAIN_BATCH
    eval_batch: int = EVAL_BATCH
    split_ratio: float = SPLIT_RATIO
    step_size: int = STEP_SIZE
    gamma: float = GAMMA
    early_stop: bool = False
    early_stop_patience: int = EARLY_STOP_PATIENCE
    seed: int = SEED
    sample_size: int = SAMPLE_SIZE
    subsample_before_split: bool = True
    min_freq: int = MIN_FREQ
    bucket_cap: int = BUCKET_CAP
    threads: int = 1
    record_wall_time: bool = False
    show_progress: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    data_path: str | None = None
    synthetic: str | None = None
    out_dir: str = DEFAULT_OUT_DIR

    def validate(self):
        _positive("lr", self.lr)
        _positive("train_batch", self.train_batch)
        _positive("eval_batch", self.eval_batch)
        _positive("step_size", self.step_size)
        _positive("min_freq", self.min_freq)
        _positive("bucket_cap", self.bucket_cap)
        _positive("threads", self.threads)
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError(f"split_ratio must lie in (0, 1), got {self.split_ratio}")
        self.model.validate()
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        """
        Rebuild a TrainConfig from `to_dict` output (e.g. a run manifest).

        Raises:
            ConfigError: On unknown keys, a non-mapping model block or bad values
        """
        values = dict(values)
        model = values.pop("model", {})
        if not isinstance(model, dict):
            raise ConfigError("config 'model' must be a mapping")
        model = dict(model)
        unknown = set(values) - {f.name for f in fields(cls)}
        unknown |= {f"model.{k}" for k in set(model) - {f.name for f in fields(ModelConfig)}}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            for key in ("cat_vocab_sizes", "cin_layer_sizes", "dnn_layer_sizes", "frozen"):
                if key in model:
                    model[key] = tuple(model[key])
            return cls(model=ModelConfig(**model), **values).validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config values: {exc}") from exc


# =============================================================================
# CONFIG FILE AND OVERRIDES
# =============================================================================

def _parse_bool(text):
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_sizes(text):
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    return tuple(int(part) for part in str(text).replace(" ", "").split(",") if part)


def _parse_optional_str(text):
    text = str(text).strip()
    return text or None


# key -> (section, attribute, parser); section is "train" or "model"
CONFIG_KEYS = {
    "lr": ("train", "lr", float),
    "epochs": ("train", "epochs", int),
    "train_batch": ("train", "train_batch", int),
    "eval_batch": ("train", "eval_batch", int),
    "split_ratio": ("train", "split_ratio", float),
    "step_size": ("train", "step_size", int),
    "gamma": ("train", "gamma", float),
    "early_stop": ("train", "early_stop", _parse_bool),
    "early_stop_patience": ("train", "early_stop_patience", int),
    "patience": ("train", "early_stop_patience", int),
    "seed": ("train", "seed", int),
    "sample_size": ("train", "sample_size", int),
    "subsample_before_split": ("train", "subsample_before_split", _parse_bool),
    "min_freq": ("train", "min_freq", int),
    "bucket_cap": ("train", "bucket_cap", int),
    "threads": ("train", "threads", int),
    "record_wall_time": ("train", "record_wall_time", _parse_bool),
    "show_progress": ("train", "show_progress", _parse_bool),
    "data": ("train", "data_path", _parse_optional_str),
    "data_path": ("train", "data_path", _parse_optional_str),
    "synthetic": ("train", "synthetic", _parse_optional_str),
    "out": ("train", "out_dir", str),
    "out_dir": ("train", "out_dir", str),
    "embed_dim": ("model", "embed_dim", int),
    "num_heads": ("model", "num_heads", int),
    "heads": ("model", "num_heads", int),
    "cin_layers": ("model", "cin_layer_sizes", _parse_sizes),
    "cin_layer_sizes": ("model", "cin_layer_sizes", _parse_sizes),
    "dnn_layers": ("model", "dnn_layer_sizes", _parse_sizes),
    "dnn_layer_sizes": ("model", "dnn_layer_sizes", _parse_sizes),
    "use_attention": ("model", "use_attention", _parse_bool),
    "first_order_head": ("model", "first_order_head", lambda v: str(v).strip().upper()),
}


def read_config_file(path):
    """
    Read a flat `key = value` config file.

    Args:
        path: Path of the config file

    Returns:
        dict: Raw string values keyed by config key

    Raises:
        ConfigError: When the file is missing or a line has no '='
    """
    try:
        with open(path, "r", encoding="utf-8") as handle:
            lines = handle.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc

    values = {}
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{number}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def apply_overrides(base, overrides):
    """
    Apply raw key/value overrides on top of a TrainConfig.
    The `ablation` key is applied before explicit model keys so that,
    e.g., `ablation = xdeepfm` plus `use_attention = true` keeps attention.

    Args:
        base: Starting TrainConfig
        overrides: dict of key -> raw value (strings or already-typed values)

    Returns:
        TrainConfig: New validated config

    Raises:
        ConfigError: On unknown keys or unparsable values
    """
    train_updates = {}
    model = base.model
    overrides = dict(overrides)

    ablation = overrides.pop("ablation", None)
    if ablation is not None:
        model = model.with_ablation(str(ablation).strip())

    model_updates = {}
    for key, raw in overrides.items():
        if raw is None:
            continue
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key '{key}'")
        section, attribute, parser = CONFIG_KEYS[key]
        try:
            value = parser(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for '{key}': {raw!r} ({exc})") from exc
        if section == "model":
            model_updates[attribute] = value
        else:
            train_updates[attribute] = value

    if "seed" in train_updates:
        model_updates.setdefault("seed", train_updates["seed"])
    model = replace(model, **model_updates)
    return replace(base, model=model, **train_updates).validate()


def resolve_config(config_path=None, overrides=None, base=None):
    """
    Resolve defaults < config file < explicit overrides.

    Args:
        config_path: Optional path of a `key = value` file
        overrides: dict of explicitly given flag values (None entries ignored)
        base: Starting config (defaults when omitted)

    Returns:
        TrainConfig: Fully materialised config
    """
    config = base or TrainConfig()
    if config_path:
        config = apply_overrides(config, read_config_file(config_path))
    if overrides:
        config = apply_overrides(config, {k: v for k, v in overrides.items() if v is not None})
    return config.validate()


def threads_from_env(default=1):
    """
    Read the worker-thread cap from CTR_FORGE_THREADS.

    Returns:
        int: Thread count (at least 1)
    """
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc


def tiny_model_config(seed=SEED):
    """Small config used by the gradient check and the unit tests."""
    return ModelConfig(
        cat_vocab_sizes=TINY_CAT_VOCAB,
        num_dense_fields=TINY_DENSE_FIELDS,
        embed_dim=TINY_EMBED_DIM,
        num_heads=TINY_HEADS,
        cin_layer_sizes=TINY_CIN,
        dnn_layer_sizes=TINY_DNN,
        seed=seed,
    ).validate()
