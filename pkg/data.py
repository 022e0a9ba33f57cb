"""
CTRForge Data Module
Criteo-format ingestion, categorical vocabularies with hashing and OOV,
dense-feature transform, stratified sampling, the 8:2 split, mini-batch
assembly, and synthetic generators for desk-scale runs.
"""

from __future__ import annotations

import hashlib
import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from config import (
    BUCKET_CAP,
    MAX_SKIP_FRACTION,
    MIN_FREQ,
    NUM_CAT_FIELDS,
    NUM_DENSE_FIELDS,
    SEED,
    SPLIT_RATIO,
    VOCAB_HEADER,
)
from errors import CheckpointError, IngestionError, UsageError
from numerics import sigmoid

logger = logging.getLogger(__name__)


class CriteoRecord(NamedTuple):
    """One labelled example; None marks a missing slot."""

    label: int
    dense: tuple[Optional[int], ...]
    categorical: tuple[Optional[str], ...]


# =============================================================================
# TSV PARSING
# =============================================================================

class TsvReader:
    """
    Parses `<label>\\t<I1..In>\\t<C1..Cm>` lines.
    Malformed lines are counted and skipped; too many abort ingestion.
    """

    def __init__(self, num_dense=NUM_DENSE_FIELDS, num_cat=NUM_CAT_FIELDS,
                 max_skip_fraction=MAX_SKIP_FRACTION):
        """
        Args:
            num_dense: Integer columns per line
            num_cat: Categorical columns per line
            max_skip_fraction: Highest tolerated share of malformed lines
        """
        self.num_dense = num_dense
        self.num_cat = num_cat
        self.max_skip_fraction = max_skip_fraction
        self.total = 0
        self.skipped = 0

    def parse_line(self, line):
        """
        Parse one line without its newline.

        Returns:
            CriteoRecord, or None when the line is malformed
        """
        fields = line.split("\t")
        if len(fields) != 1 + self.num_dense + self.num_cat:
            return None
        if fields[0] not in ("0", "1"):
            return None
        try:
            dense = tuple(int(v) if v else None for v in fields[1:1 + self.num_dense])
        except ValueError:
            return None
        categorical = tuple(v if v else None for v in fields[1 + self.num_dense:])
        return CriteoRecord(int(fields[0]), dense, categorical)

    def parse(self, lines):
        """
        Parse a stream of lines.

        Args:
            lines: Iterable of text lines (trailing newlines allowed)

        Returns:
            list: CriteoRecord per well-formed line

        Raises:
            IngestionError: When more than max_skip_fraction of lines are malformed
        """
        records = []
        for raw in lines:
            line = raw.rstrip("\r\n")
            if not line:
                continue
            self.total += 1
            record = self.parse_line(line)
            if record is None:
                self.skipped += 1
                continue
            records.append(record)

        if self.skipped:
            logger.warning("skipped %d malformed of %d lines", self.skipped, self.total)
        if self.total and self.skipped / self.total > self.max_skip_fraction:
            raise IngestionError(
                f"{self.skipped} of {self.total} lines malformed "
                f"(limit {self.max_skip_fraction:.1%})"
            )
        return records


def parse_tsv(lines, num_dense=NUM_DENSE_FIELDS, num_cat=NUM_CAT_FIELDS):
    return TsvReader(num_dense, num_cat).parse(lines)


def read_tsv(path, num_dense=NUM_DENSE_FIELDS, num_cat=NUM_CAT_FIELDS):
    """
    Parse a TSV file from disk.

    Raises:
        IngestionError: If the file cannot be opened
    """
    try:
        with open(path, "r", encoding="utf-8") as handle:
            records = parse_tsv(handle, num_dense, num_cat)
    except OSError as exc:
        raise IngestionError(f"cannot read data file {path}: {exc}") from exc
    logger.info("read %d records from %s", len(records), path)
    return records


def format_record(record):
    """Serialise a record back into one TSV line (no newline)."""
    parts = [str(record.label)]
    parts += ["" if v is None else str(v) for v in record.dense]
    parts += ["" if v is None else v for v in record.categorical]
    return "\t".join(parts)


def write_tsv(path, records):
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(format_record(record) + "\n")


def transform_dense(raw):
    """Missing or negative -> 0.0, otherwise log(1 + raw)."""
    if raw is None or raw < 0:
        return 0.0
    return math.log1p(raw)


# =============================================================================
# VOCABULARY
# =============================================================================

def hash_bucket(token, bucket_cap):
    """Stable 64-bit BLAKE2b hash of the token folded into [1, bucket_cap]."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % bucket_cap + 1


class FeatureVocab:
    """
    Per-field token -> index maps. Index 0 is reserved for OOV and missing.
    The bucket count of a field is its largest assigned index.
    """

    def __init__(self, maps):
        self.maps = [dict(m) for m in maps]
        self.bucket_counts = tuple(max(m.values(), default=0) for m in self.maps)

    @property
    def num_fields(self):
        return len(self.maps)

    def lookup(self, field, token):
        if token is None:
            return 0
        return self.maps[field].get(token, 0)

    def __eq__(self, other):
        return isinstance(other, FeatureVocab) and self.maps == other.maps

    def __repr__(self):
        return f"FeatureVocab(fields={self.num_fields}, buckets={self.bucket_counts})"


def build_vocab(records, min_freq=MIN_FREQ, bucket_cap=BUCKET_CAP):
    """
    Build per-field vocabularies from training records only.
    Tokens seen at least min_freq times are ranked by descending frequency,
    ties broken lexicographically; the first bucket_cap get indices
    1..bucket_cap and the rest are hashed into the same range.

    Args:
        records: Training-partition records
        min_freq: Minimum token count to earn an index
        bucket_cap: Largest index per field

    Returns:
        FeatureVocab
    """
    num_fields = len(records[0].categorical) if records else 0
    counters = [Counter() for _ in range(num_fields)]
    for record in records:
        for field, token in enumerate(record.categorical):
            if token is not None:
                counters[field][token] += 1

    maps = []
    for field, counter in enumerate(counters):
        kept = sorted((t for t, c in counter.items() if c >= min_freq),
                      key=lambda t: (-counter[t], t))
        mapping = {token: rank + 1 for rank, token in enumerate(kept[:bucket_cap])}
        for token in kept[bucket_cap:]:
            mapping[token] = hash_bucket(token, bucket_cap)
        if len(kept) > bucket_cap:
            logger.debug("field %d: %d tokens hashed into %d buckets",
                         field, len(kept) - bucket_cap, bucket_cap)
        maps.append(mapping)
    return FeatureVocab(maps)


def save_vocab(path, vocab):
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(VOCAB_HEADER + "\n")
        for field, mapping in enumerate(vocab.maps):
            for token, index in sorted(mapping.items(), key=lambda item: (item[1], item[0])):
                handle.write(f"{field}\t{token}\t{index}\n")


def load_vocab(path, num_fields=None):
    """
    Load a `CTRVOCAB v1` vocabulary file.

    Args:
        path: Vocabulary file
        num_fields: Field count (inferred from the largest field id when omitted)

    Raises:
        CheckpointError: On a missing header or malformed line
    """
    try:
        with open(path, "r", encoding="utf-8") as handle:
            lines = handle.read().splitlines()
    except OSError as exc:
        raise CheckpointError(f"cannot read vocabulary {path}: {exc}") from exc
    if not lines or lines[0] != VOCAB_HEADER:
        raise CheckpointError(f"{path}: missing '{VOCAB_HEADER}' header")

    entries = []
    for number, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        try:
            field, token, index = int(parts[0]), parts[1], int(parts[2])
        except (IndexError, ValueError) as exc:
            raise CheckpointError(f"{path}:{number}: malformed vocabulary line") from exc
        if len(parts) != 3 or index < 1:
            raise CheckpointError(f"{path}:{number}: malformed vocabulary line")
        entries.append((field, token, index))

    if num_fields is None:
        num_fields = max((e[0] for e in entries), default=-1) + 1
    maps = [dict() for _ in range(num_fields)]
    for field, token, index in entries:
        if field >= num_fields:
            raise CheckpointError(f"{path}: field {field} beyond {num_fields} fields")
        maps[field][token] = index
    return FeatureVocab(maps)


# =============================================================================
# SAMPLING AND SPLITTING
# =============================================================================

def _class_indices(records):
    positives = np.array([i for i, r in enumerate(records) if r.label == 1], dtype=np.int64)
    negatives = np.array([i for i, r in enumerate(records) if r.label != 1], dtype=np.int64)
    return positives, negatives


def _allocate(counts, total):
    """Split `total` across classes proportionally, largest remainder first."""
    population = sum(counts)
    if population == 0:
        return [0] * len(counts)
    exact = [c * total / population for c in counts]
    quotas = [math.floor(e) for e in exact]
    order = sorted(range(len(counts)), key=lambda i: (-(exact[i] - quotas[i]), i))
    for i in order[:total - sum(quotas)]:
        quotas[i] += 1
    return quotas


def stratified_sample(records, n, seed=SEED):
    """
    Draw n records keeping the positive:negative ratio.

    Args:
        records: Population
        n: Target count (<= population)
        seed: Sampling seed

    Returns:
        list: Subsample in original order

    Raises:
        UsageError: When n exceeds the population
    """
    if n > len(records) or n < 0:
        raise UsageError(f"cannot sample {n} from {len(records)} records")
    if n == len(records):
        return list(records)

    rng = np.random.default_rng(seed)
    classes = _class_indices(records)
    chosen = []
    for indices, quota in zip(classes, _allocate([len(c) for c in classes], n)):
        chosen.append(rng.choice(indices, size=quota, replace=False))
    return [records[i] for i in np.sort(np.concatenate(chosen))]


def split(records, ratio=SPLIT_RATIO, seed=SEED):
    """
    Stratified train/test split.

    Args:
        records: Records to partition
        ratio: Train share
        seed: Shuffle seed

    Returns:
        tuple: (train, test), disjoint, union equal to the input, both in input order
    """
    rng = np.random.default_rng(seed)
    classes = _class_indices(records)
    n_train = math.floor(ratio * len(records) + 0.5)
    train_idx, test_idx = [], []
    for indices, quota in zip(classes, _allocate([len(c) for c in classes], n_train)):
        shuffled = rng.permutation(indices)
        train_idx.append(shuffled[:quota])
        test_idx.append(shuffled[quota:])
    train = [records[i] for i in np.sort(np.concatenate(train_idx))]
    test = [records[i] for i in np.sort(np.concatenate(test_idx))]
    return train, test


# =============================================================================
# BATCHES
# =============================================================================

@dataclass
class Batch:
    """
    Encoded examples: categorical indices, transformed dense values, labels.
    An entire encoded dataset is also a Batch.
    """

    cat_idx: np.ndarray    # (B, num_cat) int64
    dense_val: np.ndarray  # (B, num_dense) float64, finite and >= 0
    labels: np.ndarray     # (B,) float64 in {0, 1}

    @property
    def size(self):
        return len(self.labels)

    def __len__(self):
        return self.size

    def take(self, indices):
        return Batch(self.cat_idx[indices], self.dense_val[indices], self.labels[indices])


def encode(records, vocab):
    """
    Apply vocabulary lookup and the dense transform to every record.

    Returns:
        Batch: The whole set as arrays
    """
    num_dense = len(records[0].dense) if records else 0
    cat_idx = np.zeros((len(records), vocab.num_fields), dtype=np.int64)
    dense_val = np.zeros((len(records), num_dense), dtype=np.float64)
    labels = np.zeros(len(records), dtype=np.float64)
    for row, record in enumerate(records):
        labels[row] = record.label
        for field, token in enumerate(record.categorical):
            cat_idx[row, field] = vocab.lookup(field, token)
        for field, raw in enumerate(record.dense):
            dense_val[row, field] = transform_dense(raw)
    return Batch(cat_idx, dense_val, labels)


def iter_batches(encoded, batch_size, seed=None):
    """
    Slice an encoded set into batches; the last one may be partial.

    Args:
        encoded: Batch holding the whole set
        batch_size: Rows per batch
        seed: Shuffle seed (int or sequence of ints); None keeps input order
    """
    if seed is None:
        order = np.arange(encoded.size)
    else:
        order = np.random.default_rng(seed).permutation(encoded.size)
    for start in range(0, encoded.size, batch_size):
        yield encoded.take(order[start:start + batch_size])


def batches(records, vocab, batch_size, shuffle_seed=None):
    return iter_batches(encode(records, vocab), batch_size, shuffle_seed)


# =============================================================================
# SUMMARY
# =============================================================================

@dataclass
class DatasetSummary:
    """Label balance and per-field missing/distinct statistics."""

    num_records: int
    positive_rate: float
    dense_missing: list
    cat_missing: list
    cat_distinct: list

    def lines(self):
        out = [f"records: {self.num_records}", f"positive rate: {self.positive_rate:.4f}"]
        for i, missing in enumerate(self.dense_missing):
            out.append(f"I{i + 1}: dense, missing {missing:.2%}")
        for i, (missing, distinct) in enumerate(zip(self.cat_missing, self.cat_distinct)):
            out.append(f"C{i + 1}: categorical, missing {missing:.2%}, distinct {distinct}")
        return out


def describe(records):
    n = len(records)
    if n == 0:
        return DatasetSummary(0, 0.0, [], [], [])
    num_dense = len(records[0].dense)
    num_cat = len(records[0].categorical)
    dense_missing = [sum(r.dense[f] is None for r in records) / n for f in range(num_dense)]
    cat_missing = [sum(r.categorical[f] is None for r in records) / n for f in range(num_cat)]
    cat_distinct = [len({r.categorical[f] for r in records} - {None}) for f in range(num_cat)]
    positive_rate = sum(r.label for r in records) / n
    return DatasetSummary(n, positive_rate, dense_missing, cat_missing, cat_distinct)


# =============================================================================
# SYNTHETIC DATA
# =============================================================================

SYNTHETIC_KINDS = ("planted", "factorized", "linear")


@dataclass(frozen=True)
class SyntheticSpec:
    """
    Generator settings. `planted`: the label depends only on whether two
    hidden categorical fields agree, through
    sigmoid(strength * agree - strength / 2); every other field is noise.
    `factorized`: the first num_signal_fields fields carry centred latent
    vectors and the logit is strength times the sum of their pairwise dot
    products, so the signal is purely second order; the remaining fields
    are noise.
    `linear`: two categorical fields, label a threshold on the first.
    """

    kind: str = "planted"
    num_records: int = 12_500
    num_cat_fields: int = 8
    num_dense_fields: int = 2
    pair_fields: tuple[int, int] = (2, 5)
    pair_cardinality: int = 2
    noise_cardinality: int = 10
    num_signal_fields: int = 4
    signal_cardinality: int = 6
    latent_dim: int = 4
    strength: float = 5.0
    seed: int = SEED

    def describe(self):
        return (f"{self.kind}:n={self.num_records}:cat={self.num_cat_fields}:"
                f"dense={self.num_dense_fields}:strength={self.strength}:seed={self.seed}")


def _token(field, value):
    return f"{field:02x}{value:06x}"


def _token_value(token):
    return int(token[2:], 16)


def latent_tables(spec):
    """
    Latent vectors of the `factorized` generator, shape
    (num_signal_fields, signal_cardinality, latent_dim). Each field's table
    is centred over its values, which leaves no first-order signal, and
    scaled so the pairwise sum has roughly unit spread.
    """
    pairs = spec.num_signal_fields * (spec.num_signal_fields - 1) // 2
    rng = np.random.default_rng([spec.seed, 1])
    tables = rng.normal(size=(spec.num_signal_fields, spec.signal_cardinality, spec.latent_dim))
    tables -= tables.mean(axis=1, keepdims=True)
    return tables / (spec.latent_dim * max(pairs, 1)) ** 0.25


def _pairwise_logits(values, spec):
    """strength * sum_{i<j} <u_i, u_j> over the signal fields of each row."""
    tables = latent_tables(spec)
    latent = np.stack([tables[f, values[:, f]] for f in range(spec.num_signal_fields)], axis=1)
    total = latent.sum(axis=1)
    pairwise = 0.5 * ((total ** 2).sum(axis=-1) - (latent ** 2).sum(axis=(1, 2)))
    return spec.strength * pairwise


def make_synthetic(spec):
    """
    Generate records for a SyntheticSpec.

    Returns:
        list: CriteoRecord per example

    Raises:
        UsageError: For an unknown generator kind or more signal fields than fields
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.num_records
    if spec.kind == "planted":
        values = rng.integers(0, spec.noise_cardinality, size=(n, spec.num_cat_fields))
        first, second = spec.pair_fields
        values[:, first] = rng.integers(0, spec.pair_cardinality, size=n)
        values[:, second] = rng.integers(0, spec.pair_cardinality, size=n)
        agree = (values[:, first] == values[:, second]).astype(np.float64)
        prob = sigmoid(spec.strength * agree - spec.strength / 2.0)
        labels = (rng.random(n) < prob).astype(int)
        dense = rng.integers(0, 100, size=(n, spec.num_dense_fields))
    elif spec.kind == "factorized":
        if not 2 <= spec.num_signal_fields <= spec.num_cat_fields:
            raise UsageError(f"factorized generator needs 2..{spec.num_cat_fields} signal "
                             f"fields, got {spec.num_signal_fields}")
        values = rng.integers(0, spec.noise_cardinality, size=(n, spec.num_cat_fields))
        values[:, :spec.num_signal_fields] = rng.integers(
            0, spec.signal_cardinality, size=(n, spec.num_signal_fields))
        prob = sigmoid(_pairwise_logits(values, spec))
        labels = (rng.random(n) < prob).astype(int)
        dense = rng.integers(0, 100, size=(n, spec.num_dense_fields))
    elif spec.kind == "linear":
        values = rng.integers(0, 4, size=(n, 2))
        labels = (values[:, 0] < 2).astype(int)
        dense = np.zeros((n, 0), dtype=np.int64)
    else:
        raise UsageError(f"unknown synthetic generator '{spec.kind}', choose from {SYNTHETIC_KINDS}")

    return [
        CriteoRecord(
            int(labels[i]),
            tuple(int(v) for v in dense[i]),
            tuple(_token(f, int(v)) for f, v in enumerate(values[i])),
        )
        for i in range(n)
    ]


def bayes_scores(records, spec):
    """Bayes-optimal click probabilities for records of a planted or factorized spec."""
    if spec.kind == "factorized":
        values = np.array([[_token_value(t) for t in r.categorical[:spec.num_signal_fields]]
                           for r in records], dtype=np.int64).reshape(-1, spec.num_signal_fields)
        return sigmoid(_pairwise_logits(values, spec))
    first, second = spec.pair_fields
    agree = np.array([r.categorical[first][2:] == r.categorical[second][2:] for r in records],
                     dtype=np.float64)
    return sigmoid(spec.strength * agree - spec.strength / 2.0)


# =============================================================================
# PIPELINE
# =============================================================================

@dataclass
class PreparedData:
    train: list
    test: list
    vocab: FeatureVocab


def prepare(records, config):
    """
    Subsample, split and build the vocabulary from the training split.

    Args:
        records: Full record list
        config: TrainConfig (sample_size, subsample_before_split, split_ratio,
                seed, min_freq, bucket_cap)

    Returns:
        PreparedData
    """
    def subsample(items):
        if config.sample_size and len(items) > config.sample_size:
            return stratified_sample(items, config.sample_size, config.seed)
        return items

    if config.subsample_before_split:
        train, test = split(subsample(records), config.split_ratio, config.seed)
    else:
        train, test = split(records, config.split_ratio, config.seed)
        train = subsample(train)
    vocab = build_vocab(train, config.min_freq, config.bucket_cap)
    logger.info("prepared %d train / %d test records, buckets %s",
                len(train), len(test), vocab.bucket_counts)
    return PreparedData(train, test, vocab)
