"""Shared pytest fixtures: the tiny gradient-check model and the planted synthetic set."""

from dataclasses import replace

import pytest

from config import ModelConfig, TrainConfig, tiny_model_config
from data import SyntheticSpec, encode, make_synthetic, prepare
from model import init_params, random_batch


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def tiny_batch(tiny_config):
    return random_batch(tiny_config)


@pytest.fixture
def tiny_params(tiny_config):
    """Tiny model with every weight non-zero."""
    return init_params(tiny_config, init_std=0.3, zero_fusion=False)


@pytest.fixture(scope="session")
def planted_spec():
    return SyntheticSpec()


@pytest.fixture(scope="session")
def planted_records(planted_spec):
    return make_synthetic(planted_spec)


@pytest.fixture(scope="session")
def planted_sets(planted_records):
    """(prepared, encoded train, encoded test) for the 10,000 / 2,500 planted split."""
    prepared = prepare(planted_records, TrainConfig())
    return prepared, encode(prepared.train, prepared.vocab), encode(prepared.test, prepared.vocab)


@pytest.fixture(scope="session")
def planted_config(planted_sets):
    """Training config sized to the planted vocabulary, kept small enough for CI."""
    prepared, _, _ = planted_sets
    model = ModelConfig(
        cat_vocab_sizes=prepared.vocab.bucket_counts,
        num_dense_fields=2,
        embed_dim=8,
        num_heads=2,
        cin_layer_sizes=(16, 16),
        dnn_layer_sizes=(64, 32),
    )
    return TrainConfig(lr=0.05, epochs=20, train_batch=512, model=model).validate()


@pytest.fixture
def short_config(planted_config):
    return replace(planted_config, epochs=2)


@pytest.fixture(scope="session")
def factorized_spec():
    """Four latent-factor signal fields plus six noise fields."""
    return SyntheticSpec(kind="factorized", num_cat_fields=10)


@pytest.fixture(scope="session")
def factorized_sets(factorized_spec):
    prepared = prepare(make_synthetic(factorized_spec), TrainConfig())
    return prepared, encode(prepared.train, prepared.vocab), encode(prepared.test, prepared.vocab)


@pytest.fixture(scope="session")
def factorized_config(factorized_sets, planted_config):
    prepared, _, _ = factorized_sets
    model = replace(planted_config.model, cat_vocab_sizes=prepared.vocab.bucket_counts)
    return replace(planted_config, model=model).validate()
