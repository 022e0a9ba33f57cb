import pytest

from config import (
    THREADS_ENV,
    ModelConfig,
    TrainConfig,
    apply_overrides,
    read_config_file,
    resolve_config,
    threads_from_env,
    tiny_model_config,
)
from errors import ConfigError


def test_experimental_defaults():
    config = TrainConfig()
    assert (config.lr, config.epochs, config.train_batch, config.eval_batch) == (0.05, 100, 2048, 4096)
    assert config.split_ratio == 0.8
    assert (config.model.embed_dim, config.model.num_heads) == (8, 2)
    assert config.model.dnn_layer_sizes == (256, 128)
    assert not config.early_stop


def test_tiny_config_has_six_fields():
    config = tiny_model_config()
    assert config.num_fields == 6
    assert config.head_dim == 2


class TestConfigFile:
    def test_comments_and_blank_lines(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text("# experiment\nlr = 0.1\n\nheads = 4  # four heads\ncin_layers = 16, 8\n")
        assert read_config_file(path) == {"lr": "0.1", "heads": "4", "cin_layers": "16, 8"}

    def test_line_without_equals(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text("lr 0.1\n")
        with pytest.raises(ConfigError, match="run.conf:1"):
            read_config_file(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            read_config_file(tmp_path / "none.conf")


class TestPrecedence:
    def test_flags_beat_file_beat_defaults(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text("lr = 0.1\nepochs = 7\ncin_layers = 16,8\n")
        config = resolve_config(path, {"lr": 0.2, "embed_dim": None})
        assert config.lr == 0.2
        assert config.epochs == 7
        assert config.model.cin_layer_sizes == (16, 8)
        assert config.model.embed_dim == 8

    def test_ablation_applies_before_model_keys(self):
        config = apply_overrides(TrainConfig(), {"use_attention": "true", "ablation": "xdeepfm"})
        assert config.model.use_attention
        assert config.model.first_order_head == "LR"

    def test_seed_reaches_model(self):
        assert resolve_config(overrides={"seed": 7}).model.seed == 7

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="dropout"):
            apply_overrides(TrainConfig(), {"dropout": "0.5"})

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            apply_overrides(TrainConfig(), {"epochs": "many"})

    def test_unknown_ablation(self):
        with pytest.raises(ConfigError):
            apply_overrides(TrainConfig(), {"ablation": "widedeep"})


class TestValidation:
    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError):
            ModelConfig(num_dense_fields=2, embed_dim=8, num_heads=3).validate()

    @pytest.mark.parametrize("changes", [{"lr": 0.0}, {"epochs": -1}, {"gamma": 1.5},
                                         {"split_ratio": 1.0}])
    def test_train_ranges(self, changes):
        with pytest.raises(ConfigError):
            apply_overrides(TrainConfig(), changes)

    def test_dict_round_trip(self):
        config = resolve_config(overrides={"ablation": "deepfm", "lr": 0.08, "synthetic": "planted"})
        assert TrainConfig.from_dict(config.to_dict()) == config


class TestThreads:
    def test_default(self, monkeypatch):
        monkeypatch.delenv(THREADS_ENV, raising=False)
        assert threads_from_env(3) == 3

    def test_from_environment(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "4")
        assert threads_from_env() == 4

    def test_floor_of_one(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "0")
        assert threads_from_env() == 1

    def test_garbage(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "lots")
        with pytest.raises(ConfigError):
            threads_from_env()


class TestFromDict:
    def test_unknown_model_key(self):
        values = TrainConfig().to_dict()
        values["model"]["dropout"] = 0.5
        with pytest.raises(ConfigError, match="model.dropout"):
            TrainConfig.from_dict(values)

    def test_model_block_must_be_mapping(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"model": [8, 2]})

    def test_bad_value_type(self):
        values = TrainConfig().to_dict()
        values["epochs"] = "many"
        with pytest.raises(ConfigError):
            TrainConfig.from_dict(values)
