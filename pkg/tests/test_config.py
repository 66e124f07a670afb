import pytest

from qpi.config import (MATCHED, SIAMESE, ModelConfig, TrainSettings, load_run_config, base_config,
                        parse_run_config, tiny_config)
from qpi.errors import ConfigError


class TestModelConfig:
    def test_base_defaults(self):
        cfg = base_config()
        assert (cfg.encoder.num_layers, cfg.encoder.num_heads, cfg.encoder.embed_dim) == (12, 12, 768)
        assert cfg.encoder.ffn_dim == 4 * 768
        assert cfg.widths == (2, 3, 4, 5) and cfg.filters_per_width == 100
        assert cfg.pipeline.trainable_encoders == 12

    @pytest.mark.parametrize("setup,max_len", [("ma", 64), ("siamese", 32)])
    def test_default_max_len(self, setup, max_len):
        assert base_config(setup).pipeline.max_len == max_len

    def test_switching_setup_resets_max_len(self):
        assert base_config("ma").replace(setup="siamese").pipeline.max_len == 32

    def test_fewer_layers_keeps_all_trainable(self):
        assert base_config().replace(num_layers=4).pipeline.trainable_encoders == 4

    def test_explicit_k_survives(self):
        cfg = base_config(trainable_encoders=2).replace(num_layers=6)
        assert cfg.pipeline.trainable_encoders == 2

    def test_dict_round_trip(self):
        cfg = tiny_config("siamese", "mean", trainable_encoders=1)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("changes,field", [
        ({"num_heads": 5}, "divisible"), ({"trainable_encoders": 13}, "trainable_encoders"),
        ({"max_len": 600}, "max_position"), ({"precision": "f16"}, "precision"),
        ({"dropout_rate": 1.0}, "dropout_rate"),
    ])
    def test_invalid(self, changes, field):
        with pytest.raises(ConfigError, match=field):
            base_config().replace(**changes)

    def test_unknown_setup(self):
        with pytest.raises(ConfigError, match="setup"):
            base_config("triplet")

    def test_train_settings(self):
        with pytest.raises(ConfigError):
            TrainSettings(lr=0.0)


class TestIni:
    def test_empty_is_base(self):
        run = parse_run_config("")
        assert run.model == base_config()
        assert run.train == TrainSettings()

    def test_full_file(self):
        run = parse_run_config("""
[model]
preset = tiny
widths = 2, 3
filters = 3
precision = f32

[pipeline]
setup = siamese
head = mean
trainable_encoders = 1

[train]
epochs = 3
lr = 1e-3
eval_train = no
stop_at_train_accuracy = 0.99

[data]
data_dir = /tmp/d
strict_split = yes
""")
        m = run.model
        assert (m.pipeline.setup, m.pipeline.head, m.pipeline.trainable_encoders) == (SIAMESE, "mean_pool", 1)
        assert m.pipeline.max_len == 12 and m.filters_per_width == 3 and m.precision == "f32"
        assert run.train.epochs == 3 and run.train.lr == 1e-3 and not run.train.eval_train
        assert run.train.stop_at_train_accuracy == 0.99
        assert run.data_dir == "/tmp/d" and run.strict_split

    def test_overrides_win(self):
        run = parse_run_config("[pipeline]\nsetup = siamese\n", {"pipeline.setup": "ma", "train.seed": 7,
                                                                  "pipeline.head": None})
        assert run.model.pipeline.setup == MATCHED and run.train.seed == 7

    @pytest.mark.parametrize("text,msg", [
        ("[colours]\nred = 1\n", "colours"), ("[model]\nsize = 3\n", "model.size"),
        ("[train]\nepochs = many\n", "train.epochs"), ("[model]\npreset = huge\n", "preset"),
        ("not an ini", "parse"),
    ])
    def test_errors(self, text, msg):
        with pytest.raises(ConfigError, match=msg):
            parse_run_config(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "none.ini")
