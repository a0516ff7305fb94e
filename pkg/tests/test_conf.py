"""Tests for run configuration: presets, files, overrides, and the seed variable."""

import json

import pytest

from mvad.conf import PRESETS, RunConfig, build_config, get_setting, load_config, preset
from mvad.errors import ConfigError


class TestSettings:
    def test_default(self):
        assert get_setting("PRESET") == "desk"

    def test_environment_override(self, monkeypatch):
        monkeypatch.setenv("MVAD_PRESET", "paper-scale")
        assert get_setting("PRESET") == "paper-scale"
        assert build_config().image_size == 256


class TestPresets:
    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_presets_validate(self, name):
        assert preset(name).validate() is not None

    def test_paper_scale_hyperparameters(self):
        config = preset("paper-scale")
        assert config.image_size == 256
        assert config.window_sizes == (8, 8, 8)
        assert config.top_k == (16, 32, 64)
        assert config.blocks == (1, 2, 4)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="Unknown preset"):
            preset("huge")


class TestValidation:
    @pytest.mark.parametrize(
        "changes,message",
        [
            ({"views": 1}, "views >= 2"),
            ({"image_size": 40}, "multiple of 16"),
            ({"teacher_channels": (4, 8)}, "3 entries"),
            ({"teacher_channels": (4, 6, 12)}, "double"),
            ({"window_sizes": (3, 2, 2)}, "divide"),
            ({"top_k": (0, 2, 2)}, "top_k"),
            ({"lr": 0.0}, "optimizer"),
            ({"train_dtype": "float16"}, "train_dtype"),
            ({"pro_fpr_limit": 0.0}, "pro_fpr_limit"),
            ({"pro_thresholds": 1}, "pro_thresholds"),
            ({"map_combine": "max"}, "map_combine"),
        ],
    )
    def test_rejects(self, tiny_config, changes, message):
        with pytest.raises(ConfigError, match=message):
            tiny_config.replace(**changes).validate()

    def test_exact_pro_thresholds_allowed(self, tiny_config):
        assert tiny_config.replace(pro_thresholds=0).validate().pro_thresholds == 0

    def test_top_k_capped_to_candidates(self, tiny_config):
        config = tiny_config.replace(top_k=(64, 2, 2))
        assert config.effective_top_k() == (8, 2, 2)


class TestCoercion:
    def test_list_and_string_tuples(self):
        config = RunConfig().replace(top_k="4, 8,16", blocks=[1, 1, 1])
        assert config.top_k == (4, 8, 16)
        assert config.blocks == (1, 1, 1)

    def test_booleans(self):
        assert RunConfig().replace(smoothing="yes").smoothing is True
        with pytest.raises(ConfigError, match="Invalid value"):
            RunConfig().replace(smoothing="maybe")

    def test_optional_category(self):
        assert RunConfig().replace(category="nut").category == "nut"
        assert RunConfig().replace(category="none").category is None

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="Unknown config key"):
            RunConfig().replace(learning_rate=0.1)


class TestConfigFiles:
    def test_key_value_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# desk run\nseed = 5\ntop_k = 2,2,2  # per stage\n\nsmoothing=true\n")
        assert load_config(path) == {"seed": 5, "top_k": (2, 2, 2), "smoothing": True}

    def test_json_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"seed": 3, "window_sizes": [2, 2, 2]}))
        assert load_config(path) == {"seed": 3, "window_sizes": (2, 2, 2)}

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed 5\n")
        with pytest.raises(ConfigError, match=":1: expected key=value"):
            load_config(path)

    def test_broken_json(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text("{seed: 5")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_config(path)


class TestBuildConfig:
    def test_layering(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed=5\nepochs=3\n")
        config = build_config("desk", config_file=path, overrides={"epochs": 9, "lr": None})
        assert (config.seed, config.epochs) == (5, 9)
        assert config.lr == RunConfig().lr

    def test_seed_variable_wins(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed=5\n")
        config = build_config(
            config_file=path, overrides={"seed": 6}, environ={"MVAS_SEED": "42"}
        )
        assert config.seed == 42

    def test_bad_seed_variable(self):
        with pytest.raises(ConfigError, match="seed"):
            build_config(environ={"MVAS_SEED": "abc"})

    def test_result_is_validated(self):
        with pytest.raises(ConfigError):
            build_config(overrides={"views": 1})


class TestConfigHash:
    def test_stable_and_sensitive(self, tiny_config):
        assert tiny_config.config_hash() == tiny_config.replace().config_hash()
        assert tiny_config.config_hash() != tiny_config.replace(seed=12).config_hash()
        assert len(tiny_config.config_hash()) == 16

    def test_to_dict_is_json_ready(self, tiny_config):
        data = json.loads(json.dumps(tiny_config.to_dict()))
        assert RunConfig().replace(**data) == tiny_config
