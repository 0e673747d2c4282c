import pytest

from gpunit.config import (ModelConfig, RunConfig, SemiConfig, Stage1Config,
                           Stage2Config, dump_kv_text, parse_kv_text,
                           run_config_from_mapping)


class TestModelConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.image_size == 64
        assert cfg.content_channels == 1
        assert cfg.noise_std == 1.0
        assert cfg.dsc_layers == [1, 2]

    def test_image_size_power_of_two(self):
        with pytest.raises(ValueError):
            ModelConfig(image_size=48)
        with pytest.raises(ValueError):
            ModelConfig(image_size=16)

    def test_dsc_layers_validated(self):
        with pytest.raises(ValueError):
            ModelConfig(dsc_layers=[1, 5])
        with pytest.raises(ValueError):
            ModelConfig(dsc_layers=[1, 1])

    def test_content_resolution(self):
        assert ModelConfig(image_size=64).content_resolution == 16


class TestDefaultsMatchTrainingRecipe:
    def test_stage1_weights(self):
        cfg = Stage1Config()
        assert cfg.lambda_s == 5.0
        assert cfg.lambda_r == 0.001

    def test_stage2_weights(self):
        cfg = Stage2Config()
        assert cfg.lambda_1 == 1.0
        assert cfg.lambda_2 == 50.0
        assert cfg.lambda_3 == 1.0
        assert cfg.lambda_4 == 1.0

    def test_semi_supervised_lowers_content_weight(self):
        assert Stage2Config(semi_supervised=True).lambda_1 == 0.1
        assert Stage2Config(semi_supervised=True, lambda_1=0.7).lambda_1 == 0.7

    def test_semi_constants(self):
        cfg = SemiConfig()
        assert cfg.lambda_P == 250.0
        assert cfg.lambda_p_i == 1.0
        assert cfg.lambda_p_j == 0.1
        assert cfg.tau == 16.0

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            Stage1Config(lambda_s=-1)
        with pytest.raises(ValueError):
            Stage2Config(lambda_2=-5)
        with pytest.raises(ValueError):
            SemiConfig(tau=-1)


class TestKvFormat:
    def test_parse_types(self):
        tree = parse_kv_text("""
        # comment
        seed = 7
        data = "out/ds"
        model.image_size = 32
        model.noise_std = 0.5
        stage2.controllable = true
        stage2.lambda_cc_per_layer = [1, 0.5, 0, 0]
        """)
        assert tree["seed"] == 7
        assert tree["data"] == "out/ds"
        assert tree["model"]["noise_std"] == 0.5
        assert tree["stage2"]["controllable"] is True
        assert tree["stage2"]["lambda_cc_per_layer"] == [1, 0.5, 0, 0]

    def test_bad_line_rejected(self):
        with pytest.raises(ValueError):
            parse_kv_text("just words")

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError):
            run_config_from_mapping({"model": {"imagesize": 32}})

    def test_roundtrip(self):
        cfg = RunConfig()
        cfg.seed = 5
        cfg.data = "somewhere"
        text = dump_kv_text(cfg)
        tree = parse_kv_text(text)
        again = run_config_from_mapping(tree)
        assert again == cfg

    def test_mapping_builds_nested_configs(self):
        cfg = run_config_from_mapping({
            "seed": 3,
            "model": {"image_size": 32, "base_width": 8, "n_domains": 3},
            "stage2": {"controllable": True},
        })
        assert cfg.model.image_size == 32
        assert cfg.stage2.controllable


def test_stage2_cc_weights_match_encoder_stages():
    model = ModelConfig()
    with pytest.raises(ValueError):
        RunConfig(model=model, stage2=Stage2Config(lambda_cc_per_layer=[1.0, 1.0]))
