import pytest

from gsgen import config


def test_defaults_carry_published_weights():
    cfg = config.TrainConfig()
    w = cfg.geometry.weights()
    assert (w.lambda_sds, w.lambda_3d) == (0.1, 0.01)
    r = cfg.refine.weights()
    assert (r.lambda_mean, r.lambda_opacity) == (1.0, 100.0)
    assert cfg.geometry.batch == 4 and cfg.refine.mean_mode == "deviation"
    assert cfg.densify.t_pos == 0.02 and cfg.densify.alpha_min == 0.05
    lr = cfg.refine.learning_rates()
    assert lr == {"positions": 1e-3, "color_params": 1e-2, "opacity_logits": 5e-2, "log_scales": 5e-3,
                  "rotations": 1e-3, "background": 1e-3}


def test_file_format_and_overrides(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# comment\nrefine.lambda_opacity = 50   # inline\ncamera.fov_range = [30, 45]\n"
                    "guidance.target = some/file.ply\ngeometry.lr.positions = 2e-4\n")
    cfg = config.load(path, ["geometry.position_lr_scale=0.5", "densify.compactness_condition=gap"])
    assert cfg.refine.lambda_opacity == 50.0 and isinstance(cfg.refine.lambda_opacity, float)
    assert cfg.camera.fov_range == (30, 45)
    assert cfg.guidance.target == "some/file.ply"
    assert cfg.geometry.learning_rates()["positions"] == pytest.approx(1e-4)
    assert cfg.densify.compactness_condition == "gap"


def test_dump_load_round_trip():
    cfg = config.apply_overrides(config.TrainConfig(), ["seed=3", "refine.mean_mode=literal"])
    again = config.loads(config.dumps(cfg))
    assert config.dumps(again) == config.dumps(cfg)
    assert config.config_hash(again) == config.config_hash(cfg)


def test_hash_ignores_logging_cadence():
    a = config.TrainConfig()
    b = config.apply_overrides(config.TrainConfig(), ["checkpoint_every=7", "log_every=3"])
    c = config.apply_overrides(config.TrainConfig(), ["refine.lambda_mean=0.5"])
    assert config.config_hash(a) == config.config_hash(b) != config.config_hash(c)


@pytest.mark.parametrize("item", ["nope.x=1", "refine.nope=1", "refine.mean_mode=sideways",
                                  "densify.split_interval=0", "refine.lambda_sds=-1.0"])
def test_rejects_bad_keys_and_values(item):
    with pytest.raises((KeyError, ValueError)):
        config.apply_overrides(config.TrainConfig(), [item])


def test_rejects_malformed_line():
    with pytest.raises(ValueError, match="line 1"):
        config.loads("just words")
