import pytest

from dgmask.config import (
    ConfigError,
    TrainConfig,
    build_config,
    load_config,
    load_preset,
    parse_config_text,
    preset_names,
    write_config,
)


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.total_steps, cfg.decay_steps, cfg.distill_start) == (400, (300,), 312)
    assert (cfg.gamma, cfg.tau_d, cfg.tau_m, cfg.alpha, cfg.beta) == (4.0, 0.5, 0.8, 0.8, 0.2)
    assert (cfg.ema_rate, cfg.depth_k, cfg.momentum) == (0.999, 8.0, 0.9)


def test_lr_schedule():
    cfg = TrainConfig(decay_steps=(100, 300))
    assert cfg.lr_at(99) == cfg.lr
    assert cfg.lr_at(100) == pytest.approx(cfg.lr * 0.1)
    assert cfg.lr_at(399) == pytest.approx(cfg.lr * 0.01)


def test_pairwise_ramp():
    cfg = TrainConfig(pairwise_start=10, pairwise_warmup=20)
    assert [cfg.pairwise_weight(s) for s in (0, 9, 10, 20, 30, 99)] == [0, 0, 0, 0.5, 1, 1]


def test_parse_text():
    text = """
    # comment line
    tau_d = 0.3   # trailing comment
    decay_steps = (250,)
    use_cons = false
    color_space = rgb
    """
    assert parse_config_text(text) == {"tau_d": 0.3, "decay_steps": (250,), "use_cons": False,
                                       "color_space": "rgb"}
    with pytest.raises(ConfigError, match=":2:"):
        parse_config_text("tau_d = 1\nnot a pair")


def test_build_config_types_and_errors():
    cfg = build_config({"total_steps": 500.0, "decay_steps": [300]}, {"gamma": 2})
    assert cfg.total_steps == 500 and cfg.decay_steps == (300,) and cfg.gamma == 2.0
    with pytest.raises(ConfigError, match="unknown"):
        build_config({"tau": 1})
    with pytest.raises(ConfigError):
        build_config({"use_cons": 3})
    with pytest.raises(ConfigError):
        build_config({"total_steps": 1.5})


@pytest.mark.parametrize("changes", [
    dict(lr=0), dict(decay_steps=(300, 200)), dict(decay_steps=(400,)),
    dict(distill_start=100), dict(alpha=0.9, beta=0.2), dict(ema_rate=1.0),
    dict(color_space="hsv"), dict(restarts=0), dict(restarts=2, probe_steps=350),
])
def test_invalid_configs(changes):
    with pytest.raises(ConfigError):
        TrainConfig(**changes)


def test_file_round_trip(tmp_path):
    cfg = TrainConfig(tau_d=0.7, decay_steps=(250, 350), color_space="rgb", use_depth=False)
    write_config(cfg, tmp_path / "c.cfg")
    assert load_config(tmp_path / "c.cfg") == cfg
    assert load_config(tmp_path / "c.cfg").digest() == cfg.digest()


def test_overrides_beat_file(tmp_path):
    (tmp_path / "c.cfg").write_text("gamma = 2\n")
    assert load_config(tmp_path / "c.cfg", {"gamma": 1}).gamma == 1.0


def test_presets():
    names = preset_names()
    for required in ("default", "box_only", "no_depth", "iou_only", "no_distill", "tau_d_0.3",
                     "tau_d_0.7", "gamma_0", "gamma_2"):
        assert required in names
    assert load_preset("default") == TrainConfig()
    box = load_preset("box_only")
    assert not (box.use_cons or box.use_depth or box.use_distill)
    iou = load_preset("iou_only")
    assert (iou.alpha, iou.beta) == (1.0, 0.0)
    assert load_preset("tau_d_0.3").tau_d == 0.3
    assert load_preset("gamma_0", {"seed": 3}).seed == 3
    with pytest.raises(ConfigError):
        load_preset("nope")
