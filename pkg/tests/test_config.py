import json

import pytest

from meshletemp.config import (
    ConfigError,
    apply_overrides,
    config_from_dict,
    load_config,
    parse_override,
    preset,
)


def test_desk_defaults():
    cfg = preset("desk")
    assert cfg.base_lr == 1e-4 and cfg.epochs == 50
    assert cfg.model.channels == 128
    assert cfg.mte.block_widths == [256, 128, 64]
    assert (cfg.loss.alpha, cfg.loss.alpha_temp, cfg.loss.beta) == (1.0, 0.33, 1.0)
    assert cfg.mvm.max_ratio == 0.3


def test_full_scale_preset():
    cfg = preset("full-scale")
    assert cfg.model.channels == 2048 and cfg.model.coarse_count == 431
    assert cfg.model.body_preset == "paper-shape"
    assert cfg.mte.block_widths == [1024, 256, 64] and cfg.mte.layers_per_block == 4


def test_total_steps():
    cfg = preset("desk", epochs=3, batch_size=5)
    assert cfg.total_steps(16) == 12


@pytest.mark.parametrize(
    "text,expected",
    [
        ("base_lr=3e-4", ("base_lr", 3e-4)),
        ("model.body_preset=desk", ("model.body_preset", "desk")),
        ("mte.block_widths=[64,32,16]", ("mte.block_widths", [64, 32, 16])),
        ("data.tiers=easy,hard", ("data.tiers", ["easy", "hard"])),
    ],
)
def test_parse_override(text, expected):
    assert parse_override(text) == expected


def test_overrides_are_type_checked():
    cfg = preset("desk")
    assert apply_overrides(cfg, ["epochs=3"]).epochs == 3
    assert apply_overrides(cfg, {"loss.alpha_temp": 1}).loss.alpha_temp == 1.0
    for bad in (["epochs=1.5"], ["epochs=true"], ["model.channels=abc"], ["nope=1"], ["model=3"],
                ["model.nope.deeper=1"], ["base_lr=-1"], ["dtype=float16"], ["mte.block_widths=64,128,256"]):
        with pytest.raises(ConfigError):
            apply_overrides(cfg, bad)
    with pytest.raises(ConfigError):
        parse_override("no-equals-sign")


def test_config_roundtrip_and_unknown_keys(tmp_path):
    cfg = preset("desk", epochs=7)
    assert config_from_dict(json.loads(cfg.to_json())) == cfg
    with pytest.raises(ConfigError, match="model.extra"):
        config_from_dict({"model": {"extra": 1}})


def test_load_config_with_preset(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"preset": "full-scale", "epochs": 2, "mte": {"layers_per_block": 1}}))
    cfg = load_config(p)
    assert cfg.model.channels == 2048 and cfg.epochs == 2 and cfg.mte.layers_per_block == 1
    assert cfg.mte.block_widths == [1024, 256, 64]
    p.write_text(json.dumps({"preset": "huge"}))
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(p)


def test_validation_rules():
    with pytest.raises(ConfigError):
        preset("desk", **{"model.image_size": 100})
    with pytest.raises(ConfigError):
        preset("desk", **{"mvm.max_ratio": 1.5})
    with pytest.raises(ConfigError):
        preset("desk", **{"data.tiers": ["extreme"]})
    with pytest.raises(ConfigError):
        preset("desk", **{"mte.heads_per_block": 3})
    assert preset("desk", base_lr=0.0).base_lr == 0.0
