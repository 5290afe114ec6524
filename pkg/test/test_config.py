import pytest

import utils
from mindcine.config import (
    TrainConfig,
    closest_valid_window,
    config_hash,
    diff_configs,
    from_dict,
    load_config,
    to_dict,
    validate,
    with_delta,
)
from mindcine.defs import ConfigError


def test_defaults_are_valid():
    cfg = validate(TrainConfig())
    assert cfg.semantic.lam == 0.01
    assert cfg.semantic.mu == 0.5
    assert cfg.semantic.tau_init == 0.07
    assert cfg.metrics.repeats == 100
    assert cfg.diffusion.steps <= 50


def test_file_and_overrides(tmp_path):
    path = utils.write_config(tmp_path / "tiny.json")
    cfg = load_config(path, ["semantic.lam=0.02", "metrics.n_ways=[2, 3]", "encoder.kind=mlp"])
    assert cfg.data.channels == 4
    assert cfg.semantic.lam == 0.02
    assert cfg.metrics.n_ways == [2, 3]
    assert cfg.encoder.kind == "mlp"


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="semantic.lamda"):
        from_dict({"semantic": {"lamda": 0.1}})


def test_override_needs_value():
    with pytest.raises(ConfigError):
        load_config(None, ["semantic.lam"])


@pytest.mark.parametrize(
    "section",
    [
        {"diffusion": {"steps": 51}},
        {"semantic": {"alpha": [0.5, 0.5]}},
        {"semantic": {"tau_init": 0.0}},
        {"perceptual": {"heads": 3}},
        {"metrics": {"n_ways": [2, 6]}},
        {"data": {"image_size": 8}},
    ],
)
def test_invalid_values(section):
    with pytest.raises(ConfigError):
        validate(from_dict(utils.tiny_dict(**section)))


def test_window_error_names_closest_valid():
    assert closest_valid_window(40, 3, 21) == 20
    with pytest.raises(ConfigError, match="closest valid window is 20"):
        validate(from_dict(utils.tiny_dict(data={"window": 21})))


def test_hash_is_stable_and_sectioned(tiny_cfg):
    again = from_dict(to_dict(tiny_cfg))
    assert config_hash(tiny_cfg) == config_hash(again)

    other = with_delta(tiny_cfg, {"guidance.scale": 3.0})
    assert config_hash(other) != config_hash(tiny_cfg)
    assert config_hash(other, ["data", "seed"]) == config_hash(tiny_cfg, ["data", "seed"])
    assert diff_configs(tiny_cfg, other) == {"guidance.scale": (7.5, 3.0)}


def test_with_delta_validates(tiny_cfg):
    with pytest.raises(ConfigError):
        with_delta(tiny_cfg, {"diffusion.steps": 0})
