import math
from pathlib import Path

import pytest

from pand.config import TrainConfig, dump_config, load_config, parse_config_text, set_key, toy_config
from pand.errors import ConfigError
from pand.losses import LossWeights

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def test_defaults_follow_reference_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.psc.lr, cfg.psc.momentum, cfg.psc.epochs, cfg.psc.batch_size) == (0.002, 0.9, 200, 128)
    assert (cfg.nsd.lr, cfg.nsd.weight_decay, cfg.nsd.epochs) == (1e-4, 1e-4, 300)
    w = cfg.nsd.weights
    assert (w.lambda_cls, w.lambda_vis, w.lambda_txt, w.tau, w.k) == (0.01, 0.495, 0.495, 2.0, 3)


def test_set_key_coerces_and_rebuilds_frozen_weights():
    cfg = TrainConfig()
    set_key(cfg, "nsd.weights.k", "5")
    set_key(cfg, "psc.symmetric", "yes")
    set_key(cfg, "nsd.weights.lambda_nsd", 1)
    assert cfg.nsd.weights.k == 5 and cfg.psc.symmetric is True
    assert isinstance(cfg.nsd.weights, LossWeights) and cfg.nsd.weights.lambda_nsd == 1.0


@pytest.mark.parametrize("key,value", [("nsd.bogus", "1"), ("nsd.weights", "1"), ("psc.epochs", "ten"),
                                        ("psc.symmetric", "maybe")])
def test_set_key_errors(key, value):
    with pytest.raises(ConfigError):
        set_key(TrainConfig(), key, value)


def test_dump_parse_roundtrip():
    cfg = toy_config(nsd__weights__k=4, psc__prompt="template")
    again = parse_config_text(dump_config(cfg))
    assert again == cfg and again.config_hash() == cfg.config_hash()


def test_config_file_matches_toy_config():
    assert load_config(CONFIG_DIR / "toy.cfg").config_hash() == toy_config().config_hash()


def test_hash_changes_with_any_field():
    base = toy_config()
    assert base.replace(nsd__seed=1).config_hash() != base.config_hash()
    assert base.replace(nsd__weights__lambda_nsd=0.25).config_hash() != base.config_hash()
    assert TrainConfig.from_dict(base.to_dict()).config_hash() == base.config_hash()


def test_parse_errors_name_line():
    with pytest.raises(ConfigError, match="<config>:2"):
        parse_config_text("psc.lr = 0.1\nthis is not valid\n")
    with pytest.raises(ConfigError):
        load_config("/nonexistent/file.cfg")


@pytest.mark.parametrize("override", [dict(psc__lr=0), dict(nsd__epochs=-1), dict(nsd__min_lr=1.0),
                                      dict(psc__prompt="other"), dict(nsd__weight_schedule="step"),
                                      dict(data__source="web"), dict(nsd__weights__tau=0.0)])
def test_validate_rejects(override):
    with pytest.raises(ConfigError):
        TrainConfig().replace(**override).validate()


def test_validate_k_against_classes():
    cfg = TrainConfig().replace(nsd__weights__k=400)
    cfg.validate()
    with pytest.raises(ConfigError, match="k exceeds C-1: k=400, C=10"):
        cfg.validate(10)


def test_separation_default():
    assert TrainConfig().data.separation == pytest.approx(math.pi / 3)
