from pathlib import Path

import pytest

from cmsr.config import (
    ConfigError,
    ExperimentConfig,
    config_from_dict,
    config_hash,
    config_to_dict,
    derive_seed,
    load_config,
)

DESK = Path(__file__).parent.parent / "configs" / "desk.yaml"


def test_defaults_are_published_settings():
    cfg = ExperimentConfig()
    assert (cfg.patch.lr_size, cfg.patch.hr_size, cfg.patch.count_per_case) == (32, 256, 2000)
    assert (cfg.ssim.c1, cfg.ssim.c2) == (0.02, 0.06)
    assert (cfg.synth.lambda1, cfg.synth.lambda2, cfg.sr.lambda_adv) == (0.5, 0.4, 0.001)
    assert (cfg.synth.epochs, cfg.sr.epochs, cfg.synth.minibatch, cfg.sr.minibatch) == (200, 200, 64, 64)
    assert cfg.pyramid.factor == 8


def test_empty_mapping_gives_defaults():
    assert config_from_dict({}) == ExperimentConfig()
    assert config_from_dict(None) == ExperimentConfig()


def test_section_views():
    cfg = config_from_dict({"synth": {"lambda1": 0.7, "lr": 1e-3}, "sr": {"lambda_adv": 0.01}})
    s = cfg.synth_config()
    assert s.weights.lambda1 == 0.7 and s.optimizer.lr == 1e-3 and s.ssim == cfg.ssim
    assert cfg.sr_config().weights.lambda_adv == 0.01
    assert s.seed != cfg.sr_config().seed


@pytest.mark.parametrize(
    "raw, key",
    [
        ({"synth": {"lambda3": 1.0}}, "synth.lambda3"),
        ({"data": {"phantom": {"gap": {"blurr": 1}}}}, "data.phantom.gap.blurr"),
        ({"bogus": 1}, "bogus"),
    ],
)
def test_unknown_key_named(raw, key):
    with pytest.raises(ConfigError) as exc:
        config_from_dict(raw)
    assert exc.value.key == key and key in str(exc.value)


@pytest.mark.parametrize(
    "raw, key",
    [
        ({"synth": {"epochs": "many"}}, "synth.epochs"),
        ({"synth": {"epochs": -1}}, "synth.epochs"),
        ({"sr": {"minibatch": 0}}, "sr.minibatch"),
        ({"patch": {"lr_size": 32, "hr_size": 128}}, "patch.hr_size"),
        ({"preprocess": {"clinical_range": [400, -1000]}}, "preprocess.clinical_range"),
        ({"preprocess": {"micro_domain": "everywhere"}}, "preprocess.micro_domain"),
        ({"ssim": {"c1": 0}}, "ssim"),
        ({"data": {"source": "files"}}, "data.clinical_train"),
    ],
)
def test_invariant_violations_named(raw, key):
    with pytest.raises(ConfigError) as exc:
        config_from_dict(raw)
    assert exc.value.key == key


def test_overlapping_split_rejected():
    raw = {"data": {"source": "files", "clinical_train": ["c"], "micro_train": ["a", "b"], "micro_test": ["b"]}}
    with pytest.raises(ConfigError, match="overlap"):
        config_from_dict(raw)


def test_desk_config_loads():
    cfg = load_config(DESK)
    assert cfg.patch.lr_size == 8 and cfg.patch.hr_size == 64
    assert cfg.synth.epochs >= 20 and cfg.sr.epochs >= 20
    assert (cfg.data.phantom.n_train, cfg.data.phantom.n_test) == (8, 2)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("synth: [unclosed")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_hash_is_stable_and_sensitive():
    a = config_hash(config_from_dict({"synth": {"epochs": 3}}))
    assert a == config_hash(config_from_dict({"synth": {"epochs": 3}}))
    assert a != config_hash(config_from_dict({"synth": {"epochs": 4}}))
    assert len(a) == 64


def test_dict_roundtrip():
    cfg = load_config(DESK)
    assert config_from_dict(config_to_dict(cfg)) == cfg


def test_derive_seed():
    assert derive_seed(0, "train-sr") == derive_seed(0, "train-sr")
    assert derive_seed(0, "train-sr") != derive_seed(1, "train-sr")
    assert derive_seed(0, "train-sr") != derive_seed(0, "train-synth")
    assert 0 <= derive_seed(123, "x") < 2**31
