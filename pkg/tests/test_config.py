import pytest

from heightformer.config import (
    ConfigError,
    TrainConfig,
    apply_overrides,
    config_from_dict,
    config_to_dict,
    dump_config,
    load_config,
    read_config_text,
)


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="decoder.nope"):
        apply_overrides(TrainConfig(), {"decoder.nope": "1"})


def test_bare_n_bins_sets_both_sections():
    cfg = apply_overrides(TrainConfig(), {"n_bins": "16"})
    assert cfg.encoder.n_bins == cfg.decoder.n_bins == 16


def test_mismatched_bins_rejected():
    with pytest.raises(ConfigError):
        apply_overrides(TrainConfig(), {"decoder.n_bins": "16"})


def test_typed_parsing():
    cfg = apply_overrides(TrainConfig(), {
        "train.lr": "3e-4", "decoder.fixed_bins": "true", "encoder.depths": "2,2,2,2", "data.root": "/x",
    })
    assert cfg.lr == 3e-4 and cfg.decoder.fixed_bins is True
    assert cfg.encoder.depths == (2, 2, 2, 2) and cfg.data.root == "/x"


def test_bad_value_rejected():
    with pytest.raises(ConfigError):
        apply_overrides(TrainConfig(), {"train.epochs": "many"})


def test_dump_load_round_trip(tmp_path):
    cfg = apply_overrides(TrainConfig(), {"n_bins": "8", "train.seed": "5", "decoder.bin_mode": "bin-centers"})
    path = tmp_path / "c.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg
    assert config_from_dict(config_to_dict(cfg)) == cfg


def test_comments_and_blank_lines():
    pairs = read_config_text("# note\n\ntrain.lr = 1e-3\n")
    assert pairs == {"train.lr": "1e-3"}


def test_invariants():
    for bad in ({"train.epochs": "0"}, {"train.lr": "0"}, {"train.warmup_frac": "1.0"}):
        with pytest.raises(ConfigError):
            apply_overrides(TrainConfig(), bad)
