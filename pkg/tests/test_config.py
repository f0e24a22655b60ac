"""Config parsing tests: schema validation, roundtrip, schedule helpers."""

import dataclasses

import pytest

from ccreid import config as cf


def test_empty_text_gives_defaults():
    cfg = cf.parse_config("")
    assert cfg == cf.RunConfig()


def test_comments_and_blanks_ignored():
    cfg = cf.parse_config("\n# full line comment\n  \ntrain.epochs = 3 # tail\n")
    assert cfg.epochs == 3


def test_roundtrip_preserves_everything(tmp_path):
    cfg = cf.RunConfig(epochs=12, lr=0.05, stage_channels=(4, 8),
                       downsample_stages=(1,), shared_from_stage=1,
                       eval_mode="both", flip_prob=0.25,
                       dataset_path="x/y.cmds")
    path = tmp_path / "run.cfg"
    cf.save_config(cfg, path)
    back = cf.load_config(path)
    assert back == cfg
    assert dataclasses.asdict(back) == dataclasses.asdict(cfg)


def test_unknown_key_names_line():
    with pytest.raises(cf.ConfigError, match=r":2: unknown key 'mystery'"):
        cf.parse_config("train.epochs = 5\nmystery = 1\n")


def test_duplicate_key_rejected():
    with pytest.raises(cf.ConfigError, match="duplicate key"):
        cf.parse_config("train.lr = 0.1\ntrain.lr = 0.2\n")


def test_unparsable_value_rejected():
    with pytest.raises(cf.ConfigError, match="cannot parse"):
        cf.parse_config("train.epochs = soon\n")
    with pytest.raises(cf.ConfigError, match="cannot parse"):
        cf.parse_config("ccn.edge_snap = maybe\n")


def test_out_of_range_values_rejected():
    for line in ("train.epochs = 0", "data.flip_prob = 1.5",
                 "train.momentum = 1.0", "loss.lambda = -0.1",
                 "loss.clamp = 0"):
        with pytest.raises(cf.ConfigError, match="out of range"):
            cf.parse_config(line + "\n")


def test_line_without_equals_rejected():
    with pytest.raises(cf.ConfigError, match="expected 'key = value'"):
        cf.parse_config("just some words\n")


def test_bool_spellings():
    assert cf.parse_config("ccn.edge_snap = YES\n").edge_snap is True
    assert cf.parse_config("ccn.edge_snap = off\n").edge_snap is False


def test_cross_field_checks():
    with pytest.raises(cf.ConfigError, match="lr_drop_epoch"):
        cf.parse_config("train.epochs = 10\ntrain.lr_drop_epoch = 11\n")
    with pytest.raises(cf.ConfigError, match="batch_identities"):
        cf.parse_config("train.batch_identities = 64\ndata.train_ids = 32\n")
    # kernel taller than the 8x4 common map
    with pytest.raises(cf.ConfigError):
        cf.parse_config("ccn.h_k = 9\n")


def test_lr_schedule_default_drop_at_half():
    cfg = cf.RunConfig()
    assert cfg.drop_epoch() == 30
    assert cfg.lr_at(30) == pytest.approx(0.1)
    assert cfg.lr_at(31) == pytest.approx(0.01)
    explicit = cf.RunConfig(lr_drop_epoch=5, epochs=20)
    assert explicit.lr_at(5) == pytest.approx(0.1)
    assert explicit.lr_at(6) == pytest.approx(0.01)


def test_describe_keys_covers_schema():
    text = cf.describe_keys()
    for key in ("model.stage_channels", "loss.lambda", "train.momentum",
                "eval.mode", "paths.report"):
        assert key in text


def test_load_config_missing_file():
    with pytest.raises(cf.ConfigError, match="cannot read config"):
        cf.load_config("/no/such/file.cfg")
