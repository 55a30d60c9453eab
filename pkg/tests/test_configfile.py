from __future__ import annotations

import pytest

from dfnlab.configfile import format_config, parse_bool, parse_config_text
from dfnlab.experiments import ExperimentConfig


def test_parse_basic():
    text = """
    # a comment
    name = sweep
    seeds = 0, 1, 2
    keep_fraction = 0.2   # trailing comment
    dfn_augmentation = false
    """
    values = parse_config_text(text)
    assert values["name"] == "sweep"
    assert values["seeds"] == "0, 1, 2"
    assert values["keep_fraction"] == "0.2"


def test_parse_rejects_garbage():
    with pytest.raises(ValueError, match="line 1"):
        parse_config_text("not a key value pair")
    with pytest.raises(ValueError, match="duplicate"):
        parse_config_text("a = 1\na = 2")
    with pytest.raises(ValueError, match="empty key"):
        parse_config_text("= 3")


def test_parse_bool_values():
    assert parse_bool("true") and parse_bool("Yes") and parse_bool("1")
    assert not parse_bool("false") and not parse_bool("off")
    with pytest.raises(ValueError):
        parse_bool("maybe")


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig(seeds=(3, 4), keep_fraction=0.2, dfn_augmentation=False)
    path = tmp_path / "exp.cfg"
    cfg.save(path, header="round trip")
    loaded = ExperimentConfig.from_file(path)
    assert loaded == cfg


def test_config_rejects_unknown_key():
    with pytest.raises(ValueError, match="unknown config key"):
        ExperimentConfig.from_mapping({"definitely_not_a_key": "1"})


def test_config_partial_file_uses_defaults(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("raw_pool_size = 5000\nseeds = 7\n")
    cfg = ExperimentConfig.from_file(path)
    assert cfg.raw_pool_size == 5000
    assert cfg.seeds == (7,)
    assert cfg.keep_fraction == ExperimentConfig().keep_fraction


def test_format_config_stable_order():
    a = format_config({"b": 2, "a": 1})
    b = format_config({"a": 1, "b": 2})
    assert a == b
    assert a.index("a = 1") < a.index("b = 2")
