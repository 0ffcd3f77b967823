from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphprune import config
from graphprune.errors import ConfigError


def test_defaults_roundtrip():
    cfg = config.validate({})
    assert config.loads(config.dumps(cfg)) == cfg


@settings(max_examples=50, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    lr=st.floats(1e-6, 1.0, allow_nan=False),
    n=st.integers(1, 16),
    target=st.floats(0.01, 1.0),
    path=st.text(st.characters(blacklist_categories=("Cs",)), max_size=20),
    timing=st.booleans(),
)
def test_roundtrip_property(seed, lr, n, target, path, timing):
    cfg = config.validate({"seed": seed, "ppo.lr": lr, "env.n_groups": n, "env.flops_target": target,
                           "data.path": path, "log.timing": timing})
    text = config.dumps(cfg)
    assert config.loads(text) == cfg
    assert config.dumps(config.loads(text)) == text


def test_nested_tables_accepted():
    cfg = config.loads("[env]\nn_groups = 2\nmode = \"performance\"\n")
    assert cfg["env.n_groups"] == 2 and cfg["env.mode"] == "performance"


@pytest.mark.parametrize(
    "text, key",
    [
        ("env.bogus = 1", "env.bogus"),
        ("env.n_groups = \"four\"", "env.n_groups"),
        ("env.mode = \"fast\"", "env.mode"),
        ("env.n_groups = 0", "env.n_groups"),
        ("env.flops_target = 1.5", "env.flops_target"),
        ("ppo.gamma = 0.5", "ppo.gamma"),
        ("ppo.gamma = 0.0", "ppo.gamma"),
        ("log.timing = 1", "log.timing"),
        ("seed = 1.5", "seed"),
    ],
)
def test_errors_name_the_key(text, key):
    with pytest.raises(ConfigError) as info:
        config.loads(text)
    assert info.value.key == key


def test_syntax_error():
    with pytest.raises(ConfigError):
        config.loads("env.n_groups = = 3")


def test_derived_gamma():
    assert config.derived_gamma(config.validate({"env.n_groups": 1})) == 0.0
    assert config.derived_gamma(config.validate({"env.n_groups": 4})) == 1.0


def test_manifest_loads_as_config(tmp_path):
    cfg = config.validate({"seed": 7})
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"config": cfg, "config_hash": config.config_hash(cfg)}))
    assert config.load(path) == cfg
    bad = tmp_path / "other.json"
    bad.write_text("[]")
    with pytest.raises(ConfigError):
        config.load(bad)


def test_hash_changes_with_values():
    a = config.validate({})
    assert config.config_hash(a) == config.config_hash(dict(a))
    assert config.config_hash(a) != config.config_hash(config.validate({"seed": 1}))
