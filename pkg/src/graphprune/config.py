"""Flat dotted-key configuration files.

Files are TOML (``env.n_groups = 4``).  Every key has a typed default below;
unknown keys and wrongly typed values raise :class:`ConfigError` naming the
key path.  :func:`dumps` writes one ``key = value`` line per key so that
parse -> serialize -> parse is the identity.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out.dir": "run",
    "log.timing": False,
    "data.path": "data.gsccd",
    "data.n_per_class": 200,
    "data.resolution": 16,
    "net.arch": "toy_cnn",
    "net.path": "net.json",
    "baseline.epochs": 20,
    "baseline.lr": 3e-3,
    "baseline.batch_size": 64,
    "oracle.kind": "builtin",
    "oracle.cmd": "",
    "oracle.timeout": 600.0,
    "oracle.subset": 512,
    "oracle.concurrency_safe": False,
    "env.mode": "resource",
    "env.flops_target": 0.5,
    "env.acc_target": 0.0,
    "env.acc_drop": 0.05,
    "env.n_groups": 4,
    "env.ema_beta": 0.9,
    "env.calibration_batch": 64,
    "ppo.clip_eps": 0.2,
    "ppo.lr": 3e-4,
    "ppo.update_epochs": 4,
    "ppo.minibatch_size": 64,
    "ppo.entropy_coef": 0.01,
    "ppo.value_coef": 0.5,
    "ppo.episodes_per_update": 16,
    "ppo.gamma": -1.0,
    "ppo.init_prune_prob": 0.05,
    "ppo.max_grad_norm": 0.5,
    "ppo.hidden": 128,
    "ppo.d_emb": 128,
    "ppo.rounds": 3,
    "train.episodes": 500,
    "train.workers": 1,
    "train.export_samples": 16,
    "gae.episodes": 200,
    "gae.lr": 1e-3,
    "gae.batch_graphs": 32,
    "gae.epochs": 30,
    "es.generations": 60,
    "es.population": 0,
    "es.sigma0": 1.0,
    "es.init_mean": 0.0,
    "es.reward_semantics": "corrected",
    "es.S_target": -1.0,
}

CHOICES = {
    "env.mode": ("resource", "performance"),
    "oracle.kind": ("builtin", "external"),
    "net.arch": ("toy_cnn", "chain"),
    "es.reward_semantics": ("corrected", "as_paper"),
}

_BARE_KEY = re.compile(r"^[A-Za-z0-9_-]+(\.[A-Za-z0-9_-]+)*$")


def _flatten(table: Mapping, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in table.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(key, f"expected a string, got {value!r}")
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(key, f"must be one of {CHOICES[key]}, got {value!r}")
    return value


def validate(values: Mapping[str, Any]) -> dict[str, Any]:
    cfg = dict(DEFAULTS)
    for key, value in values.items():
        if key not in DEFAULTS:
            raise ConfigError(key, "unknown key")
        cfg[key] = _coerce(key, value)
    if cfg["env.n_groups"] < 1:
        raise ConfigError("env.n_groups", "must be at least 1")
    if not 0.0 < cfg["env.flops_target"] <= 1.0:
        raise ConfigError("env.flops_target", "must lie in (0, 1]")
    if not 0.0 < cfg["env.ema_beta"] < 1.0:
        raise ConfigError("env.ema_beta", "must lie in (0, 1)")
    if cfg["ppo.gamma"] not in (-1.0, 0.0, 1.0):
        raise ConfigError("ppo.gamma", "must be 0.0 or 1.0 (or -1 to derive it from env.n_groups)")
    if cfg["ppo.gamma"] != -1.0 and (cfg["ppo.gamma"] == 0.0) != (cfg["env.n_groups"] == 1):
        raise ConfigError("ppo.gamma", "must be 0.0 exactly when env.n_groups == 1")
    if cfg["train.workers"] < 1:
        raise ConfigError("train.workers", "must be at least 1")
    return cfg


def loads(text: str) -> dict[str, Any]:
    try:
        table = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"invalid config syntax: {exc}") from exc
    return validate(_flatten(table))


def load(path) -> dict[str, Any]:
    """Read a config file, or the config embedded in a run manifest (``.json``)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from exc
    if path.suffix == ".json":
        try:
            return validate(json.loads(text)["config"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError("<file>", f"{path} is not a run manifest") from exc
    return loads(text)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        text = repr(value)
        return text if any(c in text for c in ".en") else text + ".0"
    # JSON escapes are valid TOML escapes; TOML additionally forbids a raw DEL
    return json.dumps(value, ensure_ascii=False).replace("\x7f", "\\u007f")


def dumps(cfg: Mapping[str, Any]) -> str:
    lines = []
    for key in sorted(cfg):
        if not _BARE_KEY.match(key):
            raise ConfigError(key, "keys must be dotted bare words")
        lines.append(f"{key} = {_format_value(cfg[key])}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: Mapping[str, Any]) -> str:
    return hashlib.sha256(dumps(cfg).encode("utf-8")).hexdigest()


def derived_gamma(cfg: Mapping[str, Any]) -> float:
    if cfg["ppo.gamma"] != -1.0:
        return cfg["ppo.gamma"]
    return 0.0 if cfg["env.n_groups"] == 1 else 1.0
