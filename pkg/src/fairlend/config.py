"""Loading environment and training configurations from JSON documents.

Document layout (every key optional except ``env.num_levels`` and the two
group blocks)::

    {
      "env": {
        "num_levels": 7,
        "group_prior": 0.5,
        "horizon": 20,
        "reward_success": 1.0,
        "reward_default": 2.0,
        "groups": {
          "plus":  {"init_score_dist": [...], "repay_prob": [...],
                    "drift_dist": [p_down, p_stay, p_up],
                    "gain_potential": [...]},
          "minus": {...}
        }
      },
      "train": {"algo": "ppo-c", "beta_kl": 10.0, ...}
    }

Unknown keys anywhere are rejected.  ``gain_potential`` must be given for
both groups or neither.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Union

import numpy as np

from .env import GROUP_NAMES, ConfigError, EnvConfig
from .trainer import TrainConfig

PRESETS = ("setting1", "setting2", "setting3")

_ENV_KEYS = {"num_levels", "group_prior", "horizon", "reward_success", "reward_default", "groups"}
_GROUP_KEYS = {"init_score_dist", "repay_prob", "drift_dist", "gain_potential"}
_REQUIRED_GROUP_KEYS = {"init_score_dist", "repay_prob", "drift_dist"}


def _reject_unknown(where: str, doc: dict, allowed: set) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(doc).__name__}")
    extra = sorted(set(doc) - allowed)
    if extra:
        raise ConfigError(f"{where}: unknown key {extra[0]!r}")


def _vector(where: str, value) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected a list of numbers") from None
    if arr.ndim != 1:
        raise ConfigError(f"{where}: expected a flat list of numbers")
    return arr


def _check_prob_vector(where: str, arr: np.ndarray, must_sum: bool) -> None:
    if np.any(arr < 0) or np.any(arr > 1):
        raise ConfigError(f"{where}: entries must lie in [0, 1]")
    if must_sum and abs(arr.sum() - 1.0) > 1e-12:
        raise ConfigError(f"{where}: probabilities sum to {float(arr.sum())!r}, not 1")


def env_config_from_dict(doc: dict) -> EnvConfig:
    _reject_unknown("env", doc, _ENV_KEYS)
    for key in ("num_levels", "groups"):
        if key not in doc:
            raise ConfigError(f"env: missing required key {key!r}")
    c = doc["num_levels"]
    if not isinstance(c, int) or isinstance(c, bool) or c < 2:
        raise ConfigError(f"env.num_levels: expected an integer >= 2, got {c!r}")
    groups = doc["groups"]
    _reject_unknown("env.groups", groups, set(GROUP_NAMES))
    blocks = {}
    for name in GROUP_NAMES:
        if name not in groups:
            raise ConfigError(f"env.groups: missing group {name!r}")
        block = groups[name]
        where = f"env.groups.{name}"
        _reject_unknown(where, block, _GROUP_KEYS)
        missing = sorted(_REQUIRED_GROUP_KEYS - set(block))
        if missing:
            raise ConfigError(f"{where}: missing required key {missing[0]!r}")
        parsed = {k: _vector(f"{where}.{k}", v) for k, v in block.items()}
        for key, expected in (("init_score_dist", c), ("repay_prob", c), ("drift_dist", 3)):
            if parsed[key].shape != (expected,):
                raise ConfigError(f"{where}.{key}: expected {expected} entries, got {len(parsed[key])}")
            _check_prob_vector(f"{where}.{key}", parsed[key], key != "repay_prob")
        if "gain_potential" in parsed and parsed["gain_potential"].shape != (c,):
            raise ConfigError(f"{where}.gain_potential: expected {c} entries")
        blocks[name] = parsed
    has_pot = ["gain_potential" in blocks[n] for n in GROUP_NAMES]
    if any(has_pot) and not all(has_pot):
        raise ConfigError("env.groups: gain_potential must be given for both groups or neither")

    def stack(key):
        return np.stack([blocks[n][key] for n in GROUP_NAMES])

    kwargs = {k: doc[k] for k in ("group_prior", "horizon", "reward_success", "reward_default") if k in doc}
    if "horizon" in kwargs and (not isinstance(kwargs["horizon"], int) or isinstance(kwargs["horizon"], bool)):
        raise ConfigError(f"env.horizon: expected an integer, got {kwargs['horizon']!r}")
    return EnvConfig(
        num_levels=c,
        init_score_dist=stack("init_score_dist"),
        repay_prob=stack("repay_prob"),
        drift_dist=stack("drift_dist"),
        gain_potential=stack("gain_potential") if all(has_pot) else None,
        **kwargs,
    )


def env_config_to_dict(config: EnvConfig) -> dict:
    groups = {}
    for s, name in enumerate(GROUP_NAMES):
        block = {
            "init_score_dist": config.init_score_dist[s].tolist(),
            "repay_prob": config.repay_prob[s].tolist(),
            "drift_dist": config.drift_dist[s].tolist(),
        }
        if config.gain_potential is not None:
            block["gain_potential"] = config.gain_potential[s].tolist()
        groups[name] = block
    return {
        "num_levels": config.num_levels,
        "group_prior": config.group_prior,
        "horizon": config.horizon,
        "reward_success": config.reward_success,
        "reward_default": config.reward_default,
        "groups": groups,
    }


def train_config_from_dict(doc: dict, base: TrainConfig | None = None) -> TrainConfig:
    _reject_unknown("train", doc, set(TrainConfig.field_names()))
    base = base or TrainConfig()
    try:
        return base.replace(**doc)
    except TypeError as exc:
        raise ConfigError(f"train: invalid value type ({exc})") from None


def config_from_dict(doc: dict) -> tuple[EnvConfig, TrainConfig]:
    _reject_unknown("config", doc, {"env", "train"})
    if "env" not in doc:
        raise ConfigError("config: missing required key 'env'")
    env = env_config_from_dict(doc["env"])
    train = train_config_from_dict(doc.get("train", {}))
    return env, train


def preset_document(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    text = resources.files("fairlend.presets").joinpath(f"{name}.json").read_text(encoding="utf-8")
    return json.loads(text)


def load_preset(name: str) -> tuple[EnvConfig, TrainConfig]:
    return config_from_dict(preset_document(name))


def load_config(path: Union[str, Path]) -> tuple[EnvConfig, TrainConfig]:
    """Parse and validate a config file, or resolve a preset name."""
    if str(path) in PRESETS:
        return load_preset(str(path))
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(doc)
