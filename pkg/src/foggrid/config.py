"""JSON run configuration.

Every key is optional; missing keys take the defaults below, which describe
the 2x3 case-study grid. Unknown keys are rejected with their full key path.

    {
      "network": {"rows": 2, "cols": 3},
      "sim": {"decision_interval": 5.0, "arrival_rate": 2200.0, "saturation_headway": 2.0,
              "link_traversal_time": 30.0, "lane_capacity": 40,
              "turn_probabilities": [0.70, 0.15, 0.15], "lost_time": 0.0},
      "fog": {"preset": "two_fog_rows", "fogs": null},
      "features": {"wait_scale": 120.0, "wave_scale": 50.0},
      "reward": {"sigma_wait": 1.0, "sigma_wave": 0.30, "reward_scale": 100.0},
      "agent": {"gamma": 0.9,  "lr": 1e-05, "tau": 0.001, "epsilon_start": 1.0,
                "epsilon_end": 0.05, "epsilon_decay_end": 70000, "batch_size": 64,
                "buffer_capacity": 20000, "train_every": 1, "leaky_slope": 0.2,
                "gat_activation": false},
      "train": {"total_steps": 100000, "warmup_steps": 20000, "episode_length": 1000,
                "eval_every": 0, "eval_steps": 1000},
      "io": {"out_dir": "runs/default", "checkpoint_every": 0, "log_every": 1000},
      "seed": 0
    }

``fog.preset`` is ``fully_observable``, ``two_fog_rows`` or ``custom``; with
``custom``, ``fog.fogs`` lists the intersection indices of each fog.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .agent import Hyperparams
from .graph import FeatureLayout
from .sim import SimConfig
from .trainer import TrainConfig


class ConfigFileError(ValueError):
    pass


DEFAULTS: dict = {
    "network": {"rows": 2, "cols": 3},
    "sim": {
        "decision_interval": 5.0,
        "arrival_rate": 2200.0,
        "saturation_headway": 2.0,
        "link_traversal_time": 30.0,
        "lane_capacity": 40,
        "turn_probabilities": [0.70, 0.15, 0.15],
        "lost_time": 0.0,
    },
    "fog": {"preset": "two_fog_rows", "fogs": None},
    "features": {"wait_scale": 120.0, "wave_scale": 50.0},
    "reward": {"sigma_wait": 1.0, "sigma_wave": 0.30, "reward_scale": 100.0},
    "agent": Hyperparams().to_dict(),
    "train": {"total_steps": 100_000, "warmup_steps": 20_000, "episode_length": 1_000, "eval_every": 0, "eval_steps": 1_000},
    "io": {"out_dir": "runs/default", "checkpoint_every": 0, "log_every": 1_000},
    "seed": 0,
}

FOG_PRESETS = ("fully_observable", "two_fog_rows", "custom")


def _merge(defaults: dict, given: dict, path: str) -> dict:
    if not isinstance(given, dict):
        raise ConfigFileError(f"{path or '<root>'}: expected an object, got {type(given).__name__}")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigFileError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = _coerce(defaults[key], value, where)
    return out


def _coerce(default, value, where: str):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigFileError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not (isinstance(value, int) or (isinstance(value, float) and value.is_integer())):
            raise ConfigFileError(f"{where}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigFileError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigFileError(f"{where}: expected a list, got {value!r}")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigFileError(f"{where}: expected a string, got {value!r}")
    return value


def resolve(raw: dict | None = None) -> dict:
    """Defaults merged with ``raw``; validates fog settings."""
    cfg = _merge(DEFAULTS, raw or {}, "")
    fog = cfg["fog"]
    if fog["preset"] not in FOG_PRESETS:
        raise ConfigFileError(f"fog.preset: expected one of {FOG_PRESETS}, got {fog['preset']!r}")
    if fog["preset"] == "custom":
        if not isinstance(fog["fogs"], list) or not all(isinstance(f, list) for f in fog["fogs"]):
            raise ConfigFileError("fog.fogs: custom preset needs a list of index lists")
    return cfg


def load(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigFileError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigFileError(f"{path}: invalid JSON: {exc}") from exc
    return resolve(raw)


def to_train_config(cfg: dict) -> TrainConfig:
    """Build a validated TrainConfig; invalid values surface as ConfigFileError."""
    try:
        s = cfg["sim"]
        sim = SimConfig(**{**s, "turn_probabilities": tuple(s["turn_probabilities"]), "seed": cfg["seed"]})
        fog = cfg["fog"]
        partition = fog["fogs"] if fog["preset"] == "custom" else fog["preset"]
        tc = TrainConfig(
            rows=cfg["network"]["rows"],
            cols=cfg["network"]["cols"],
            sim=sim,
            partition=partition,
            hp=Hyperparams(**cfg["agent"]),
            layout=FeatureLayout(**cfg["features"]),
            **cfg["reward"],
            **cfg["train"],
            checkpoint_every=cfg["io"]["checkpoint_every"],
            log_every=cfg["io"]["log_every"],
            seed=cfg["seed"],
        )
        tc.fog_partition(tc.build_network()).assignment(tc.rows * tc.cols)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigFileError):
            raise
        raise ConfigFileError(str(exc)) from exc
    return tc


def resolved_snapshot(cfg: dict, tc: TrainConfig) -> dict:
    """``cfg`` with the fog lists expanded to explicit indices."""
    out = copy.deepcopy(cfg)
    out["fog"]["fogs"] = tc.fog_partition(tc.build_network()).to_lists()
    return out


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
