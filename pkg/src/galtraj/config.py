"""Run-config files: one YAML document holding every hyperparameter.

Unknown keys are rejected so typos fail loudly instead of silently falling
back to defaults. Command-line flags override individual keys via
:func:`apply_overrides`.
"""
from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .diffusion import TrajectoryDenoiser
from .exceptions import ConfigurationError
from .guidance import GuidanceConfig
from .loop import RunConfig
from .world import DatasetConfig, Horizons

DEFAULTS: dict = {
    "seed": 0,
    "dataset": {
        "train_count": 2000,
        "val_count": 500,
        "topology_mix": dict(DatasetConfig().topology_mix),
        "maneuver_mix": dict(DatasetConfig().maneuver_mix),
        "min_agents": 3,
        "max_agents": 8,
        "horizons": Horizons().as_dict(),
    },
    "denoiser": {k: v for k, v in TrajectoryDenoiser().get_params().items() if k != "random_state"},
    "run": {
        "total_epochs": 9,
        "initial_fraction": "2/3",
        "tau_policy": "quantile",
        "tau_quantile": 95.0,
        "tau_value": None,
        "alpha": 0.9,
        "w_min": 0.2,
        "epoch_size": 8000,
        "max_shift": None,
        "generation_batch": 32,
        "predictor": {},
    },
    "guidance": GuidanceConfig().as_dict(),
    "eval": {
        "top_ks": [1, 3, 5],
        "var_alpha": 999,
        "fpr_thresholds": [1.0, 2.0],
    },
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, update: dict, prefix: str = "") -> dict:
    for key, value in update.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigurationError(f"unknown config key {name!r}")
        free_form = name in ("run.predictor", "dataset.topology_mix", "dataset.maneuver_mix")
        if isinstance(base[key], dict) and not free_form:
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key {name!r} must be a mapping")
            _merge(base[key], value, name + ".")
        else:
            base[key] = value
    return base


def load_config(path=None) -> dict:
    """Defaults merged with the YAML file at ``path`` (``None`` gives the defaults)."""
    cfg = default_config()
    if path is None:
        return cfg
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc.strerror}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {path} must hold a mapping")
    return _merge(cfg, data)


def apply_overrides(cfg: dict, overrides: dict) -> dict:
    """Set dotted keys, e.g. ``{"run.total_epochs": 3}``; ``None`` values are skipped."""
    cfg = copy.deepcopy(cfg)
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = cfg
        *parents, leaf = dotted.split(".")
        for p in parents:
            if not isinstance(node.get(p), dict):
                raise ConfigurationError(f"unknown config key {dotted!r}")
            node = node[p]
        if leaf not in node:
            raise ConfigurationError(f"unknown config key {dotted!r}")
        node[leaf] = value
    return cfg


def dump_config(cfg: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path


def dataset_config(cfg: dict, split: str = "train") -> DatasetConfig:
    d = cfg["dataset"]
    count = d["train_count"] if split == "train" else d["val_count"]
    try:
        out = DatasetConfig(count=int(count), topology_mix=dict(d["topology_mix"]),
                            maneuver_mix=dict(d["maneuver_mix"]), min_agents=int(d["min_agents"]),
                            max_agents=int(d["max_agents"]), horizons=Horizons(**d["horizons"]))
    except TypeError as exc:
        raise ConfigurationError(f"bad dataset config: {exc}") from exc
    return out.validate()


def split_seed(cfg: dict, split: str) -> int:
    """Train uses the run seed, validation the next one."""
    return int(cfg["seed"]) + (0 if split == "train" else 1)


def make_denoiser(cfg: dict) -> TrajectoryDenoiser:
    try:
        return TrajectoryDenoiser(random_state=int(cfg["seed"]), **cfg["denoiser"])
    except TypeError as exc:
        raise ConfigurationError(f"bad denoiser config: {exc}") from exc


def guidance_config(cfg: dict) -> GuidanceConfig:
    try:
        return GuidanceConfig(**cfg["guidance"])
    except TypeError as exc:
        raise ConfigurationError(f"bad guidance config: {exc}") from exc


def run_config(cfg: dict) -> RunConfig:
    try:
        return RunConfig(guidance=guidance_config(cfg), seed=int(cfg["seed"]), **cfg["run"])
    except TypeError as exc:
        raise ConfigurationError(f"bad run config: {exc}") from exc
