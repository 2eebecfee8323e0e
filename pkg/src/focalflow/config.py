"""Run configuration: YAML files, dotted overrides and resolution into typed configs."""

import copy
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .errors import ConfigurationError
from .objectives import ObjectiveConfig
from .sampler import AnchorConfig
from .trajectory import TASKS
from .training import TrainConfig

_TRAIN_KEYS = [f.name for f in fields(TrainConfig) if f.name not in ("objective", "anchor")]


@dataclass(frozen=True)
class DataConfig:
    task: str = "reach"
    count: int = 10
    length: int = 200
    seed: int = 0
    chunk_size: int = 4
    num_chunks: int = 3
    n_obs: int = 2
    demos: str = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.chunk_size < 1 or self.num_chunks < 1 or self.n_obs < 1:
            raise ConfigurationError("chunk_size, num_chunks and n_obs must be positive")


@dataclass(frozen=True)
class EvalConfig:
    mode: str = "open_loop"
    episodes: int = 30
    exec_steps: int = 4
    heldout_offset: int = 1000
    seed: int = 0
    tolerance: float = 0.05

    def __post_init__(self):
        if self.mode not in ("open_loop", "closed_loop"):
            raise ConfigurationError(f"unknown eval mode {self.mode!r}")


def _defaults():
    train = TrainConfig()
    return {
        "data": {f.name: getattr(DataConfig(), f.name) for f in fields(DataConfig)},
        "train": {k: v for k, v in train.to_dict().items() if k in _TRAIN_KEYS},
        "objective": ObjectiveConfig().to_dict(),
        "anchor": AnchorConfig().to_dict(),
        "eval": {f.name: getattr(EvalConfig(), f.name) for f in fields(EvalConfig)},
    }


DEFAULTS = _defaults()
DEFAULTS["objective"]["prefix_len"] = None  # follows data.chunk_size
FLOAT_KEYS = {
    ("train", "learning_rate"), ("train", "eps"), ("train", "weight_decay"),
    ("train", "ema_max_decay"), ("train", "tolerance"), ("objective", "lambda"),
    ("objective", "alpha"), ("objective", "delta_tau"), ("anchor", "mu"), ("anchor", "sigma"),
    ("anchor", "fixed_value"), ("eval", "tolerance"),
}


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig
    train: TrainConfig
    eval: EvalConfig
    raw: dict


def _coerce(section, key, value):
    # YAML 1.1 reads "1e-4" as a string; numbers in float slots are converted
    if (section, key) in FLOAT_KEYS and isinstance(value, (str, int)) and not isinstance(value, bool):
        try:
            return float(value)
        except ValueError:
            raise ConfigurationError(f"{section}.{key} must be a number, got {value!r}") from None
    return value


def merge(base, update):
    out = copy.deepcopy(base)
    for section, values in (update or {}).items():
        if section not in out:
            raise ConfigurationError(f"unknown config section {section!r}; expected {sorted(out)}")
        if not isinstance(values, dict):
            raise ConfigurationError(f"config section {section!r} must be a mapping")
        for key, value in values.items():
            if key not in out[section]:
                raise ConfigurationError(
                    f"unknown key {section}.{key}; valid keys: {sorted(out[section])}"
                )
            out[section][key] = _coerce(section, key, value)
    return out


def parse_value(text):
    value = yaml.safe_load(text)
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value


def apply_overrides(cfg, overrides):
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars or lists."""
    update = {}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form section.key=value")
        path, text = item.split("=", 1)
        parts = path.strip().split(".")
        if len(parts) != 2:
            raise ConfigurationError(f"override key {path!r} must be section.key")
        update.setdefault(parts[0], {})[parts[1]] = parse_value(text)
    return merge(cfg, update)


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return merge(DEFAULTS, doc)


def resolve(cfg, variant=None):
    """Typed configs from a merged dictionary; ``variant`` overrides ``objective.variant``."""
    cfg = copy.deepcopy(cfg)
    if variant is not None:
        cfg["objective"]["variant"] = variant
    if cfg["objective"].get("prefix_len") is None:
        cfg["objective"]["prefix_len"] = cfg["data"]["chunk_size"]
    try:
        data = DataConfig(**cfg["data"])
        objective = ObjectiveConfig.from_dict(cfg["objective"])
        anchor = AnchorConfig(**cfg["anchor"])
        train = TrainConfig(**cfg["train"], objective=objective, anchor=anchor)
        ev = EvalConfig(**cfg["eval"])
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    objective.check_horizon(data.chunk_size * data.num_chunks)
    if objective.variant == "flowpolicy_baseline" and data.num_chunks != 1:
        raise ConfigurationError("flowpolicy_baseline predicts a single chunk; set data.num_chunks=1")
    return RunConfig(data, train, ev, cfg)


def dump_config(cfg):
    return yaml.safe_dump(cfg, sort_keys=True)
