"""Experiment configuration: four TOML tables with defaults for every key."""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

METHODS = ("coda", "rp", "uds_rp", "pds", "goal_pred", "oracle_reward")
SOLVERS = ("pevi", "fqi", "iql", "pspi")
TEST_MODES = ("in_distribution", "shifted")


class ConfigError(ValueError):
    pass


@dataclass
class EnvConfig:
    map: str = "medium"
    relation: str = "four_rooms"
    radius: float = 2.0
    slip: float = 0.1
    discount: float = 0.99


@dataclass
class DataConfig:
    n_dyn: int = 20_000
    n_goal: int = 200
    behavior: str = "play"
    perturb: bool = True
    seed: int = 0


@dataclass
class MethodConfig:
    name: str = "coda"
    solver: str = "pevi"
    goal_ratio: float = 0.5
    penalty: float = 1.0
    iters: int = 5000
    expectile: float = 0.9
    inv_temp: float = 10.0
    pspi_rounds: int = 400
    pspi_eps_dyn: float = 1e-4
    ensemble: int = 10
    kappa: float = 15.0
    rp_percentile: float = 5.0
    pds_percentile: float = 15.0
    smoothing: float = 0.01
    bandwidth: float = 1.0
    her_relabels: int = 4


@dataclass
class EvalConfig:
    episodes: int = 100
    horizon: int = 0  # 0 means 4 * (map height + width)
    test_contexts: str = "in_distribution"
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    data: DataConfig = field(default_factory=DataConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "ExperimentConfig":
        if self.method.name not in METHODS:
            raise ConfigError(f"unknown method {self.method.name!r}; valid: {', '.join(METHODS)}")
        if self.method.solver not in SOLVERS:
            raise ConfigError(f"unknown solver {self.method.solver!r}; valid: {', '.join(SOLVERS)}")
        if self.eval.test_contexts not in TEST_MODES:
            raise ConfigError(f"unknown test-context mode {self.eval.test_contexts!r}; valid: {', '.join(TEST_MODES)}")
        if self.data.n_dyn < 1 or self.data.n_goal < 1:
            raise ConfigError("dataset sizes must be at least 1")
        if not 0.0 < self.method.goal_ratio < 1.0:
            raise ConfigError("goal_ratio must lie strictly between 0 and 1")
        if self.eval.episodes < 1 or self.eval.horizon < 0:
            raise ConfigError("episodes must be positive and horizon non-negative")
        if not self.eval.seeds:
            raise ConfigError("at least one evaluation seed is required")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"env": EnvConfig, "data": DataConfig, "method": MethodConfig, "eval": EvalConfig}


def _coerce(cls, section: str, key: str, value):
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    default = getattr(cls(), key)
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{section}.{key} expects a boolean, got {value!r}")
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if isinstance(value, str):
                return [int(v) for v in value.split(",") if v.strip()]
            return [int(v) for v in value]
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{key} expects {types[key]}, got {value!r}") from None


def from_dict(doc: dict) -> ExperimentConfig:
    """Build a config from nested tables, rejecting unknown sections and keys."""
    cfg = ExperimentConfig()
    for section, values in doc.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]; valid: {', '.join(_SECTIONS)}")
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] must be a table")
        cls = _SECTIONS[section]
        target = getattr(cfg, section)
        names = {f.name for f in dataclasses.fields(cls)}
        for key, value in values.items():
            if key not in names:
                raise ConfigError(f"unknown key {section}.{key}; valid: {', '.join(sorted(names))}")
            setattr(target, key, _coerce(cls, section, key, value))
    return cfg.validate()


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Read a TOML file (optional) and apply ``section.key=value`` overrides."""
    doc: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        doc.setdefault(section, {})[name] = value.strip()
    return from_dict(doc)


__all__ = [
    "ConfigError",
    "DataConfig",
    "EnvConfig",
    "EvalConfig",
    "ExperimentConfig",
    "METHODS",
    "MethodConfig",
    "SOLVERS",
    "TEST_MODES",
    "from_dict",
    "load_config",
]
