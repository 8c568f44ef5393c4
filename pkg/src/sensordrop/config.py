"""Experiment configuration: dataclasses backed by an INI-style file.

File layout (every key optional, defaults below)::

    [experiment]
    seed = 0
    out_dir = runs/default

    [dataset]
    n_train = 680
    n_test = 171
    n_sensors = 6
    image_size = 32
    class_distribution = 0.25, 0.25, 0.25, 0.25
    placement_quality = 0.55, 0.6, 0.85, 0.35, 0.3, 0.7

    [env]
    feature_channels = 8
    cloud_channels = 16
    shared_sensors = true

    [pretrain]
    epochs = 30
    learning_rate = 0.001
    batch_size = 50
    patience = 5

    [rl]
    reward = quadratic          ; or harmonic
    k1 = 200
    ...

``SENSORDROP_SEED`` and ``SENSORDROP_OUT_DIR`` override the two
``[experiment]`` keys.
"""
from __future__ import annotations

import configparser
import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .agent import RewardConfig, TrainConfig
from .data import GeometryConfig
from .env import EnvConfig, PretrainConfig

SEED_ENV = "SENSORDROP_SEED"
OUT_DIR_ENV = "SENSORDROP_OUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class DatasetParams:
    n_train: int = 680
    n_test: int = 171
    n_sensors: int = 6
    image_size: int = 32
    class_distribution: tuple = (0.25, 0.25, 0.25, 0.25)
    placement_quality: tuple = (0.55, 0.6, 0.85, 0.35, 0.3, 0.7)

    def geometry(self):
        return GeometryConfig(
            n_sensors=self.n_sensors,
            image_size=self.image_size,
            class_distribution=tuple(self.class_distribution),
            placement_quality=tuple(self.placement_quality),
        )


@dataclass
class EnvParams:
    feature_channels: int = 8
    cloud_channels: int = 16
    shared_sensors: bool = True

    def env_config(self):
        return EnvConfig(feature_channels=self.feature_channels,
                         cloud_channels=self.cloud_channels,
                         shared_sensors=self.shared_sensors)


@dataclass
class PretrainParams:
    epochs: int = 30
    learning_rate: float = 0.001
    batch_size: int = 50
    patience: int = 5

    def pretrain_config(self):
        return PretrainConfig(epochs=self.epochs, learning_rate=self.learning_rate,
                              batch_size=self.batch_size, patience=self.patience)


@dataclass
class RLParams:
    reward: str = "quadratic"
    k1: float = 200.0
    k2: float = 100.0
    zeta: float = 100.0
    K: float = 0.4
    zeta_prime: float = 0.75
    alpha: float = 1e-4
    beta: float = 1e-4
    gamma: float = 0.99
    epochs: int = 200
    batch_size: int = 1
    optimizer: str = "rmsprop"
    actor_channels: tuple = (8, 16)
    freeze_env: bool = True
    eval_every: int = 1

    def reward_config(self):
        return RewardConfig(kind=self.reward, k1=self.k1, k2=self.k2, zeta=self.zeta,
                            K=self.K, zeta_prime=self.zeta_prime)

    def train_config(self):
        return TrainConfig(epochs=self.epochs, alpha=self.alpha, beta=self.beta,
                           gamma=self.gamma, optimizer=self.optimizer,
                           batch_size=self.batch_size,
                           channels=tuple(int(c) for c in self.actor_channels),
                           reward=self.reward_config())


@dataclass
class BaselineParams:
    rho: float = 0.75
    random_draws: int = 10


SECTIONS = {
    "dataset": DatasetParams,
    "env": EnvParams,
    "pretrain": PretrainParams,
    "rl": RLParams,
    "baseline": BaselineParams,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    dataset: DatasetParams = field(default_factory=DatasetParams)
    env: EnvParams = field(default_factory=EnvParams)
    pretrain: PretrainParams = field(default_factory=PretrainParams)
    rl: RLParams = field(default_factory=RLParams)
    baseline: BaselineParams = field(default_factory=BaselineParams)

    def to_dict(self):
        out = {"experiment": {"seed": self.seed, "out_dir": self.out_dir}}
        for name in SECTIONS:
            out[name] = {k: list(v) if isinstance(v, tuple) else v
                         for k, v in dataclasses.asdict(getattr(self, name)).items()}
        return out

    def to_ini(self):
        lines = []
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            for key, value in values.items():
                lines.append(f"{key} = {_format(value)}")
            lines.append("")
        return "\n".join(lines)

    def replace(self, **changes):
        """Copy with dotted overrides, e.g. ``replace(**{"rl.K": 0.1})``."""
        data = self.to_dict()
        for key, value in changes.items():
            section, _, name = key.rpartition(".")
            data[section or "experiment"][name] = value
        return config_from_dict(data, apply_env=False)


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw, default, where):
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(f"not an integer: {raw!r}")
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = raw if isinstance(raw, (list, tuple)) else str(raw).split(",")
            kind = type(default[0]) if default else float
            return tuple(kind(str(x).strip()) if not isinstance(x, (int, float)) else kind(x)
                         for x in items)
        return str(raw).strip()
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from None


def _build_section(cls, values, section):
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(sorted(unknown))}")
    kwargs = {k: _coerce(v, getattr(defaults, k), f"[{section}] {k}") for k, v in values.items()}
    return cls(**kwargs)


def config_from_dict(data, apply_env=True):
    unknown = set(data) - set(SECTIONS) - {"experiment"}
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(sorted(unknown))}")
    exp = dict(data.get("experiment", {}))
    bad = set(exp) - {"seed", "out_dir"}
    if bad:
        raise ConfigError(f"[experiment] unknown keys: {', '.join(sorted(bad))}")
    if apply_env:
        if os.environ.get(SEED_ENV):
            exp["seed"] = os.environ[SEED_ENV]
        if os.environ.get(OUT_DIR_ENV):
            exp["out_dir"] = os.environ[OUT_DIR_ENV]
    cfg = ExperimentConfig(
        seed=_coerce(exp.get("seed", 0), 0, "[experiment] seed"),
        out_dir=str(exp.get("out_dir", "runs/default")),
        **{name: _build_section(cls, data.get(name, {}), name) for name, cls in SECTIONS.items()},
    )
    validate(cfg)
    return cfg


def validate(cfg):
    try:
        cfg.dataset.geometry()
        cfg.rl.reward_config()
    except ValueError as err:
        raise ConfigError(str(err)) from None
    if cfg.dataset.n_train <= 0 or cfg.dataset.n_test <= 0:
        raise ConfigError("[dataset] split sizes must be positive")
    if not 0.0 <= cfg.baseline.rho <= 1.0:
        raise ConfigError("[baseline] rho must lie in [0, 1]")
    if cfg.rl.epochs < 0 or cfg.pretrain.epochs < 0:
        raise ConfigError("epoch counts must be nonnegative")
    if cfg.rl.batch_size < 1 or cfg.pretrain.batch_size < 1:
        raise ConfigError("batch sizes must be positive")
    if cfg.rl.optimizer not in ("sgd", "adam", "rmsprop"):
        raise ConfigError(f"[rl] unknown optimizer {cfg.rl.optimizer!r}")
    if len(cfg.rl.actor_channels) != 2:
        raise ConfigError("[rl] actor_channels needs two widths")


def parse_config(text, apply_env=True):
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str  # keep "K" distinct from "k"
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(str(err)) from None
    data = {section: dict(parser.items(section)) for section in parser.sections()}
    return config_from_dict(data, apply_env=apply_env)


def load_config(path=None, apply_env=True):
    """Read an INI config, or a JSON run summary carrying a ``config`` object."""
    if path is None:
        return config_from_dict({}, apply_env=apply_env)
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: {err}") from None
        return config_from_dict(data.get("config", data), apply_env=apply_env)
    return parse_config(text, apply_env=apply_env)


def save_config(cfg, path):
    Path(path).write_text(cfg.to_ini())
