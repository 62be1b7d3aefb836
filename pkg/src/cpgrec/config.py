"""Run configuration: ``key = value`` files overridden by command-line flags."""
from __future__ import annotations

import os
import typing
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .data import ConfigError, SynthConfig
from .graphs import ThetaConfig
from .propagation import FusionWeights
from .training import PRESETS, Hyperparams, resolve_preset


@dataclass
class RunConfig:
    # training
    learning_rate: float = 0.03
    batch_size: int = 1024
    dim: int = 32
    beta: float = 0.1
    m: float = 6.5
    l2: float = 1e-4
    k_ca: int = 2
    k_co: int = 3
    k_po: int = 3
    max_epochs: int = 100
    patience: int = 10
    nsr: bool = True
    popularity_quantile: float = 0.2
    preset: str = "balanced"
    theta_e_hot: float = 30.0
    theta_n_hot: float = 0.5
    theta_n_cold: float = 5.0
    w_ca: float = 0.4
    w_co: float = 0.3
    w_po: float = 0.3
    # data
    catalog: str = ""
    interactions: str = ""
    data: str = ""
    out: str = "runs/default"
    checkpoint: str = ""
    core_k: int = 5
    # synthetic data
    num_users: int = 1000
    num_games: int = 200
    num_genres: int = 20
    num_developers: int = 60
    num_publishers: int = 40
    zipf_exponent: float = 1.0
    interactions_per_user: float = 20.0
    # run control
    seed: int = 0
    deterministic: bool = False
    threads: int = 0
    save_every_epoch: bool = False
    resume: bool = False
    top_k: int = 10

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {self.preset!r}")

    def hyperparams(self) -> Hyperparams:
        names = {f.name for f in fields(Hyperparams)}
        return Hyperparams(**{k: v for k, v in asdict(self).items() if k in names})

    def fusion_and_theta(self):
        fusion = FusionWeights(self.w_ca, self.w_co, self.w_po)
        theta = ThetaConfig(self.theta_e_hot, self.theta_n_hot, self.theta_n_cold)
        return resolve_preset(self.preset, fusion, theta)

    def synth(self) -> SynthConfig:
        return SynthConfig(self.num_users, self.num_games, self.num_genres, self.num_developers,
                           self.num_publishers, self.zipf_exponent, self.interactions_per_user, self.seed)

    def resolved_threads(self) -> int:
        if self.deterministic:
            return 1
        if self.threads:
            return self.threads
        return int(os.environ.get("CPGREC_THREADS", "1") or 1)

    def dump(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for key, value in asdict(self).items():
                fh.write(f"{key} = {format_value(value)}\n")


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_HINTS = typing.get_type_hints(RunConfig)


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def coerce(key, raw):
    if key not in _HINTS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _HINTS[key]
    if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in {"1", "true", "yes", "on"}:
                return True
            if lowered in {"0", "false", "no", "off"}:
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_config_file(path) -> dict:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            key = key.replace("-", "_")
            values[key] = coerce(key, value)
    return values


def load_run_config(path=None, overrides=None) -> RunConfig:
    """Defaults, then the config file, then ``overrides`` (flags win)."""
    values = parse_config_file(path) if path else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = coerce(key, value)
    return RunConfig(**values)
