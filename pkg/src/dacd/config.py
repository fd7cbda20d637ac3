"""Experiment configuration shared by the command line and the protocol runner.

A config file is a JSON document with the sections below; every section and
key is optional, unknown keys are rejected, and :meth:`ExperimentConfig.resolved`
returns the full document with every default filled in.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .data import SynthSpec
from .network import MODES, NetworkConfig, TrainConfig

MODE_ALIASES = {"dsdanet": "dsdanet", "v1": "dscnet_v1", "v2": "dscnet_v2", "v3": "dscnet_v3"}


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass
class TrainSection:
    lam: float = 3.0
    batch_size: int = 64
    epochs: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    beta_refresh_interval: int = 0
    n_kernels: int = 5
    kernel_spread: float = 2.0
    mode: str = "dsdanet"


@dataclass
class SamplingSection:
    fraction: float = 0.1
    max_ratio: float = 4.0
    finetune_count: int = 200


@dataclass
class FinetuneSection:
    epochs: int = 200
    lr: float = 0.05
    unchanged_weight: float = 4.0


@dataclass
class PathsSection:
    data_dir: str = "data"
    source_prefix: str = "source"
    target_prefix: str = "target"


def _build(cls, raw, where):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def normalize_mode(mode):
    if mode in MODE_ALIASES:
        return MODE_ALIASES[mode]
    if mode in MODES:
        return mode
    raise ConfigError(f"mode must be one of {sorted(MODE_ALIASES)}, got {mode!r}")


@dataclass
class ExperimentConfig:
    seed: int = 42
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainSection = field(default_factory=TrainSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    synth: SynthSpec = field(default_factory=SynthSpec)
    paths: PathsSection = field(default_factory=PathsSection)

    SECTIONS = {
        "network": NetworkConfig,
        "train": TrainSection,
        "sampling": SamplingSection,
        "finetune": FinetuneSection,
        "synth": SynthSpec,
        "paths": PathsSection,
    }

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(raw) - set(cls.SECTIONS) - {"seed"})
        if unknown:
            raise ConfigError(f"unknown key(s) in config: {', '.join(unknown)}")
        parts = {name: _build(kind, raw.get(name), name) for name, kind in cls.SECTIONS.items()}
        seed = raw.get("seed", 42)
        cfg = cls(seed=seed, **parts)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON: {exc}") from None
        return cls.from_dict(raw)

    def validate(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        self.train.mode = normalize_mode(self.train.mode)
        if self.network.bands != self.synth.bands:
            raise ConfigError(f"network expects {self.network.bands} bands, synthetic spec has {self.synth.bands}")
        if not 0 < self.sampling.fraction <= 1:
            raise ConfigError("sampling.fraction must be in (0, 1]")
        if self.sampling.max_ratio <= 0 or self.sampling.finetune_count < 1:
            raise ConfigError("sampling.max_ratio and sampling.finetune_count must be positive")
        if self.finetune.epochs < 0 or self.finetune.lr <= 0 or self.finetune.unchanged_weight <= 0:
            raise ConfigError("finetune.epochs must be >= 0, finetune.lr and finetune.unchanged_weight > 0")
        self.train_config(self.train.mode)

    def train_config(self, mode=None):
        t = asdict(self.train)
        t["mode"] = normalize_mode(mode or self.train.mode)
        t["seed"] = self.seed
        try:
            return TrainConfig(**t)
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from None

    def resolved(self):
        return {
            "seed": self.seed,
            "network": self.network.to_dict(),
            "train": asdict(self.train),
            "sampling": asdict(self.sampling),
            "finetune": asdict(self.finetune),
            "synth": self.synth.to_dict(),
            "paths": asdict(self.paths),
        }
