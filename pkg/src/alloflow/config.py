"""Experiment configuration: one JSON document, strictly validated.

Component seeds left unset are derived from the global seed by hashing
``"{seed}/{component}"``, so changing one stage's seed leaves the others alone.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .data import DataSpec, DegradeSpec
from .net import NetConfig
from .snr import SnrSearchConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


def derive_seed(seed: int, component: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{component}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class NetSettings:
    hidden_dims: list[int] = field(default_factory=lambda: [64, 64])
    time_embed_dim: int = 16
    activation: str = "silu"
    init_seed: int | None = None

    def build(self, in_dim: int) -> NetConfig:
        return NetConfig(in_dim, list(self.hidden_dims), self.time_embed_dim, self.activation, self.init_seed)


@dataclass
class EvalSettings:
    n_samples: int = 2048
    sample_steps: int = 100
    curvature_steps: int = 32
    seed: int | None = None


def _default_pretrain() -> TrainConfig:
    return TrainConfig(iterations=3000, batch_size=64, lr=2e-3, seed=None)


def _default_train_sr() -> TrainConfig:
    return TrainConfig(iterations=2000, batch_size=16, lr=3e-4, seed=None)


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    n_train: int = 512
    n_eval: int = 1024
    data: DataSpec = field(default_factory=lambda: DataSpec(seed=None))
    degrade: DegradeSpec = field(default_factory=lambda: DegradeSpec(seed=None))
    net: NetSettings = field(default_factory=NetSettings)
    snr: SnrSearchConfig = field(default_factory=SnrSearchConfig)
    pretrain: TrainConfig = field(default_factory=_default_pretrain)
    train_sr: TrainConfig = field(default_factory=_default_train_sr)
    eval: EvalSettings = field(default_factory=EvalSettings)

    # -- seeds -----------------------------------------------------------

    def resolve_seeds(self) -> ExperimentConfig:
        """Fill every unset component seed from the global seed (in place)."""
        slots = {
            "data": self.data,
            "degrade": self.degrade,
            "pretrain": self.pretrain,
            "train_sr": self.train_sr,
            "eval": self.eval,
        }
        for name, obj in slots.items():
            if obj.seed is None:
                obj.seed = derive_seed(self.seed, name)
        if self.net.init_seed is None:
            self.net.init_seed = derive_seed(self.seed, "net")
        return self

    def split_specs(self, split: str) -> tuple[DataSpec, DegradeSpec, int]:
        if split == "train":
            return self.data, self.degrade, self.n_train
        if split == "eval":
            d = dataclasses.replace(self.data, seed=derive_seed(self.data.seed, "eval"))
            g = dataclasses.replace(self.degrade, seed=derive_seed(self.degrade.seed, "eval"))
            return d, g, self.n_eval
        raise ConfigError(f"split: unknown split {split!r}")

    @property
    def net_config(self) -> NetConfig:
        return self.net.build(self.data.dim)

    # -- (de)serialisation ----------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        return _build(cls(), raw, "").resolve_seeds()

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config: file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config: invalid JSON in {path}: {e}") from None
        return cls.from_dict(raw)


def _build(default, raw: Any, prefix: str):
    """Overlay ``raw`` onto the dataclass instance ``default``, recursively."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected an object")
    cls = type(default)
    names = [f.name for f in dataclasses.fields(cls)]
    for key in raw:
        if key not in names:
            raise ConfigError(f"{prefix}{key}: unknown key")
    merged = {}
    for name in names:
        base = getattr(default, name)
        if name not in raw:
            merged[name] = base
        elif dataclasses.is_dataclass(base):
            merged[name] = _build(base, raw[name], f"{prefix}{name}.")
        else:
            merged[name] = raw[name]
    try:
        return cls(**merged)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {e}") from None


def apply_override(raw: dict, assignment: str) -> None:
    """Apply ``a.b.c=value`` to a raw config dict; ``value`` is parsed as JSON if possible."""
    if "=" not in assignment:
        raise ConfigError(f"{assignment}: override must look like key=value")
    key, value = assignment.split("=", 1)
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    node = raw
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key}: cannot override inside a non-object")
    node[parts[-1]] = parsed
