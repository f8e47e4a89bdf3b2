"""Experiment configuration, the dotted-key config file format, and config hashing.

Config files are flat UTF-8 text, one ``dotted.key = value`` per line. Blank
lines and lines starting with ``#`` are ignored. Values are parsed against the
type of the field they target (int, float, bool, str), so every key is
type-checked and unknown keys are rejected::

    # toy.cfg
    data.classes = 10
    psc.lr = 0.05
    nsd.weights.lambda_nsd = 0.5
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .errors import ConfigError
from .losses import LossWeights


@dataclass
class DataConfig:
    source: str = "toy"  # toy | folder | file
    root: str = ""
    train_split: str = "train.txt"
    test_split: str = "test.txt"
    path: str = ""
    classes: int = 10
    n_per_class: int = 50
    dim: int = 16
    separation: float = math.pi / 3
    noise: float = 0.15
    token_dim: int = 64
    seed: int = 0


@dataclass
class ModelConfig:
    embed_dim: int = 32
    key_dim: int = 16
    teacher_hidden: int = 256
    student_hidden: int = 64
    student_dim: int = 32
    encoder_seed: int = 1234
    init_std: float = 0.02


@dataclass
class PSCConfig:
    lr: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 200
    batch_size: int = 128
    tau_psc: float = 0.07
    n_ctx: int = 16
    init_std: float = 0.02
    symmetric: bool = False
    prompt: str = "learned"  # learned | template
    seed: int = 0


@dataclass
class NSDConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 300
    batch_size: int = 128
    min_lr: float = 1e-5
    grad_clip: float = 5.0  # <= 0 disables clipping
    weights: LossWeights = field(default_factory=LossWeights)
    weight_schedule: str = "fixed"  # fixed | linear
    weights_end: LossWeights = field(default_factory=LossWeights)
    seed: int = 0


@dataclass
class PathsConfig:
    anchors: str = ""
    checkpoints: str = ""
    metrics: str = ""


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    psc: PSCConfig = field(default_factory=PSCConfig)
    nsd: NSDConfig = field(default_factory=NSDConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self, num_classes: int | None = None) -> "TrainConfig":
        psc, nsd = self.psc, self.nsd
        for name, value in [("psc.lr", psc.lr), ("nsd.lr", nsd.lr), ("psc.tau_psc", psc.tau_psc),
                            ("psc.batch_size", psc.batch_size), ("nsd.batch_size", nsd.batch_size),
                            ("psc.n_ctx", psc.n_ctx)]:
            if not value > 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        for name, value in [("psc.epochs", psc.epochs), ("nsd.epochs", nsd.epochs),
                            ("psc.momentum", psc.momentum), ("psc.weight_decay", psc.weight_decay),
                            ("nsd.weight_decay", nsd.weight_decay), ("nsd.min_lr", nsd.min_lr)]:
            if value < 0:
                raise ConfigError(f"{name} must be >= 0, got {value}")
        if nsd.min_lr > nsd.lr:
            raise ConfigError(f"nsd.min_lr ({nsd.min_lr}) exceeds nsd.lr ({nsd.lr})")
        if nsd.weight_schedule not in ("fixed", "linear"):
            raise ConfigError(f"nsd.weight_schedule must be 'fixed' or 'linear', got {nsd.weight_schedule!r}")
        if psc.prompt not in ("learned", "template"):
            raise ConfigError(f"psc.prompt must be 'learned' or 'template', got {psc.prompt!r}")
        if self.data.source not in ("toy", "folder", "file"):
            raise ConfigError(f"data.source must be toy, folder or file, got {self.data.source!r}")
        nsd.weights.validate(num_classes)
        nsd.weights_end.validate(num_classes)
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def flat(self) -> dict[str, Any]:
        return dict(_flatten(self))

    def config_hash(self) -> str:
        """SHA-256 over the canonical JSON of the fully-resolved config."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def replace(self, **overrides: Any) -> "TrainConfig":
        """Copy with ``dotted.key=value`` overrides given as keyword args (dots as ``__``)."""
        out = copy.deepcopy(self)
        for key, value in overrides.items():
            set_key(out, key.replace("__", "."), value)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        out = cls()
        for key, value in _flatten_dict(d):
            set_key(out, key, value)
        return out


def _flatten(obj: Any, prefix: str = "") -> Iterable[tuple[str, Any]]:
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            yield from _flatten(value, key + ".")
        else:
            yield key, value


def _flatten_dict(d: dict[str, Any], prefix: str = "") -> Iterable[tuple[str, Any]]:
    for k, v in d.items():
        if isinstance(v, dict):
            yield from _flatten_dict(v, f"{prefix}{k}.")
        else:
            yield f"{prefix}{k}", v


def _coerce(key: str, current: Any, value: Any) -> Any:
    kind = type(current)
    if isinstance(value, str):
        text = value.strip()
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        if kind is int:
            try:
                return int(text)
            except ValueError:
                raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
        if kind is float:
            try:
                return float(text)
            except ValueError:
                raise ConfigError(f"{key}: expected a number, got {value!r}") from None
        return text
    if kind is bool and not isinstance(value, bool):
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if kind is str and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def set_key(cfg: Any, key: str, value: Any) -> None:
    """Assign ``value`` to the dotted ``key`` inside a (nested, frozen or not) dataclass tree."""
    parts = key.split(".")
    chain = [cfg]
    for part in parts[:-1]:
        node = chain[-1]
        if not dataclasses.is_dataclass(node) or part not in {f.name for f in dataclasses.fields(node)}:
            raise ConfigError(f"unknown config key: {key}")
        chain.append(getattr(node, part))
    leaf = chain[-1]
    name = parts[-1]
    if not dataclasses.is_dataclass(leaf) or name not in {f.name for f in dataclasses.fields(leaf)}:
        raise ConfigError(f"unknown config key: {key}")
    current = getattr(leaf, name)
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"config key {key} names a section, not a value")
    new = _coerce(key, current, value)
    # LossWeights is frozen: rebuild it and re-attach up the chain.
    for depth in range(len(chain) - 1, -1, -1):
        node = chain[depth]
        if getattr(type(node), "__dataclass_params__").frozen:
            new = dataclasses.replace(node, **{name: new})
            name = parts[depth - 1]
            continue
        setattr(node, name, new)
        break


def parse_config_text(text: str, base: TrainConfig | None = None, source: str = "<config>") -> TrainConfig:
    cfg = copy.deepcopy(base) if base is not None else TrainConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        try:
            set_key(cfg, key.strip(), value.strip())
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return cfg


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text, base, source=str(path))


def dump_config(cfg: TrainConfig) -> str:
    """Render ``cfg`` in the dotted-key file format; ``parse_config_text`` inverts it."""
    lines = []
    for key, value in cfg.flat().items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def toy_config(**overrides: Any) -> TrainConfig:
    """Desk-scale settings: 10-class toy data, rates raised so short runs converge."""
    cfg = TrainConfig()
    cfg.psc.lr = 0.05
    cfg.psc.epochs = 100
    cfg.nsd.lr = 3e-3
    cfg.nsd.min_lr = 1e-4
    cfg.nsd.epochs = 50
    return cfg.replace(**overrides)
