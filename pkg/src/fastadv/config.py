"""Experiment configuration: flat ``section.key = value`` text files.

Example::

    # comment
    dataset.kind = idx
    dataset.train_images = data/mnist/train-images-idx3-ubyte
    train.method = FGSM_PCO
    train.epsilon = 8/255

Values are typed from the dataclass fields below; fractions such as ``8/255``
are accepted for floats, comma-separated lists for tuples and ``none`` for
optional values. Every problem is reported as ``ConfigError`` naming the field.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional

from .metrics import DetectorThresholds
from .trainers import ConfigError, TrainConfig

DATASET_KINDS = ("blobs", "idx", "cifar10")


@dataclass
class DatasetSpec:
    kind: str = ""
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_path: str = ""
    test_path: str = ""
    train_limit: Optional[int] = None
    test_limit: Optional[int] = None
    num_classes: int = 10
    # blobs only
    classes: int = 3
    dim: int = 8
    n_per_class: int = 100
    n_test_per_class: int = 50
    spread: float = 0.1
    seed: int = 0


@dataclass
class ModelSpec:
    arch: str = "mlp"
    hidden: tuple[int, ...] = (128, 64)
    channels: tuple[int, ...] = (16, 32)
    fc_width: int = 64
    init_seed: Optional[int] = None  # defaults to train.seed


@dataclass
class EvalSpec:
    attacks: tuple[str, ...] = ("fgsm", "pgd10")
    epsilon: Optional[float] = None  # defaults to train.epsilon
    batch_size: int = 256
    seed: int = 0


@dataclass
class RunSpec:
    out_dir: str = "runs/default"
    checkpoint_every: int = 0
    precision: int = 32


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)
    run: RunSpec = field(default_factory=RunSpec)
    detector: DetectorThresholds = field(default_factory=DetectorThresholds)

    def to_dict(self) -> dict:
        out = {}
        for sec in fields(self):
            obj = getattr(self, sec.name)
            out[sec.name] = {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
        return out

    @property
    def eval_epsilon(self) -> float:
        return self.train.epsilon if self.eval.epsilon is None else self.eval.epsilon


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


_SECTIONS = {f.name: f for f in fields(ExperimentConfig)}


def _parse_scalar(key: str, text: str, typ):
    origin = typing.get_origin(typ)
    if origin is typing.Union:  # Optional[X]
        if text.lower() in ("none", "null", ""):
            return None
        inner = [a for a in typing.get_args(typ) if a is not type(None)][0]
        return _parse_scalar(key, text, inner)
    if origin is tuple:
        inner = typing.get_args(typ)[0]
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(_parse_scalar(key, p, inner) for p in parts)
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(Fraction(text))
        if typ is str:
            return text
    except (ValueError, ZeroDivisionError):
        raise ConfigError(key, f"cannot parse {text!r} as {typ.__name__}") from None
    raise ConfigError(key, f"unsupported field type {typ}")


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _read_pairs(text: str, source: str) -> list[tuple[str, str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs.append((key, value, f"{source}:{lineno}"))
    return pairs


def parse_config(path=None, overrides: Iterable[str] = (), seed: Optional[int] = None,
                 out: Optional[str] = None, check_paths: bool = True) -> ExperimentConfig:
    """Build a validated :class:`ExperimentConfig` from a file plus ``key=value`` overrides."""
    pairs = []
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(str(path), f"cannot read config: {exc.strerror}") from None
        pairs += _read_pairs(text, p.name)
    for item in overrides:
        if "=" not in item:
            raise ConfigError("--override", f"expected key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        pairs.append((key, value, "--override"))

    cfg = ExperimentConfig()
    for key, value, where in pairs:
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigError(key, f"unknown key ({where}); sections are {sorted(_SECTIONS)}")
        obj = getattr(cfg, section)
        hints = _hints(type(obj))
        if name not in hints or name not in {f.name for f in fields(obj)}:
            raise ConfigError(key, f"unknown key ({where})")
        parsed = _parse_scalar(key, value, hints[name])
        if dataclasses.is_dataclass(obj) and getattr(type(obj), "__dataclass_params__").frozen:
            obj = dataclasses.replace(obj, **{name: parsed})
            setattr(cfg, section, obj)
        else:
            setattr(obj, name, parsed)
    if seed is not None:
        cfg.train.seed = seed
    if out is not None:
        cfg.run.out_dir = out
    return validate(cfg, check_paths=check_paths)


def validate(cfg: ExperimentConfig, check_paths: bool = True) -> ExperimentConfig:
    try:
        cfg.train.validate()
    except ConfigError as exc:
        raise ConfigError(f"train.{exc.field}", str(exc).split(": ", 1)[1]) from None
    ds = cfg.dataset
    if not ds.kind:
        raise ConfigError("dataset.kind", f"missing dataset; set one of {DATASET_KINDS}")
    if ds.kind not in DATASET_KINDS:
        raise ConfigError("dataset.kind", f"unknown dataset kind {ds.kind!r}; "
                                          f"supported: {', '.join(DATASET_KINDS)}")
    required = {"idx": ("train_images", "train_labels", "test_images", "test_labels"),
                "cifar10": ("train_path", "test_path")}.get(ds.kind, ())
    for name in required:
        value = getattr(ds, name)
        if not value:
            raise ConfigError(f"dataset.{name}", f"required for dataset.kind = {ds.kind}")
        if check_paths and not Path(value).is_file():
            raise ConfigError(f"dataset.{name}", f"file not found: {value}")
    if ds.kind == "blobs" and (ds.classes < 2 or ds.dim < ds.classes):
        raise ConfigError("dataset.classes", "blobs need classes >= 2 and dim >= classes")
    for name in ("train_limit", "test_limit"):
        v = getattr(ds, name)
        if v is not None and v < 1:
            raise ConfigError(f"dataset.{name}", "must be >= 1")
    if cfg.model.arch not in ("mlp", "cnn"):
        raise ConfigError("model.arch", f"must be 'mlp' or 'cnn', got {cfg.model.arch!r}")
    from .attacks import PRESETS
    for a in cfg.eval.attacks:
        if a not in PRESETS:
            raise ConfigError("eval.attacks", f"unknown attack {a!r}; supported: {sorted(PRESETS)}")
    if cfg.eval.epsilon is not None and cfg.eval.epsilon < 0:
        raise ConfigError("eval.epsilon", "must be >= 0")
    if cfg.run.precision not in (32, 64):
        raise ConfigError("run.precision", "must be 32 or 64")
    if cfg.run.checkpoint_every < 0:
        raise ConfigError("run.checkpoint_every", "must be >= 0")
    return cfg
