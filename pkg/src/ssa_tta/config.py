"""Experiment configuration: one YAML document mapped onto frozen dataclasses.

Top-level sections::

    seed: 0
    data:       DomainConfig fields (task, n_classes, radius, shifts, ...)
    model:      width, feat_dim
    reference:  TrainConfig for the generic reference extractor
    source:     TrainConfig for the source fine-tune
    adapt:      AdaptConfig fields
    sweep:      axes {name: [values]}, seeds [..]
    verify:     sizes of the verification suite
    acceptance: benchmark floors and seeds

Unknown keys and type mismatches raise :class:`ConfigError` carrying the
dotted path of the offending field. Missing keys keep their defaults; a
document with ``data.task: dense`` starts from the dense-task defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Union, get_args, get_origin, get_type_hints

import yaml

from .engine import AdaptConfig, TrainConfig
from .synthdata import DomainConfig, ShiftSpec

SWEEP_AXES = ("tau_pos", "tau_neg", "tau_par", "window", "tau_lg")
DENSE_TARGET_SHIFT = ShiftSpec(gain=1.3, bias=0.2, jitter=0.1)
CLASSIFICATION_TARGET_SHIFT = ShiftSpec(angle_deg=30.0, sigma_scale=1.5)


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path or '<root>'}: {message}")


@dataclass(frozen=True)
class ModelConfig:
    width: int = 16
    feat_dim: int = 16

    def __post_init__(self):
        if self.width < 1 or self.feat_dim < 1:
            raise ValueError("width and feat_dim must be >= 1")


@dataclass(frozen=True)
class SweepConfig:
    axes: dict[str, tuple] = field(default_factory=lambda: {
        "tau_pos": (0.7, 0.8, 0.9, 0.95),
        "tau_neg": (0.3, 0.5, 0.7, 0.9),
        "tau_par": (0.3, 0.5, 0.7),
        "tau_lg": (0.25, 0.5, 0.75),
    })
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        for name, values in self.axes.items():
            if name not in SWEEP_AXES:
                raise ValueError(f"unknown sweep axis {name!r}; expected one of {SWEEP_AXES}")
            if len(values) < 2:
                raise ValueError(f"sweep axis {name!r} needs at least 2 points, got {len(values)}")
        if not self.seeds:
            raise ValueError("sweep needs at least one seed")


@dataclass(frozen=True)
class VerifyConfig:
    n_theorem: int = 10_000
    max_entropy: float = 0.5
    min_classes: int = 3
    max_classes: int = 20
    n_grad: int = 100
    grad_tol: float = 1e-4
    n_hfa: int = 200
    seed: int = 0


@dataclass(frozen=True)
class AcceptanceConfig:
    """Floors frozen from the build's own baseline runs."""
    seeds: tuple[int, ...] = tuple(range(10))
    min_improvement: float = 5.0  # points, full SSA over the unadapted source
    null_shift_max: float = 2.0  # points
    reference_gap_max: float = 5.0  # points, reference on source vs target
    source_accuracy_min: float = 0.95


def _desk_adapt() -> AdaptConfig:
    return AdaptConfig(lr_extractor=0.05, lr_classifier=0.25, lr_gate=0.05,
                       stage1_epochs=15, stage2_epochs=15)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    data: DomainConfig = field(default_factory=DomainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    reference: TrainConfig = field(default_factory=TrainConfig)
    source: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=_desk_adapt)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    acceptance: AcceptanceConfig = field(default_factory=AcceptanceConfig)

    @property
    def dense(self) -> bool:
        return self.data.task == "dense"

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, adapt=replace(self.adapt, seed=seed))


# -- dict <-> dataclass -----------------------------------------------------

def _tuplify(value):
    if isinstance(value, (list, tuple)):
        return tuple(_tuplify(v) for v in value)
    return value


def _convert(tp, value, path: str, base=None):
    origin, args = get_origin(tp), get_args(tp)
    if tp is Any:
        return value
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path, base=base)
    if origin in (Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _convert(arg, value, path)
            except ConfigError:
                continue
        raise ConfigError(path, f"expected {tp}, got {value!r}")
    if tp is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return _tuplify(value)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(path, f"expected {len(args)} items, got {len(value)}")
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected a mapping, got {value!r}")
        key_t, val_t = args
        return {_convert(key_t, k, path): _convert(val_t, v, f"{path}.{k}") for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported field type {tp}")


def from_dict(cls, data, path: str = "", base=None):
    """Build dataclass ``cls`` from a plain mapping, strictly.

    Keys missing from ``data`` keep their values from ``base`` (default:
    ``cls()``), so nested sections overlay their defaults.
    """
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a mapping, got {type(data).__name__}")
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(where, f"unknown key; expected one of {sorted(names)}")
    try:
        base = cls() if base is None else base
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from exc
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        kwargs[name] = _convert(hints[name], value, sub, base=getattr(base, name))
    try:
        return replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(path, str(exc)) from exc


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def to_dict(cfg) -> dict:
    """Plain nested dict (lists for tuples), suitable for YAML/JSON."""
    return _plain(cfg)


def _dense_base() -> ExperimentConfig:
    """Defaults for the field task: more channels, gentler adaptation steps."""
    return ExperimentConfig(
        data=DomainConfig(task="dense", dims=4, target_shift=DENSE_TARGET_SHIFT),
        adapt=replace(_desk_adapt(), lr_extractor=0.005, lr_classifier=0.025, lr_gate=0.005),
    )


def experiment_from_dict(data) -> ExperimentConfig:
    """Strict load; a ``data.task: dense`` document starts from the dense defaults."""
    data = data or {}
    section = data.get("data") if isinstance(data, dict) else None
    base = None
    if isinstance(section, dict) and section.get("task") == "dense":
        base = _dense_base()
    return from_dict(ExperimentConfig, data, base=base)


def default_config(task: str = "classification") -> ExperimentConfig:
    return experiment_from_dict({"data": {"task": task}})


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("", f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("", f"cannot parse {path}: {exc}") from exc
    return experiment_from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True)


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(dump_config(cfg))
    return path


def config_digest(cfg) -> str:
    """SHA-256 over the canonical JSON form; changes iff some field changes."""
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
