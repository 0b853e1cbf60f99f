"""Seeded synthetic domain-shift benchmarks.

Two task families:

* rotated Gaussians: ``C`` class-conditional Gaussians with means on a ring
  in the first two coordinates; a shift rotates, scales and translates the
  ring and inflates the noise.
* grid segmentation: ``H x W`` fields of rectangular class blobs, each class
  with its own channel signature; a shift applies a channel-wise affine
  "style" change.

Every sample is drawn from its own generator seeded by
``(seed, domain tag, sample id)``, so datasets are pure functions of the
config and seed, independent of generation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

SOURCE, TARGET, GENERIC = 0, 1, 2


@dataclass(frozen=True)
class ShiftSpec:
    angle_deg: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    sigma_scale: float = 1.0
    # channel-affine style shift for fields
    gain: float = 1.0
    bias: float = 0.0
    jitter: float = 0.0


@dataclass(frozen=True)
class GenericRange:
    """Bounds that the reference-extractor training distribution samples from."""
    angle_deg: tuple[float, float] = (-15.0, 45.0)
    sigma_scale: tuple[float, float] = (1.0, 1.5)
    gain: tuple[float, float] = (0.8, 1.5)
    bias: tuple[float, float] = (-0.1, 0.3)


@dataclass(frozen=True)
class DomainConfig:
    task: str = "classification"  # or "dense"
    n_classes: int = 3
    dims: int = 2
    samples_per_class: int = 100
    radius: float = 4.0
    sigma: float = 1.0
    height: int = 16
    width: int = 16
    blobs_per_sample: int = 3
    source_shift: ShiftSpec = field(default_factory=ShiftSpec)
    target_shift: ShiftSpec = field(default_factory=lambda: ShiftSpec(angle_deg=30.0, sigma_scale=1.5))
    generic: GenericRange = field(default_factory=GenericRange)

    @property
    def n_samples(self) -> int:
        return self.n_classes * self.samples_per_class


@dataclass(frozen=True)
class UnlabeledSet:
    """What adaptation code is allowed to see: ids and inputs, nothing else."""
    ids: np.ndarray
    x: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "UnlabeledSet":
        return UnlabeledSet(ids=self.ids[idx], x=self.x[idx])


@dataclass(frozen=True)
class Dataset:
    ids: np.ndarray
    x: np.ndarray
    y: np.ndarray
    name: str = ""

    def __len__(self) -> int:
        return len(self.ids)

    def unlabeled(self) -> UnlabeledSet:
        return UnlabeledSet(ids=self.ids.copy(), x=self.x.copy())

    def subset(self, idx) -> "Dataset":
        return Dataset(ids=self.ids[idx], x=self.x[idx], y=self.y[idx], name=self.name)


def _sample_rng(seed: int, tag: int, sample_id: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), tag, int(sample_id)])


def class_means(cfg: DomainConfig) -> np.ndarray:
    angles = 2.0 * math.pi * np.arange(cfg.n_classes) / cfg.n_classes
    means = np.zeros((cfg.n_classes, cfg.dims))
    means[:, 0] = cfg.radius * np.cos(angles)
    means[:, 1] = cfg.radius * np.sin(angles)
    return means


def _apply_ring_shift(means: np.ndarray, shift: ShiftSpec) -> np.ndarray:
    t = math.radians(shift.angle_deg)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    out = means.copy()
    out[:, :2] = shift.scale * means[:, :2] @ rot.T + np.asarray(shift.translation)
    return out


def _gaussian_set(cfg: DomainConfig, seed: int, tag: int, shift_of) -> Dataset:
    base = class_means(cfg)
    n = cfg.n_samples
    ids = np.arange(n, dtype=np.int64)
    y = ids % cfg.n_classes
    x = np.empty((n, cfg.dims))
    for i in ids:
        rng = _sample_rng(seed, tag, i)
        shift = shift_of(rng)
        mean = _apply_ring_shift(base[y[i]][None, :], shift)[0]
        x[i] = mean + cfg.sigma * shift.sigma_scale * rng.standard_normal(cfg.dims)
    return Dataset(ids=ids, x=x, y=y)


def gen_gaussian_domains(cfg: DomainConfig, seed: int) -> tuple[Dataset, Dataset]:
    if cfg.n_classes < 2 or cfg.dims < 2:
        raise ValueError("need at least 2 classes and 2 dimensions")
    if cfg.sigma <= 0 or cfg.source_shift.sigma_scale <= 0 or cfg.target_shift.sigma_scale <= 0:
        raise ValueError("noise scale must be positive")
    src = _gaussian_set(cfg, seed, SOURCE, lambda rng: cfg.source_shift)
    tgt = _gaussian_set(cfg, seed, TARGET, lambda rng: cfg.target_shift)
    return replace(src, name="source"), replace(tgt, name="target")


def channel_signatures(cfg: DomainConfig) -> np.ndarray:
    """Fixed per-class channel means, spread on a sphere of radius ``radius``."""
    rng = np.random.default_rng([7919, cfg.n_classes, cfg.dims])
    sig = rng.standard_normal((cfg.n_classes, cfg.dims))
    sig /= np.linalg.norm(sig, axis=1, keepdims=True)
    return 0.5 * cfg.radius * sig


def _label_field(cfg: DomainConfig, rng: np.random.Generator) -> np.ndarray:
    H, W = cfg.height, cfg.width
    lab = np.zeros((H, W), dtype=np.int64)
    for _ in range(cfg.blobs_per_sample):
        c = int(rng.integers(1, cfg.n_classes))
        bh = int(rng.integers(H // 4, H // 2 + 1))
        bw = int(rng.integers(W // 4, W // 2 + 1))
        y0 = int(rng.integers(0, H - bh + 1))
        x0 = int(rng.integers(0, W - bw + 1))
        lab[y0:y0 + bh, x0:x0 + bw] = c
    return lab


def _style(shift: ShiftSpec, dims: int, seed: int, tag: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel gain and bias, with seeded jitter shared by the whole domain."""
    rng = np.random.default_rng([int(seed), tag, 104729])
    gain = shift.gain + shift.jitter * rng.uniform(-1.0, 1.0, dims)
    bias = shift.bias + shift.jitter * rng.uniform(-1.0, 1.0, dims)
    return gain, bias


def _field_set(cfg: DomainConfig, seed: int, tag: int, shift_of) -> Dataset:
    sig = channel_signatures(cfg)
    n = cfg.n_samples
    ids = np.arange(n, dtype=np.int64)
    x = np.empty((n, cfg.dims, cfg.height, cfg.width))
    y = np.empty((n, cfg.height, cfg.width), dtype=np.int64)
    for i in ids:
        rng = _sample_rng(seed, tag, i)
        gain, bias, sigma_scale = shift_of(rng)
        lab = _label_field(cfg, rng)
        clean = np.moveaxis(sig[lab], -1, 0)
        noise = cfg.sigma * sigma_scale * rng.standard_normal(clean.shape)
        x[i] = gain[:, None, None] * (clean + noise) + bias[:, None, None]
        y[i] = lab
    return Dataset(ids=ids, x=x, y=y)


def gen_grid_segmentation(cfg: DomainConfig, seed: int) -> tuple[Dataset, Dataset]:
    if cfg.height < 8 or cfg.width < 8:
        raise ValueError("grid must be at least 8x8")
    if cfg.n_classes < 3:
        raise ValueError("grid segmentation needs at least 3 classes")

    def fixed(shift, tag):
        gain, bias = _style(shift, cfg.dims, seed, tag)
        return lambda rng: (gain, bias, shift.sigma_scale)

    src = _field_set(cfg, seed, SOURCE, fixed(cfg.source_shift, SOURCE))
    tgt = _field_set(cfg, seed, TARGET, fixed(cfg.target_shift, TARGET))
    return replace(src, name="source"), replace(tgt, name="target")


def gen_generic_distribution(cfg: DomainConfig, seed: int) -> Dataset:
    """Labelled data with a style drawn per sample from ``cfg.generic``.

    Used only to train the frozen reference extractor.
    """
    g = cfg.generic
    if cfg.task == "classification":
        def shift_of(rng):
            return ShiftSpec(angle_deg=rng.uniform(*g.angle_deg),
                             sigma_scale=rng.uniform(*g.sigma_scale))
        ds = _gaussian_set(cfg, seed, GENERIC, shift_of)
    else:
        def shift_of(rng):
            gain = np.full(cfg.dims, rng.uniform(*g.gain))
            bias = np.full(cfg.dims, rng.uniform(*g.bias))
            return gain, bias, rng.uniform(*g.sigma_scale)
        ds = _field_set(cfg, seed, GENERIC, shift_of)
    return replace(ds, name="generic")


def gen_domains(cfg: DomainConfig, seed: int) -> tuple[Dataset, Dataset]:
    if cfg.task == "classification":
        return gen_gaussian_domains(cfg, seed)
    if cfg.task == "dense":
        return gen_grid_segmentation(cfg, seed)
    raise ValueError(f"unknown task {cfg.task!r}")
