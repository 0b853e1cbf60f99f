"""Confidence-aware complementary learning (CACL).

A prediction is split into confident positives (absolute threshold
``tau_pos``), confident negatives (every class ranked after the first
large *relative* drop in the sorted probabilities, threshold ``tau_neg``)
and abstentions. The loss pulls positives up with ``log p`` and pushes
negatives down with ``log(1 - p)``.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field

import numpy as np

from .numerics import LOG_CLAMP, SortedDist, softmax_backward, sort_desc

SCHEDULES = ("fixed", "conservative-init", "early-restrict", "dynamic")
DROP_CLAMP = 1e-12
# Relative drops are ratios of nearby floats; allow a rounding-sized miss.
DROP_TOL = 1e-12


@dataclass(frozen=True)
class CaclConfig:
    tau_pos: float = 0.9
    tau_neg: float = 0.9
    schedule: str = "fixed"
    warmup_epochs: int = 5
    period: int = 2
    step: float = 0.05
    init_value: float = 0.9
    warmup_bounds: tuple[float, float] = (0.6, 0.9)
    late_bounds: tuple[float, float] = (0.4, 0.9)
    dynamic_bounds: tuple[float, float] = (0.4, 0.95)

    def __post_init__(self):
        if not 0.0 < self.tau_pos < 1.0:
            raise ValueError(f"tau_pos must lie in (0, 1), got {self.tau_pos}")
        if not 0.0 < self.tau_neg < 1.0:
            raise ValueError(f"tau_neg must lie in (0, 1), got {self.tau_neg}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown tau_neg schedule {self.schedule!r}; expected one of {SCHEDULES}")
        if self.warmup_epochs < 0 or self.period < 1 or self.step < 0:
            raise ValueError("schedule parameters must be non-negative (period >= 1)")
        for lo, hi in (self.warmup_bounds, self.late_bounds, self.dynamic_bounds):
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError(f"bad schedule bracket ({lo}, {hi})")


@dataclass(frozen=True)
class TernaryMask:
    marks: np.ndarray  # int8, indexed by original class
    i_star: int | None  # 1-based rank of the first qualifying drop

    @property
    def positives(self) -> frozenset[int]:
        return frozenset(np.flatnonzero(self.marks == 1).tolist())

    @property
    def negatives(self) -> frozenset[int]:
        return frozenset(np.flatnonzero(self.marks == -1).tolist())


def relative_drops(s: SortedDist) -> np.ndarray:
    v = s.values
    return (v[:-1] - v[1:]) / np.maximum(v[:-1], DROP_CLAMP)


def build_mask(p, cfg: CaclConfig, tau_neg: float | None = None) -> TernaryMask:
    """Ternary mask for one distribution.

    Positive marks take precedence over negative ones. For ``tau_pos >= 0.5``
    the two can never collide, because a class ranked after a strict drop
    cannot hold half of the mass.
    """
    tau_neg = cfg.tau_neg if tau_neg is None else tau_neg
    p = np.asarray(p, dtype=np.float64)
    s = sort_desc(p)
    r = relative_drops(s)
    hits = np.flatnonzero(r >= tau_neg - DROP_TOL)
    ranked = np.zeros(p.size, dtype=np.int8)
    i_star = None
    if hits.size:
        i_star = int(hits[0]) + 1
        ranked[i_star:] = -1
    marks = np.empty_like(ranked)
    marks[s.perm] = ranked
    marks[p >= cfg.tau_pos] = 1
    return TernaryMask(marks=marks, i_star=i_star)


def build_masks(probs: np.ndarray, tau_pos: float, tau_neg: float) -> np.ndarray:
    """Vectorised :func:`build_mask` over the leading axes; classes on the last axis."""
    probs = np.asarray(probs, dtype=np.float64)
    shape = probs.shape
    P = probs.reshape(-1, shape[-1])
    perm = np.argsort(-P, axis=1, kind="stable")
    V = np.take_along_axis(P, perm, axis=1)
    R = (V[:, :-1] - V[:, 1:]) / np.maximum(V[:, :-1], DROP_CLAMP)
    hit = R >= tau_neg - DROP_TOL
    has = hit.any(axis=1)
    first = np.argmax(hit, axis=1)
    rank_pos = np.arange(shape[-1])[None, :]
    ranked = np.where(has[:, None] & (rank_pos > first[:, None]), -1, 0).astype(np.int8)
    marks = np.empty_like(ranked)
    np.put_along_axis(marks, perm, ranked, axis=1)
    marks[P >= tau_pos] = 1
    return marks.reshape(shape)


def _check_pair(probs, masks):
    probs = np.asarray(probs, dtype=np.float64)
    masks = np.asarray(masks)
    if probs.shape != masks.shape:
        raise ValueError(f"probs shape {probs.shape} does not match masks shape {masks.shape}")
    return probs, masks


def cacl_loss_probs(probs, masks, axis: int = -1, n_units: int | None = None):
    """Loss and its gradient w.r.t. the probabilities themselves.

    ``n_units`` defaults to the number of prediction units (all axes but
    the class axis). Units without any mark still count towards it.
    """
    probs, masks = _check_pair(probs, masks)
    if n_units is None:
        n_units = probs.size // probs.shape[axis]
    pos = masks == 1
    neg = masks == -1
    p = np.clip(probs, LOG_CLAMP, 1.0)
    q = np.clip(1.0 - probs, LOG_CLAMP, 1.0)
    loss = -(np.sum(np.log(p[pos])) + np.sum(np.log(q[neg]))) / n_units
    grad = np.zeros_like(probs)
    grad[pos] = -1.0 / (n_units * p[pos])
    grad[neg] = 1.0 / (n_units * q[neg])
    return float(loss), grad


def cacl_loss(probs, masks, axis: int = -1):
    """Complementary loss and its gradient w.r.t. the logits behind ``probs``.

    ``probs`` must be the softmax of some logits along ``axis``; ``masks``
    should come from a detached snapshot and are treated as constants.
    """
    loss, g = cacl_loss_probs(probs, masks, axis=axis)
    return loss, softmax_backward(np.asarray(probs, dtype=np.float64), g, axis=axis)


@dataclass
class TauNegScheduler:
    """Effective ``tau_neg`` per epoch under one of the mitigation schedules.

    Only ``dynamic`` keeps state: the current value and the history of
    gradient variances it has been shown.
    """

    cfg: CaclConfig
    current: float = field(init=False)
    variances: list[float] = field(init=False, default_factory=list)

    def __post_init__(self):
        self.current = self.cfg.tau_neg

    def __call__(self, epoch: int, grad_variance: float = 0.0) -> float:
        if epoch < 0:
            raise ValueError("epoch must be >= 0")
        if grad_variance < 0:
            raise ValueError("grad_variance must be >= 0")
        cfg = self.cfg
        if cfg.schedule == "fixed":
            return cfg.tau_neg
        if cfg.schedule == "conservative-init":
            return cfg.init_value if epoch < cfg.warmup_epochs else cfg.tau_neg
        if cfg.schedule == "early-restrict":
            lo, hi = cfg.warmup_bounds if epoch < cfg.warmup_epochs else cfg.late_bounds
            return min(hi, max(lo, cfg.tau_neg))
        # dynamic
        lo, hi = cfg.dynamic_bounds
        if epoch > 0 and epoch % cfg.period == 0 and self.variances:
            median = statistics.median(self.variances)
            delta = cfg.step if grad_variance > median else -cfg.step
            self.current = min(hi, max(lo, self.current + delta))
        self.variances.append(float(grad_variance))
        return min(hi, max(lo, self.current))


def schedule_tau_neg(cfg: CaclConfig, epoch: int, grad_variance: float = 0.0,
                     state: TauNegScheduler | None = None) -> float:
    """Functional entry point; ``dynamic`` needs a persistent ``state``."""
    if state is None:
        state = TauNegScheduler(cfg)
    return state(epoch, grad_variance)
