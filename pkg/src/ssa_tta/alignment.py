"""Stage-2 losses: pseudo-source correction and class-masked mixing.

Layouts follow the network: vectors are ``(N, K)``, fields ``(N, K, H, W)``
with the channel/class axis at position 1. Unit masks (``omega``, mixing
masks) drop that axis: ``(N,)`` or ``(N, H, W)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cacl import CaclConfig, build_masks
from .numerics import LOG_CLAMP, softmax_backward

NORM_CLAMP = 1e-12
MIX_BETA = 0.75


@dataclass(frozen=True)
class OmegaSet:
    mask: np.ndarray  # bool, one entry per prediction unit
    c_align: tuple[int, ...] | None
    tau_pos: float

    @property
    def size(self) -> int:
        return int(self.mask.sum())

    def indices(self) -> np.ndarray:
        return np.argwhere(self.mask)


def select_omega(pseudo_labels, confidences, c_align=None, tau_pos: float = 0.9) -> OmegaSet:
    """Units whose pseudo-label is in ``c_align`` (None = every class) with
    confidence at least ``tau_pos``."""
    labels = np.asarray(pseudo_labels)
    conf = np.asarray(confidences, dtype=np.float64)
    if labels.shape != conf.shape:
        raise ValueError(f"labels {labels.shape} and confidences {conf.shape} differ in shape")
    keep = conf >= tau_pos
    if c_align is not None:
        c_align = tuple(sorted(int(c) for c in c_align))
        keep &= np.isin(labels, c_align)
    return OmegaSet(mask=keep, c_align=c_align, tau_pos=tau_pos)


def _units_last(a: np.ndarray) -> np.ndarray:
    return np.moveaxis(a, 1, -1)


def dist_loss(f_live, f_ref, omega, lambda_align: float = 1.0):
    """``lambda * mean over omega of (1 - cos(f_live_i, f_ref_i))`` and its
    gradient w.r.t. ``f_live``. ``f_ref`` is treated as a constant."""
    f_live = np.asarray(f_live, dtype=np.float64)
    f_ref = np.asarray(f_ref, dtype=np.float64)
    if f_live.shape != f_ref.shape:
        raise ValueError(f"feature shapes differ: {f_live.shape} vs {f_ref.shape}")
    mask = omega.mask if isinstance(omega, OmegaSet) else np.asarray(omega, dtype=bool)
    n = int(mask.sum())
    grad = np.zeros_like(f_live)
    if n == 0:
        return 0.0, grad
    a = _units_last(f_live)[mask]
    b = _units_last(f_ref)[mask]
    na = np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), NORM_CLAMP)
    nb = np.maximum(np.linalg.norm(b, axis=-1, keepdims=True), NORM_CLAMP)
    cos = np.sum(a * b, axis=-1, keepdims=True) / (na * nb)
    loss = lambda_align * float(np.sum(1.0 - cos)) / n
    ga = -(lambda_align / n) * (b / (na * nb) - cos * a / (na * na))
    _units_last(grad)[mask] = ga
    return loss, grad


def make_class_mask(y_ps, rng: np.random.Generator, beta: float = MIX_BETA):
    """Mixing mask for one pseudo-source sample.

    Field labels ``(H, W)``: pick ceil(half) of the classes present, uniformly
    at random, and mark their sites. Scalar labels: a mixup weight
    ``max(lam, 1 - lam)`` with ``lam ~ Beta(beta, beta)``, so the mix leans
    towards the pseudo-source sample.
    """
    y_ps = np.asarray(y_ps)
    if y_ps.ndim == 0:
        lam = float(rng.beta(beta, beta))
        return max(lam, 1.0 - lam)
    classes = np.unique(y_ps)
    n_sel = math.ceil(classes.size / 2)
    chosen = rng.choice(classes, size=n_sel, replace=False)
    return np.isin(y_ps, chosen).astype(np.float64)


@dataclass(frozen=True)
class MixedSample:
    x_mix: np.ndarray
    y_mix: np.ndarray
    M: np.ndarray
    provenance: tuple


def _expand_mask(M, like: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim == 0:
        return M
    # (N,) -> (N, 1); (N, H, W) -> (N, 1, H, W); (H, W) -> (1, H, W)
    if M.ndim == like.ndim - 1:
        return np.expand_dims(M, axis=1 if like.ndim in (2, 4) else 0)
    return M


def class_mix(x_ps, y_ps, x_rt, y_rt, M, provenance=()) -> MixedSample:
    """Splice inputs and one-hot labels with mask ``M`` (1 -> pseudo-source)."""
    x_ps, x_rt = np.asarray(x_ps, dtype=np.float64), np.asarray(x_rt, dtype=np.float64)
    y_ps, y_rt = np.asarray(y_ps, dtype=np.float64), np.asarray(y_rt, dtype=np.float64)
    if x_ps.shape != x_rt.shape or y_ps.shape != y_rt.shape:
        raise ValueError("pseudo-source and remaining-target shapes differ")
    Mx = _expand_mask(M, x_ps)
    My = _expand_mask(M, y_ps)
    x_mix = Mx * x_ps + (1.0 - Mx) * x_rt
    y_mix = My * y_ps + (1.0 - My) * y_rt
    return MixedSample(x_mix=x_mix, y_mix=y_mix, M=np.asarray(M, dtype=np.float64),
                       provenance=tuple(provenance))


def one_hot(labels, n_classes: int) -> np.ndarray:
    """Integer labels ``(N,)`` / ``(N, H, W)`` to one-hot with classes on axis 1."""
    labels = np.asarray(labels)
    oh = np.eye(n_classes)[labels]
    return np.moveaxis(oh, -1, 1) if labels.ndim > 1 else oh


def mix_masks(probs, cacl_cfg: CaclConfig, tau_neg: float | None = None) -> np.ndarray:
    """Ternary masks (classes on axis 1) from a detached copy of ``probs``."""
    tau_neg = cacl_cfg.tau_neg if tau_neg is None else tau_neg
    return np.moveaxis(build_masks(_units_last(np.array(probs)), cacl_cfg.tau_pos, tau_neg), -1, 1)


def mix_loss_probs(probs, y_mix, cacl_cfg: CaclConfig, masks=None, tau_neg: float | None = None):
    """Cross-entropy against ``y_mix`` plus the complementary term.

    The complementary term covers classes the live mask rejects (-1) and
    the mixed label gives no weight. Averaged over units. Returns the loss
    and its gradient w.r.t. ``probs``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    y_mix = np.asarray(y_mix, dtype=np.float64)
    if probs.shape != y_mix.shape:
        raise ValueError(f"probs {probs.shape} and y_mix {y_mix.shape} differ in shape")
    if masks is None:
        masks = mix_masks(probs, cacl_cfg, tau_neg)
    elif masks.shape != probs.shape:
        raise ValueError(f"masks {masks.shape} and probs {probs.shape} differ in shape")
    n_units = probs.size // probs.shape[1]
    neg = (masks == -1) & (y_mix == 0.0)
    p = np.clip(probs, LOG_CLAMP, 1.0)
    q = np.clip(1.0 - probs, LOG_CLAMP, 1.0)
    loss = -(np.sum(y_mix * np.log(p)) + np.sum(np.log(q[neg]))) / n_units
    grad = -y_mix / (n_units * p)
    grad[neg] += 1.0 / (n_units * q[neg])
    return float(loss), grad


def mix_loss(probs, y_mix, cacl_cfg: CaclConfig, masks=None, tau_neg: float | None = None):
    """As :func:`mix_loss_probs`, with the gradient taken w.r.t. the logits."""
    loss, g = mix_loss_probs(probs, y_mix, cacl_cfg, masks=masks, tau_neg=tau_neg)
    return loss, softmax_backward(np.asarray(probs, dtype=np.float64), g, axis=1)
