"""Probability primitives shared by the rest of the package.

Everything here works on float64 numpy arrays. A "distribution" is a
1-d array (or the last axis of a batch) of non-negative entries summing
to one. Natural logarithms throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PROB_ATOL = 1e-9
LOG_CLAMP = 1e-12


def check_prob_dist(p, atol: float = PROB_ATOL) -> np.ndarray:
    """Validate a single categorical distribution and return it as float64."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError(f"expected a 1-d distribution, got shape {p.shape}")
    if p.size < 2:
        raise ValueError("a distribution needs at least two classes")
    if not np.all(np.isfinite(p)):
        raise ValueError("distribution has non-finite entries")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("distribution entries must lie in [0, 1]")
    if abs(p.sum() - 1.0) > atol:
        raise ValueError(f"distribution sums to {p.sum()!r}, not 1")
    return p


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        bad = np.argwhere(~np.isfinite(z))[:3].tolist()
        raise ValueError(f"softmax received non-finite logits at {bad}")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray, axis: int = -1) -> np.ndarray:
    """Pull a gradient w.r.t. softmax outputs back to the logits."""
    inner = np.sum(grad_probs * probs, axis=axis, keepdims=True)
    return probs * (grad_probs - inner)


def entropy(p, axis: int = -1) -> np.ndarray | float:
    """Shannon entropy in nats, with 0 log 0 taken as 0."""
    p = np.asarray(p, dtype=np.float64)
    safe = np.where(p > 0.0, p, 1.0)
    h = -np.sum(np.where(p > 0.0, p * np.log(safe), 0.0), axis=axis)
    h = np.maximum(h, 0.0)
    return float(h) if np.ndim(h) == 0 else h


@dataclass(frozen=True)
class SortedDist:
    values: np.ndarray
    perm: np.ndarray  # perm[rank] -> original class index

    def unsort(self) -> np.ndarray:
        out = np.empty_like(self.values)
        out[self.perm] = self.values
        return out


def sort_desc(p) -> SortedDist:
    """Descending sort; equal probabilities keep ascending class order."""
    p = np.asarray(p, dtype=np.float64)
    perm = np.argsort(-p, kind="stable")
    return SortedDist(values=p[perm], perm=perm)


def tail_mass_bound(H0: float, tau_beta: float) -> float:
    """Upper bound on the mass of classes with p_c <= tau_beta given H(p) <= H0."""
    if not 0.0 < tau_beta < 1.0:
        raise ValueError(f"tau_beta must lie in (0, 1), got {tau_beta}")
    if H0 < 0.0:
        raise ValueError(f"H0 must be non-negative, got {H0}")
    return H0 / (-math.log(tau_beta))


def derive_tau_beta_upper(H0: float, eps: float) -> float:
    """Largest tau_beta for which the tail bound stays below ``eps``."""
    if eps <= 0.0:
        raise ValueError(f"eps must be positive, got {eps}")
    if H0 < 0.0:
        raise ValueError(f"H0 must be non-negative, got {H0}")
    return math.exp(-H0 / eps)


def derive_tau_neg_lower(tau_pos: float, eps: float, C: int, k: int) -> float:
    """Worst-case lower bound on tau_neg under an absolute-drop model of the tail.

    Assumes the tail after rank ``k`` holds ``C - k`` classes, each at most
    ``tau_pos - tau_neg``. The result is clamped to [0, 1].
    """
    if C <= k:
        raise ValueError(f"need C > k, got C={C}, k={k}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if eps <= 0.0:
        raise ValueError(f"eps must be positive, got {eps}")
    if not 0.0 < tau_pos < 1.0:
        raise ValueError(f"tau_pos must lie in (0, 1), got {tau_pos}")
    return min(1.0, max(0.0, tau_pos - eps / (C - k)))


@dataclass
class TheoremReport:
    H: float
    H0: float
    tau_alpha: float
    tau_beta: float
    tail_mass: float
    tail_bound: float
    pos_term: float
    neg_term: float
    kappa: float
    Y_plus: tuple[int, ...]
    Y_minus: tuple[int, ...]
    Y_zero: tuple[int, ...]
    precondition_ok: bool
    tail_ok: bool
    pos_ok: bool
    neg_ok: bool

    @property
    def ok(self) -> bool:
        """True when every asserted bound holds (or the precondition fails)."""
        if not self.precondition_ok:
            return True
        return self.tail_ok and self.pos_ok and self.neg_ok

    @property
    def combined(self) -> float:
        """pos_term - neg_term, NaN unless both sets are nonempty."""
        if not self.Y_plus or not self.Y_minus:
            return float("nan")
        return self.pos_term - self.neg_term

    @property
    def combined_holds(self) -> bool | None:
        c = self.combined
        if math.isnan(c):
            return None
        return c >= self.kappa


def _conditional_mean(values: np.ndarray, weights: np.ndarray) -> float:
    mass = weights.sum()
    if mass > 0.0:
        return float(np.dot(weights, values) / mass)
    return float(values.mean())


def verify_theorem1(p, tau_alpha: float, tau_beta: float, H0: float,
                    slack: float = 1e-12) -> TheoremReport:
    """Evaluate the tail bound and the two per-set log bounds for one ``p``.

    Conditional expectations weight classes by ``p`` renormalised inside
    each set (uniform weights if the set carries no mass). ``slack`` absorbs
    float rounding in the comparisons.
    """
    if not 0.0 < tau_beta < tau_alpha < 1.0:
        raise ValueError(f"need 0 < tau_beta < tau_alpha < 1, got {tau_beta}, {tau_alpha}")
    p = check_prob_dist(p)
    H = entropy(p)
    classes = np.arange(p.size)
    plus = classes[p >= tau_alpha]
    minus = classes[p <= tau_beta]
    zero = classes[(p < tau_alpha) & (p > tau_beta)]

    tail_mass = float(p[minus].sum())
    tail_bound = tail_mass_bound(H0, tau_beta)
    log_a = math.log(tau_alpha)
    log_b = math.log1p(-tau_beta)

    if plus.size:
        pos_term = _conditional_mean(np.log(p[plus]), p[plus])
    else:
        pos_term = float("nan")
    if minus.size:
        neg_term = _conditional_mean(np.log1p(-p[minus]), p[minus])
    else:
        neg_term = float("nan")

    precondition_ok = H <= H0 + slack
    return TheoremReport(
        H=H,
        H0=H0,
        tau_alpha=tau_alpha,
        tau_beta=tau_beta,
        tail_mass=tail_mass,
        tail_bound=tail_bound,
        pos_term=pos_term,
        neg_term=neg_term,
        kappa=log_a - log_b,
        Y_plus=tuple(int(c) for c in plus),
        Y_minus=tuple(int(c) for c in minus),
        Y_zero=tuple(int(c) for c in zero),
        precondition_ok=precondition_ok,
        tail_ok=tail_mass <= tail_bound + slack,
        pos_ok=(not plus.size) or pos_term >= log_a - slack,
        neg_ok=(not minus.size) or neg_term >= log_b - slack,
    )
