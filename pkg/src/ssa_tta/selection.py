"""Entropy memory and the pseudo-source / remaining-target split."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .numerics import entropy

DEFAULT_TAU_PAR = 0.7
KNEE_CLAMP = (0.1, 0.95)


@dataclass
class EntropyBank:
    """Per-sample EMA of prediction entropy, keyed by sample id.

    Single writer: the engine updates it in id order between forward passes.
    """

    alpha: float = 0.9
    entries: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, sample_id) -> bool:
        return int(sample_id) in self.entries

    def __getitem__(self, sample_id) -> float:
        return self.entries[int(sample_id)]

    def update(self, sample_id, p) -> float:
        return self.update_value(sample_id, entropy(p))

    def update_value(self, sample_id, h: float) -> float:
        sample_id = int(sample_id)
        prev = self.entries.get(sample_id)
        new = h if prev is None else self.alpha * prev + (1.0 - self.alpha) * h
        self.entries[sample_id] = float(new)
        return self.entries[sample_id]

    def update_many(self, ids, hs) -> None:
        order = np.argsort(np.asarray(ids), kind="stable")
        for i in order:
            self.update_value(ids[i], float(hs[i]))

    def copy(self) -> "EntropyBank":
        return EntropyBank(alpha=self.alpha, entries=dict(self.entries))

    def snapshot(self) -> list[tuple[int, float]]:
        return sorted(self.entries.items())


def update_bank(bank: EntropyBank, sample_id, p) -> EntropyBank:
    bank.update(sample_id, p)
    return bank


@dataclass(frozen=True)
class DomainPartition:
    ps_ids: tuple[int, ...]
    rt_ids: tuple[int, ...]
    tau_par: float

    @property
    def n_ps(self) -> int:
        return len(self.ps_ids)

    @property
    def n_rt(self) -> int:
        return len(self.rt_ids)


def ps_count(tau_par: float, n: int) -> int:
    # The 1e-9 nudge keeps e.g. (3/5) * 5 from flooring to 2.
    return max(1, int(math.floor(tau_par * n + 1e-9)))


def rank_ids(bank: EntropyBank) -> list[int]:
    """Ids ordered by ascending entropy, ties by ascending id."""
    return [i for i, _ in sorted(bank.entries.items(), key=lambda kv: (kv[1], kv[0]))]


def partition(bank: EntropyBank, tau_par: float) -> DomainPartition:
    if not len(bank):
        raise ValueError("cannot partition an empty entropy bank")
    if not 0.0 < tau_par < 1.0:
        raise ValueError(f"tau_par must lie in (0, 1), got {tau_par}")
    ranked = rank_ids(bank)
    k = min(ps_count(tau_par, len(ranked)), len(ranked))
    return DomainPartition(
        ps_ids=tuple(sorted(ranked[:k])),
        rt_ids=tuple(sorted(ranked[k:])),
        tau_par=tau_par,
    )


def knee_tau_par(bank_or_values, default: float = DEFAULT_TAU_PAR,
                 clamp: tuple[float, float] = KNEE_CLAMP) -> float:
    """Split fraction at the sharpest bend of the sorted entropy curve.

    The bend is the first argmax of the discrete second difference; the
    fraction counts every sample up to and including the bend point.
    Fewer than four samples, or a curve with no positive bend, fall back
    to ``default`` with a warning.
    """
    if isinstance(bank_or_values, EntropyBank):
        values = np.array(list(bank_or_values.entries.values()), dtype=np.float64)
    else:
        values = np.asarray(bank_or_values, dtype=np.float64)
    n = values.size
    if n < 4:
        warnings.warn(f"knee selection needs >= 4 samples, got {n}; using tau_par={default}")
        return default
    e = np.sort(values)
    d2 = e[2:] - 2.0 * e[1:-1] + e[:-2]
    j = int(np.argmax(d2))
    if d2[j] <= 1e-12:
        warnings.warn(f"entropy curve has no knee; using tau_par={default}")
        return default
    frac = (j + 2) / n
    return float(min(clamp[1], max(clamp[0], frac)))
