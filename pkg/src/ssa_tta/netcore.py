"""A tiny extractor/classifier network with hand-written reverse mode.

Architecture, applied to rows of a ``(M, in_dim)`` unit matrix::

    h = tanh(x W1^T + b1)          extractor, layer 1
    f = tanh(h W2^T + b2)          extractor, layer 2 -> features
    z = f Wc^T + bc                classifier -> logits

Dense inputs ``(N, D, H, W)`` are run site-wise through the same rows.
A third parameter group ``gate`` holds the per-site fusion gate used by the
aggregation module; it is stored here so that one optimizer and one
serializer cover every trainable array.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .numerics import softmax

GROUPS: dict[str, tuple[str, ...]] = {
    "extractor": ("W1", "b1", "W2", "b2"),
    "classifier": ("Wc", "bc"),
    "gate": ("gw", "gb"),
}
PARAM_ORDER = tuple(name for names in GROUPS.values() for name in names)
GROUP_OF = {name: g for g, names in GROUPS.items() for name in names}


@dataclass
class ModelParams:
    arrays: dict[str, np.ndarray]
    frozen: dict[str, bool] = field(default_factory=lambda: {g: False for g in GROUPS})
    seed: int = 0
    iter: int = 0
    version: int = 0  # bumped on every in-place update; guards stale caches

    @property
    def in_dim(self) -> int:
        return self.arrays["W1"].shape[1]

    @property
    def width(self) -> int:
        return self.arrays["W1"].shape[0]

    @property
    def feat_dim(self) -> int:
        return self.arrays["W2"].shape[0]

    @property
    def n_classes(self) -> int:
        return self.arrays["Wc"].shape[0]

    def clone(self) -> "ModelParams":
        return ModelParams(
            arrays={k: v.copy() for k, v in self.arrays.items()},
            frozen=dict(self.frozen),
            seed=self.seed,
            iter=self.iter,
            version=self.version,
        )

    def freeze(self, *groups: str) -> None:
        for g in groups:
            self.frozen[g] = True

    def unfreeze(self, *groups: str) -> None:
        for g in groups:
            self.frozen[g] = False

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def equal(self, other: "ModelParams") -> bool:
        return all(np.array_equal(self.arrays[k], other.arrays[k]) for k in PARAM_ORDER)


def init_params(in_dim: int, n_classes: int, width: int = 16, feat_dim: int = 16,
                seed: int = 0) -> ModelParams:
    """Symmetric uniform fan-in initialisation; the gate starts at A = 0.5."""
    rng = np.random.default_rng(seed)

    def uniform(out_dim, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(out_dim, fan_in))

    arrays = {
        "W1": uniform(width, in_dim),
        "b1": np.zeros(width),
        "W2": uniform(feat_dim, width),
        "b2": np.zeros(feat_dim),
        "Wc": uniform(n_classes, feat_dim),
        "bc": np.zeros(n_classes),
        "gw": np.zeros(2 * n_classes),
        "gb": np.zeros(1),
    }
    return ModelParams(arrays=arrays, seed=seed)


@dataclass
class ForwardCache:
    x: np.ndarray
    h: np.ndarray
    f: np.ndarray
    version: int


def forward(params: ModelParams, x: np.ndarray):
    """Run rows of ``x`` through the network.

    Returns ``(features, logits, probs, cache)``.
    """
    a = params.arrays
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ValueError(f"expected input rows of width {params.in_dim}, got shape {x.shape}")
    h = np.tanh(x @ a["W1"].T + a["b1"])
    f = np.tanh(h @ a["W2"].T + a["b2"])
    logits = f @ a["Wc"].T + a["bc"]
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits in forward pass; aborting run")
    return f, logits, softmax(logits), ForwardCache(x=x, h=h, f=f, version=params.version)


def backward(params: ModelParams, cache: ForwardCache, grad_logits: np.ndarray | None,
             grad_features: np.ndarray | None = None,
             into: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Reverse pass for one cached forward call.

    Gradients are accumulated into ``into`` when given. Frozen groups get
    zero entries. ``grad_features`` adds an upstream gradient directly at
    the extractor output.
    """
    if cache.version != params.version:
        raise RuntimeError("stale forward cache: parameters changed since the forward pass")
    a = params.arrays
    grads = params.zeros_like() if into is None else into
    f, h, x = cache.f, cache.h, cache.x
    gf = np.zeros_like(f)
    if grad_logits is not None:
        if not params.frozen["classifier"]:
            grads["Wc"] += grad_logits.T @ f
            grads["bc"] += grad_logits.sum(axis=0)
        gf += grad_logits @ a["Wc"]
    if grad_features is not None:
        gf += grad_features
    if params.frozen["extractor"]:
        return grads
    gpre2 = gf * (1.0 - f * f)
    grads["W2"] += gpre2.T @ h
    grads["b2"] += gpre2.sum(axis=0)
    gpre1 = (gpre2 @ a["W2"]) * (1.0 - h * h)
    grads["W1"] += gpre1.T @ x
    grads["b1"] += gpre1.sum(axis=0)
    return grads


def field_to_units(x: np.ndarray) -> np.ndarray:
    """``(N, D, H, W)`` -> ``(N*H*W, D)``."""
    n, d, hh, ww = x.shape
    return x.transpose(0, 2, 3, 1).reshape(n * hh * ww, d)


def units_to_field(u: np.ndarray, n: int, hh: int, ww: int) -> np.ndarray:
    """``(N*H*W, K)`` -> ``(N, K, H, W)``."""
    return u.reshape(n, hh, ww, -1).transpose(0, 3, 1, 2)


def forward_any(params: ModelParams, x: np.ndarray):
    """Forward for either vectors ``(N, D)`` or fields ``(N, D, H, W)``.

    Outputs keep the input layout: ``(N, K)`` or ``(N, K, H, W)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return forward(params, x)
    n, _, hh, ww = x.shape
    f, logits, probs, cache = forward(params, field_to_units(x))
    return (units_to_field(f, n, hh, ww), units_to_field(logits, n, hh, ww),
            units_to_field(probs, n, hh, ww), cache)


def backward_any(params, cache, grad_logits, grad_features=None, into=None):
    """Counterpart of :func:`forward_any`; field gradients are flattened to rows."""
    if grad_logits is not None and grad_logits.ndim == 4:
        grad_logits = field_to_units(grad_logits)
    if grad_features is not None and grad_features.ndim == 4:
        grad_features = field_to_units(grad_features)
    return backward(params, cache, grad_logits, grad_features, into=into)


@dataclass
class OptimState:
    lr: dict[str, float] = field(default_factory=lambda: {
        "extractor": 2.5e-4, "classifier": 2.5e-3, "gate": 2.5e-3})
    momentum: float = 0.9
    weight_decay: float = 5e-4
    power: float = 0.9
    max_iter: int = 1000
    iter: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def lr_factor(self, it: int | None = None) -> float:
        it = self.iter if it is None else it
        if self.max_iter <= 0 or it >= self.max_iter:
            return 0.0
        return (1.0 - it / self.max_iter) ** self.power

    def effective_lr(self, group: str, it: int | None = None) -> float:
        return self.lr[group] * self.lr_factor(it)


def sgd_step(params: ModelParams, grads: dict[str, np.ndarray], opt: OptimState) -> ModelParams:
    """Momentum SGD with L2 weight decay and the poly learning-rate schedule.

    Frozen groups are skipped entirely, momentum buffers included.
    """
    factor = opt.lr_factor()
    for name in PARAM_ORDER:
        group = GROUP_OF[name]
        if params.frozen[group]:
            continue
        w = params.arrays[name]
        g = grads[name] + opt.weight_decay * w
        v = opt.velocity.get(name)
        v = g.copy() if v is None else opt.momentum * v + g
        opt.velocity[name] = v
        lr = opt.lr[group] * factor
        if lr != 0.0:
            w -= lr * v
    opt.iter += 1
    params.iter = opt.iter
    params.version += 1
    return params


def grad_check(loss_fn: Callable[[ModelParams], tuple[float, dict[str, np.ndarray]]],
               params: ModelParams, eps: float = 1e-5, max_entries: int | None = 64,
               rng: np.random.Generator | None = None, floor: float = 1e-6,
               groups: tuple[str, ...] | None = None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` returns ``(loss, grads)``. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps entries whose true
    gradient is ~0 from dividing rounding noise by nothing. At most
    ``max_entries`` coordinates per array are probed.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    if groups is None:
        groups = tuple(g for g in GROUPS if not params.frozen[g])
    _, analytic = loss_fn(params)
    worst = 0.0
    probe = params.clone()
    for name in PARAM_ORDER:
        if GROUP_OF[name] not in groups:
            continue
        w = probe.arrays[name]
        flat = w.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            probe.version += 1
            lp, _ = loss_fn(probe)
            flat[i] = orig - eps
            probe.version += 1
            lm, _ = loss_fn(probe)
            flat[i] = orig
            probe.version += 1
            num = (lp - lm) / (2.0 * eps)
            a = a_flat[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst


def save_params(params: ModelParams, path, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``<path>.bin`` (little-endian float64, PARAM_ORDER) and ``<path>.json``."""
    path = Path(path)
    bin_path = path.with_suffix(".bin")
    hdr_path = path.with_suffix(".json")
    layers = []
    chunks = []
    for name in PARAM_ORDER:
        arr = np.ascontiguousarray(params.arrays[name], dtype="<f8")
        layers.append({"name": name, "group": GROUP_OF[name], "shape": list(arr.shape)})
        chunks.append(arr.tobytes(order="C"))
    bin_path.write_bytes(b"".join(chunks))
    header = {
        "format": "ssa-params/1",
        "dtype": "float64-le",
        "layers": layers,
        "frozen": params.frozen,
        "seed": params.seed,
        "iter": params.iter,
    }
    if extra:
        header.update(extra)
    hdr_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return bin_path, hdr_path


def load_params(path) -> ModelParams:
    path = Path(path)
    bin_path = path.with_suffix(".bin")
    hdr_path = path.with_suffix(".json")
    header = json.loads(hdr_path.read_text())
    raw = np.frombuffer(bin_path.read_bytes(), dtype="<f8")
    arrays = {}
    offset = 0
    for layer in header["layers"]:
        size = int(np.prod(layer["shape"], dtype=np.int64))
        arrays[layer["name"]] = raw[offset:offset + size].reshape(layer["shape"]).astype(np.float64)
        offset += size
    if offset != raw.size:
        raise ValueError(f"{bin_path}: {raw.size - offset} trailing values after declared layers")
    return ModelParams(arrays=arrays, frozen=dict(header["frozen"]),
                       seed=int(header["seed"]), iter=int(header["iter"]))
