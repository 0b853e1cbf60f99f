"""Hierarchical feature aggregation: local patch predictions fused with a
coarse global prediction.

Dense inputs are ``(N, D, H, W)`` fields. The local branch runs the network
on every grid window, pads each patch prediction back to full size with
zeros and divides by the per-site coverage count. The global branch runs
on an area-downsampled copy and is brought back with bilinear resizing.
A per-site gate ``A`` in [0, 1] mixes the two.

Vector inputs ``(N, D)`` use the same machinery with windows over the
coordinate axis: a local view keeps its window's coordinates and zeroes
the rest, and the gate is a fixed average weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import netcore
from .numerics import softmax_backward

GATE_MODES = ("learned", "average")


@dataclass(frozen=True)
class GridSpec:
    shape: tuple[int, int]
    window: tuple[int, int]
    stride: tuple[int, int]
    regions: tuple[tuple[int, int, int, int], ...]  # (y1, y2, x1, x2), half-open

    @property
    def k(self) -> int:
        return len(self.regions)

    def counts(self) -> np.ndarray:
        c = np.zeros(self.shape, dtype=np.int64)
        for y1, y2, x1, x2 in self.regions:
            c[y1:y2, x1:x2] += 1
        return c


def axis_offsets(length: int, window: int, stride: int) -> list[int]:
    """Window starts along one axis; the last window is pulled back to the edge."""
    if window > length:
        raise ValueError(f"window {window} larger than input extent {length}")
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    if stride > window:
        raise ValueError(f"stride {stride} exceeds window {window}; sites would go uncovered")
    offs = list(range(0, length - window + 1, stride))
    if offs[-1] + window < length:
        offs.append(length - window)
    return offs


def make_grid(input_shape, window, stride) -> GridSpec:
    H, W = (int(v) for v in input_shape)
    wh, ww = (int(v) for v in window)
    sh, sw = (int(v) for v in stride)
    ys = axis_offsets(H, wh, sh)
    xs = axis_offsets(W, ww, sw)
    regions = tuple((y, y + wh, x, x + ww) for y in ys for x in xs)
    return GridSpec(shape=(H, W), window=(wh, ww), stride=(sh, sw), regions=regions)


def aggregate_local(patch_preds, spec: GridSpec, full_shape=None) -> np.ndarray:
    """Zero-pad each patch to full size, sum in region order, divide by coverage."""
    if len(patch_preds) != spec.k:
        raise ValueError(f"got {len(patch_preds)} patches for {spec.k} regions")
    H, W = spec.shape if full_shape is None else tuple(full_shape)
    if (H, W) != spec.shape:
        raise ValueError(f"full_shape {(H, W)} does not match grid shape {spec.shape}")
    lead = patch_preds[0].shape[:-2]
    acc = np.zeros(lead + (H, W))
    for (y1, y2, x1, x2), p in zip(spec.regions, patch_preds):
        if p.shape != lead + (y2 - y1, x2 - x1):
            raise ValueError(f"patch shape {p.shape} does not match region {(y1, y2, x1, x2)}")
        acc[..., y1:y2, x1:x2] += p
    return acc / spec.counts()


def aggregate_local_backward(grad: np.ndarray, spec: GridSpec) -> list[np.ndarray]:
    g = grad / spec.counts()
    return [g[..., y1:y2, x1:x2] for y1, y2, x1, x2 in spec.regions]


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-centre linear interpolation weights, edges clamped."""
    M = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        w = src - i0
        M[i, i0] += 1.0 - w
        M[i, i1] += w
    return M


def area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Area-averaging weights from ``n_in`` cells down to ``n_out`` cells."""
    M = np.zeros((n_out, n_in))
    s = n_in / n_out
    for i in range(n_out):
        lo, hi = i * s, (i + 1) * s
        for j in range(int(np.floor(lo)), min(n_in, int(np.ceil(hi)))):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                M[i, j] = overlap / s
    return M


def resize(field_: np.ndarray, out_hw, kind: str = "bilinear") -> np.ndarray:
    H, W = field_.shape[-2:]
    oh, ow = out_hw
    make = bilinear_matrix if kind == "bilinear" else area_matrix
    return make(H, oh) @ field_ @ make(W, ow).T


def downsample(x: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return x
    H, W = x.shape[-2:]
    return resize(x, (max(1, H // factor), max(1, W // factor)), kind="area")


def align_global(P_global: np.ndarray, full_shape) -> np.ndarray:
    """Bilinear upsample to ``full_shape`` and renormalise each site."""
    full_shape = tuple(full_shape)
    if P_global.shape[-2:] == full_shape:
        return P_global.copy()
    up = resize(P_global, full_shape)
    return up / up.sum(axis=-3, keepdims=True)


def align_global_backward(grad: np.ndarray, small_hw) -> np.ndarray:
    # Renormalisation is the identity on sum-preserving perturbations, which
    # is all a softmax can produce, so only the linear resize is transposed.
    H, W = grad.shape[-2:]
    if (H, W) == tuple(small_hw):
        return grad
    h, w = small_hw
    return bilinear_matrix(h, H).T @ grad @ bilinear_matrix(w, W)


@dataclass(frozen=True)
class FusionGate:
    mode: str = "learned"
    local_weight: float = 0.5  # used by "average"

    def __post_init__(self):
        if self.mode not in GATE_MODES:
            raise ValueError(f"unknown gate mode {self.mode!r}")
        if not 0.0 <= self.local_weight <= 1.0:
            raise ValueError("local_weight must lie in [0, 1]")


def fuse(P_local: np.ndarray, P_global_aligned: np.ndarray, A) -> np.ndarray:
    if P_local.shape != P_global_aligned.shape:
        raise ValueError(f"shape mismatch: {P_local.shape} vs {P_global_aligned.shape}")
    # Written as a correction of the global branch so that identical branches
    # give back that branch bit for bit.
    return P_global_aligned + A * (P_local - P_global_aligned)


def learned_gate(params: netcore.ModelParams, P_local: np.ndarray, P_global: np.ndarray) -> np.ndarray:
    """Per-site logistic gate over the stacked class channels, shape ``(N, 1, H, W)``."""
    gw, gb = params.arrays["gw"], params.arrays["gb"]
    C = P_local.shape[1]
    z = (np.tensordot(gw[:C], P_local, axes=([0], [1]))
         + np.tensordot(gw[C:], P_global, axes=([0], [1])) + gb[0])
    return (1.0 / (1.0 + np.exp(-z)))[:, None]


@dataclass(frozen=True)
class HfaConfig:
    enabled: bool = True
    window: tuple[int, int] | None = None  # None: half the input per axis (dense), full (vector)
    stride: tuple[int, int] | None = None  # None: half the window
    global_scale: int = 2
    gate: FusionGate = field(default_factory=FusionGate)

    def grid_for(self, spatial_shape) -> GridSpec:
        H, W = spatial_shape
        if self.window is None:
            window = (max(1, H // 2), max(1, W // 2)) if H > 1 else (1, W)
        else:
            window = tuple(self.window)
        stride = tuple(self.stride) if self.stride is not None else (
            max(1, window[0] // 2), max(1, window[1] // 2))
        return make_grid((H, W), window, stride)


def vector_grid(cfg: HfaConfig, dims: int) -> GridSpec:
    window = (1, dims) if cfg.window is None else (1, int(cfg.window[-1]))
    stride = (1, max(1, window[1] // 2)) if cfg.stride is None else (1, int(cfg.stride[-1]))
    return make_grid((1, dims), window, stride)


@dataclass
class HfaOutput:
    probs: np.ndarray
    features: np.ndarray
    cache: dict


def plain_forward(params, x) -> HfaOutput:
    f, _, p, c = netcore.forward_any(params, x)
    return HfaOutput(probs=p, features=f, cache={"kind": "plain", "fwd": c, "probs": p})


def hfa_forward(params: netcore.ModelParams, x: np.ndarray, cfg: HfaConfig) -> HfaOutput:
    x = np.asarray(x, dtype=np.float64)
    if not cfg.enabled:
        return plain_forward(params, x)
    if x.ndim == 2:
        return _vector_forward(params, x, cfg)
    return _dense_forward(params, x, cfg)


def _dense_forward(params, x, cfg: HfaConfig) -> HfaOutput:
    N, _, H, W = x.shape
    spec = cfg.grid_for((H, W))
    patch_caches, patch_probs, patch_feats = [], [], []
    for y1, y2, x1, x2 in spec.regions:
        f, _, p, c = netcore.forward_any(params, x[:, :, y1:y2, x1:x2])
        patch_caches.append(c)
        patch_probs.append(p)
        patch_feats.append(f)
    P_local = aggregate_local(patch_probs, spec)
    F_local = aggregate_local(patch_feats, spec)

    xs = downsample(x, cfg.global_scale)
    _, _, Pg_small, gcache = netcore.forward_any(params, xs)
    P_global = align_global(Pg_small, (H, W))

    if cfg.gate.mode == "learned":
        A = learned_gate(params, P_local, P_global)
    else:
        A = cfg.gate.local_weight
    fused = fuse(P_local, P_global, A)
    cache = {
        "kind": "dense", "spec": spec, "patch_caches": patch_caches, "patch_probs": patch_probs,
        "P_local": P_local, "P_global": P_global, "Pg_small": Pg_small, "gcache": gcache,
        "A": A, "mode": cfg.gate.mode,
    }
    return HfaOutput(probs=fused, features=F_local, cache=cache)


def _vector_forward(params, x, cfg: HfaConfig) -> HfaOutput:
    spec = vector_grid(cfg, x.shape[1])
    patch_caches, patch_probs, patch_feats = [], [], []
    for _, _, x1, x2 in spec.regions:
        keep = np.zeros(x.shape[1])
        keep[x1:x2] = 1.0
        f, _, p, c = netcore.forward(params, x * keep)
        patch_caches.append(c)
        patch_probs.append(p)
        patch_feats.append(f)
    k = spec.k
    P_local = sum(patch_probs[1:], patch_probs[0]) / k
    F_local = sum(patch_feats[1:], patch_feats[0]) / k
    f_g, _, P_global, gcache = netcore.forward(params, x)
    w = cfg.gate.local_weight
    fused = fuse(P_local, P_global, w)
    feats = f_g + w * (F_local - f_g)
    cache = {
        "kind": "vector", "spec": spec, "patch_caches": patch_caches, "patch_probs": patch_probs,
        "P_global": P_global, "gcache": gcache, "A": w,
    }
    return HfaOutput(probs=fused, features=feats, cache=cache)


def hfa_backward(params: netcore.ModelParams, out: HfaOutput, grad_probs: np.ndarray | None,
                 grad_features: np.ndarray | None = None,
                 into: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Accumulate parameter gradients for losses on ``out.probs`` / ``out.features``."""
    grads = params.zeros_like() if into is None else into
    cache = out.cache
    kind = cache["kind"]
    if kind == "plain":
        gl = None if grad_probs is None else softmax_backward(cache["probs"], grad_probs,
                                                              axis=1)
        return netcore.backward_any(params, cache["fwd"], gl, grad_features, into=grads)

    if grad_probs is None:
        grad_probs = np.zeros_like(out.probs)
    A = cache["A"]
    spec: GridSpec = cache["spec"]

    if kind == "vector":
        k = spec.k
        g_local = A * grad_probs / k
        g_feat_local = None if grad_features is None else A * grad_features / k
        for c, p in zip(cache["patch_caches"], cache["patch_probs"]):
            netcore.backward(params, c, softmax_backward(p, g_local), g_feat_local, into=grads)
        g_global = (1.0 - A) * grad_probs
        g_feat_global = None if grad_features is None else (1.0 - A) * grad_features
        netcore.backward(params, cache["gcache"], softmax_backward(cache["P_global"], g_global),
                         g_feat_global, into=grads)
        return grads

    P_local, P_global = cache["P_local"], cache["P_global"]
    g_local = A * grad_probs
    g_global = (1.0 - A) * grad_probs
    if cache["mode"] == "learned":
        C = P_local.shape[1]
        gA = np.sum(grad_probs * (P_local - P_global), axis=1)  # (N, H, W)
        gz = gA * A[:, 0] * (1.0 - A[:, 0])
        gw = params.arrays["gw"]
        if not params.frozen["gate"]:
            grads["gw"][:C] += np.tensordot(P_local, gz, axes=([0, 2, 3], [0, 1, 2]))
            grads["gw"][C:] += np.tensordot(P_global, gz, axes=([0, 2, 3], [0, 1, 2]))
            grads["gb"][0] += gz.sum()
        g_local = g_local + gw[:C][None, :, None, None] * gz[:, None]
        g_global = g_global + gw[C:][None, :, None, None] * gz[:, None]

    patch_g = aggregate_local_backward(g_local, spec)
    patch_gf = (aggregate_local_backward(grad_features, spec) if grad_features is not None
                else [None] * spec.k)
    for c, p, gp, gf in zip(cache["patch_caches"], cache["patch_probs"], patch_g, patch_gf):
        netcore.backward_any(params, c, softmax_backward(p, gp, axis=1), gf, into=grads)

    g_small = align_global_backward(g_global, cache["Pg_small"].shape[-2:])
    netcore.backward_any(params, cache["gcache"],
                         softmax_backward(cache["Pg_small"], g_small, axis=1), None, into=grads)
    return grads
