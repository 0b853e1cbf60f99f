"""Self-checking suite behind ``ssa-tta verify``.

Every check returns a :class:`CheckResult`; a failing check carries the
first offending case in a JSON-serialisable form. ``fault`` names one check
whose computation is deliberately corrupted, to prove the suite can fail.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import alignment, hfa, netcore
from .cacl import CaclConfig, build_masks, cacl_loss_probs
from .numerics import (derive_tau_beta_upper, derive_tau_neg_lower, entropy, softmax,
                       verify_theorem1)

FAULTS = ("theorem", "derive-tau-beta", "derive-tau-neg", "grad-cacl", "grad-dis", "grad-mix",
          "hfa-oracle", "hfa-degenerate")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0
    failing_case: dict | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.passed = bool(self.passed)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# -- theorem sweep ----------------------------------------------------------

def sample_low_entropy(rng: np.random.Generator, n: int, max_entropy: float = 0.5,
                       classes=(3, 20)) -> list[np.ndarray]:
    """Rejection-sample ``n`` distributions with entropy at most ``max_entropy``."""
    out: list[np.ndarray] = []
    lo, hi = classes
    while len(out) < n:
        C = int(rng.integers(lo, hi + 1))
        z = rng.standard_normal(C) * rng.uniform(0.5, 3.0)
        z[int(rng.integers(C))] += rng.uniform(2.0, 16.0)
        p = softmax(z)
        if entropy(p) <= max_entropy:
            out.append(p)
    return out


@_timed
def check_theorem(n: int = 10_000, max_entropy: float = 0.5, classes=(3, 20), seed: int = 0,
                  fault: bool = False) -> CheckResult:
    """Tail mass and per-set log bounds over random low-entropy distributions.

    Thresholds are drawn per case: tau_alpha in [0.5, 0.99), tau_beta
    log-uniform below min(tau_alpha, 0.5). The combined kappa inequality is
    reported, not asserted.
    """
    rng = np.random.default_rng([seed, 11])
    dists = sample_low_entropy(rng, n, max_entropy, classes)
    counts = {"tail": 0, "pos": 0, "neg": 0}
    kappa_defined = kappa_violations = 0
    first = None
    for p in dists:
        ta = float(rng.uniform(0.5, 0.99))
        tb = float(math.exp(rng.uniform(math.log(1e-6), math.log(min(ta, 0.5)))))
        rep = verify_theorem1(p, ta, tb, max_entropy)
        tail_ok = rep.tail_ok
        if fault:
            tail_ok = rep.tail_mass <= 1e-3 * rep.tail_bound
        bad = [k for k, ok in (("tail", tail_ok), ("pos", rep.pos_ok), ("neg", rep.neg_ok))
               if not ok]
        for k in bad:
            counts[k] += 1
        if bad and first is None:
            first = {"p": p.tolist(), "tau_alpha": ta, "tau_beta": tb, "H0": max_entropy,
                     "violated": bad}
        if rep.combined_holds is not None:
            kappa_defined += 1
            kappa_violations += not rep.combined_holds
    total = sum(counts.values())
    rate = kappa_violations / kappa_defined if kappa_defined else float("nan")
    return CheckResult(
        name="theorem",
        passed=total == 0,
        detail=(f"{n} distributions, violations tail={counts['tail']} pos={counts['pos']} "
                f"neg={counts['neg']}; kappa violation rate {rate:.4f} "
                f"({kappa_violations}/{kappa_defined}, informational)"),
        failing_case=first,
        info={"violations": counts, "kappa_violation_rate": rate, "kappa_cases": kappa_defined},
    )


# -- derivation spot checks -------------------------------------------------

@_timed
def check_derive_tau_beta(fault: bool = False) -> CheckResult:
    got = derive_tau_beta_upper(0.5, 0.05) + (1e-6 if fault else 0.0)
    want = math.exp(-10.0)
    ok = abs(got - want) <= 1e-9
    return CheckResult("derive-tau-beta", ok, f"got {got!r}, want exp(-10) = {want!r}",
                       failing_case=None if ok else {"H0": 0.5, "eps": 0.05, "got": got})


@_timed
def check_derive_tau_neg(fault: bool = False) -> CheckResult:
    got = derive_tau_neg_lower(0.9, 0.05, 10, 1) + (1e-6 if fault else 0.0)
    want = 0.9 - 0.05 / 9
    ok = abs(got - want) <= 1e-9
    return CheckResult("derive-tau-neg", ok, f"got {got!r}, want {want!r}",
                       failing_case=None if ok else {"tau_pos": 0.9, "eps": 0.05, "C": 10,
                                                     "k": 1, "got": got})


# -- gradient checks through the full forward -------------------------------

@dataclass
class GradInstance:
    params: netcore.ModelParams
    x: np.ndarray
    cfg: hfa.HfaConfig
    seed: int

    def describe(self) -> dict:
        return {"seed": self.seed, "x_shape": list(self.x.shape), "in_dim": self.params.in_dim,
                "n_classes": self.params.n_classes, "width": self.params.width,
                "feat_dim": self.params.feat_dim, "hfa_enabled": self.cfg.enabled,
                "window": self.cfg.window, "stride": self.cfg.stride,
                "global_scale": self.cfg.global_scale, "gate": self.cfg.gate.mode}


def random_instance(seed: int) -> GradInstance:
    """A small random network, input batch and aggregation setting."""
    rng = np.random.default_rng([seed, 13])
    D = int(rng.integers(2, 4))
    C = int(rng.integers(3, 6))
    params = netcore.init_params(D, C, width=int(rng.integers(3, 7)),
                                 feat_dim=int(rng.integers(3, 7)), seed=seed)
    params.arrays["Wc"] *= 4.0
    params.arrays["bc"] += rng.normal(0.0, 0.5, C)
    params.arrays["gw"] += rng.normal(0.0, 0.5, 2 * C)
    params.arrays["gb"] += rng.normal(0.0, 0.5, 1)
    dense = rng.random() < 0.5
    if dense:
        H, W = (int(v) for v in rng.integers(4, 7, size=2))
        x = rng.normal(0.0, 1.5, size=(2, D, H, W))
        window = (int(rng.integers(2, H + 1)), int(rng.integers(2, W + 1)))
        stride = (int(rng.integers(1, window[0] + 1)), int(rng.integers(1, window[1] + 1)))
        gate = hfa.FusionGate("learned" if rng.random() < 0.7 else "average",
                              float(rng.uniform(0.2, 0.8)))
        cfg = hfa.HfaConfig(enabled=rng.random() < 0.9, window=window, stride=stride,
                            global_scale=int(rng.integers(1, 3)), gate=gate)
    else:
        x = rng.normal(0.0, 1.5, size=(3, D))
        window = int(rng.integers(1, D + 1))
        cfg = hfa.HfaConfig(enabled=rng.random() < 0.9, window=(1, window),
                            stride=(1, int(rng.integers(1, window + 1))),
                            gate=hfa.FusionGate("average", float(rng.uniform(0.2, 0.8))))
    return GradInstance(params=params, x=x, cfg=cfg, seed=seed)


def _perturb(grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    g = {k: v.copy() for k, v in grads.items()}
    g["W2"].reshape(-1)[0] += 1e-3 + 0.01 * abs(g["W2"].reshape(-1)[0])
    return g


def cacl_loss_fn(inst: GradInstance, tau_pos: float = 0.5, tau_neg: float = 0.3, fault=False):
    """Complementary loss with masks frozen at the unperturbed point."""
    base = hfa.hfa_forward(inst.params, inst.x, inst.cfg).probs
    masks = np.moveaxis(build_masks(np.moveaxis(base, 1, -1), tau_pos, tau_neg), -1, 1)

    def fn(params):
        out = hfa.hfa_forward(params, inst.x, inst.cfg)
        loss, g = cacl_loss_probs(out.probs, masks, axis=1)
        grads = hfa.hfa_backward(params, out, g)
        return loss, _perturb(grads) if fault else grads
    return fn


def dis_loss_fn(inst: GradInstance, lambda_align: float = 1.0, fault=False):
    """Cosine alignment to a fixed second network's features on a random unit set."""
    rng = np.random.default_rng([inst.seed, 17])
    ref = netcore.init_params(inst.params.in_dim, inst.params.n_classes,
                              width=inst.params.width, feat_dim=inst.params.feat_dim,
                              seed=inst.seed + 1)
    f_ref = hfa.hfa_forward(ref, inst.x, inst.cfg).features
    unit_shape = f_ref.shape[:1] + f_ref.shape[2:]
    omega = rng.random(unit_shape) < 0.7
    omega.reshape(-1)[0] = True

    def fn(params):
        out = hfa.hfa_forward(params, inst.x, inst.cfg)
        loss, gf = alignment.dist_loss(out.features, f_ref, omega, lambda_align)
        grads = hfa.hfa_backward(params, out, None, gf)
        return loss, _perturb(grads) if fault else grads
    return fn


def mix_loss_fn(inst: GradInstance, fault=False):
    """Mixed-sample loss on a fixed splice of two inputs, masks frozen."""
    rng = np.random.default_rng([inst.seed, 19])
    C = inst.params.n_classes
    x_rt = rng.normal(0.0, 1.5, size=inst.x.shape)
    y_ps = np.argmax(hfa.hfa_forward(inst.params, inst.x, inst.cfg).probs, axis=1)
    y_rt = np.argmax(hfa.hfa_forward(inst.params, x_rt, inst.cfg).probs, axis=1)
    M = np.stack([np.asarray(alignment.make_class_mask(y, rng)) for y in y_ps])
    mixed = alignment.class_mix(inst.x, alignment.one_hot(y_ps, C), x_rt,
                                alignment.one_hot(y_rt, C), M)
    cfg = CaclConfig(tau_pos=0.5, tau_neg=0.3)
    base = hfa.hfa_forward(inst.params, mixed.x_mix, inst.cfg).probs
    masks = alignment.mix_masks(base, cfg)

    def fn(params):
        out = hfa.hfa_forward(params, mixed.x_mix, inst.cfg)
        loss, g = alignment.mix_loss_probs(out.probs, mixed.y_mix, cfg, masks=masks)
        grads = hfa.hfa_backward(params, out, g)
        return loss, _perturb(grads) if fault else grads
    return fn


LOSS_BUILDERS = {"grad-cacl": cacl_loss_fn, "grad-dis": dis_loss_fn, "grad-mix": mix_loss_fn}


@_timed
def check_gradients(name: str, n: int = 100, tol: float = 1e-4, seed: int = 0,
                    fault: bool = False) -> CheckResult:
    build = LOSS_BUILDERS[name]
    worst, worst_case = 0.0, None
    for i in range(n):
        inst = random_instance(seed * 100_003 + i)
        err = netcore.grad_check(build(inst, fault=fault), inst.params, eps=1e-5,
                                 max_entries=24, rng=np.random.default_rng([seed, i]))
        if err > worst:
            worst, worst_case = err, inst.describe()
    ok = worst <= tol
    return CheckResult(name, ok, f"{n} instances, max relative error {worst:.2e} (tol {tol:g})",
                       failing_case=None if ok else worst_case, info={"max_rel_err": worst})


# -- aggregation oracle -----------------------------------------------------

def brute_force_aggregate(patches, spec: hfa.GridSpec) -> np.ndarray:
    """Per-site mean over the patches covering that site, one site at a time."""
    H, W = spec.shape
    lead = patches[0].shape[:-2]
    out = np.empty(lead + (H, W))
    for i in range(H):
        for j in range(W):
            acc = np.zeros(lead)
            count = 0
            for (y1, y2, x1, x2), p in zip(spec.regions, patches):
                if y1 <= i < y2 and x1 <= j < x2:
                    acc = acc + p[..., i - y1, j - x1]
                    count += 1
            out[..., i, j] = acc / count
    return out


@_timed
def check_hfa_oracle(n: int = 200, seed: int = 0, fault: bool = False) -> CheckResult:
    rng = np.random.default_rng([seed, 23])
    for t in range(n):
        H, W = (int(v) for v in rng.integers(1, 11, size=2))
        window = (int(rng.integers(1, H + 1)), int(rng.integers(1, W + 1)))
        stride = (int(rng.integers(1, window[0] + 1)), int(rng.integers(1, window[1] + 1)))
        spec = hfa.make_grid((H, W), window, stride)
        C = int(rng.integers(1, 5))
        patches = [rng.random((C, y2 - y1, x2 - x1)) for y1, y2, x1, x2 in spec.regions]
        got = hfa.aggregate_local(patches, spec)
        if fault:
            got = got.copy()
            got.reshape(-1)[0] = np.nextafter(got.reshape(-1)[0], np.inf)
        want = brute_force_aggregate(patches, spec)
        if not np.array_equal(got, want):
            case = {"trial": t, "shape": [H, W], "window": list(window), "stride": list(stride),
                    "classes": C, "max_abs_diff": float(np.max(np.abs(got - want)))}
            return CheckResult("hfa-oracle", False, f"mismatch at trial {t}", failing_case=case)
    return CheckResult("hfa-oracle", True, f"{n} grids, exact match at float64")


@_timed
def check_hfa_degenerate(n: int = 20, seed: int = 0, fault: bool = False) -> CheckResult:
    """A single full-input window (and no global down-sampling) is the plain pass."""
    rng = np.random.default_rng([seed, 29])
    for t in range(n):
        inst = random_instance(seed * 7919 + t)
        x = inst.x
        if x.ndim == 4:
            cfg = hfa.HfaConfig(window=x.shape[-2:], stride=(1, 1), global_scale=1,
                                gate=hfa.FusionGate("learned"))
        else:
            cfg = hfa.HfaConfig(window=None, gate=hfa.FusionGate("average",
                                                                  float(rng.uniform(0, 1))))
        got = hfa.hfa_forward(inst.params, x, cfg)
        want = hfa.plain_forward(inst.params, x)
        probs = got.probs + (1e-12 if fault else 0.0)
        if not (np.array_equal(probs, want.probs) and np.array_equal(got.features, want.features)):
            return CheckResult("hfa-degenerate", False, f"differs from plain pass at trial {t}",
                               failing_case=inst.describe())
    return CheckResult("hfa-degenerate", True, f"{n} instances bit-identical to the plain pass")


def run_all(cfg=None, fault: str | None = None) -> list[CheckResult]:
    """Run every check; ``cfg`` is a :class:`~ssa_tta.config.VerifyConfig`."""
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; expected one of {FAULTS}")
    if cfg is None:
        from .config import VerifyConfig
        cfg = VerifyConfig()
    results = [
        check_theorem(cfg.n_theorem, cfg.max_entropy, (cfg.min_classes, cfg.max_classes),
                      cfg.seed, fault=fault == "theorem"),
        check_derive_tau_beta(fault=fault == "derive-tau-beta"),
        check_derive_tau_neg(fault=fault == "derive-tau-neg"),
    ]
    for name in LOSS_BUILDERS:
        results.append(check_gradients(name, cfg.n_grad, cfg.grad_tol, cfg.seed,
                                       fault=fault == name))
    results.append(check_hfa_oracle(cfg.n_hfa, cfg.seed, fault=fault == "hfa-oracle"))
    results.append(check_hfa_degenerate(seed=cfg.seed, fault=fault == "hfa-degenerate"))
    return results
