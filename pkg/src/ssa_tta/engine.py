"""Two-stage test-time adaptation driver.

Stage 1 runs the aggregated forward pass over the target set, keeps the
entropy memory up to date and self-trains with the complementary loss
while the classifier is frozen. Stage 2 splits the target set by the
memory, pulls pseudo-source features towards a frozen reference extractor
and trains on class-masked mixes of pseudo-source and remaining-target
samples.

The engine only ever sees :class:`~ssa_tta.synthdata.UnlabeledSet`;
evaluation happens through caller-supplied callbacks that hold the labels.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from . import alignment, hfa, netcore
from .cacl import CaclConfig, TauNegScheduler, build_masks, cacl_loss_probs
from .numerics import entropy
from .selection import EntropyBank, knee_tau_par, partition, ps_count
from .synthdata import Dataset, UnlabeledSet

log = logging.getLogger(__name__)

MODES = ("offline", "online")
ABLATIONS = ("hfa", "cacl", "sda")
METRIC_FIELDS = ("iter", "stage", "loss_cacl", "loss_dis", "loss_mix", "metric",
                 "n_ps", "n_rt", "tau_neg_eff", "lr")


@dataclass(frozen=True)
class AdaptConfig:
    tau_pos: float = 0.9
    tau_neg: float = 0.9
    tau_neg_schedule: str = "fixed"
    tau_par: float | str = 0.5  # a fraction, or "knee"
    alpha: float = 0.9
    lambda_align: float = 1.0
    c_align: tuple[int, ...] | None = None
    window: tuple[int, int] | None = None
    stride: tuple[int, int] | None = None
    global_scale: int = 2
    gate: str = "learned"  # dense tasks only; vectors always average
    tau_lg: float = 0.5
    stage1_epochs: int = 5
    stage2_epochs: int = 5
    batch_size: int = 32
    seed: int = 0
    mode: str = "offline"
    lr_extractor: float = 2.5e-4
    lr_classifier: float = 2.5e-3
    lr_gate: float = 2.5e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    disable: tuple[str, ...] = ()
    plateau_stop: bool = False
    plateau_patience: int = 3
    plateau_delta: float = 1e-4

    def __post_init__(self):
        if not (0.0 < self.tau_pos < 1.0 and 0.0 < self.tau_neg < 1.0):
            raise ValueError("tau_pos and tau_neg must lie in (0, 1)")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha={self.alpha} must lie in [0, 1)")
        if not 0.0 <= self.tau_lg <= 1.0:
            raise ValueError(f"tau_lg={self.tau_lg} must lie in [0, 1]")
        if isinstance(self.tau_par, str):
            if self.tau_par != "knee":
                raise ValueError(f"tau_par must be a fraction or 'knee', got {self.tau_par!r}")
        elif not 0.0 < self.tau_par < 1.0:
            raise ValueError(f"tau_par={self.tau_par} must lie in (0, 1)")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        unknown = set(self.disable) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablation flags {sorted(unknown)}; expected {ABLATIONS}")
        if self.gate not in hfa.GATE_MODES:
            raise ValueError(f"gate must be one of {hfa.GATE_MODES}")
        self.cacl_config()  # validates the schedule tag

    def cacl_config(self) -> CaclConfig:
        return CaclConfig(tau_pos=self.tau_pos, tau_neg=self.tau_neg,
                          schedule=self.tau_neg_schedule)

    def hfa_config(self, dense: bool) -> hfa.HfaConfig:
        gate = hfa.FusionGate(mode=self.gate if dense else "average", local_weight=self.tau_lg)
        return hfa.HfaConfig(enabled="hfa" not in self.disable, window=self.window,
                             stride=self.stride, global_scale=self.global_scale, gate=gate)

    def optim_state(self, max_iter: int) -> netcore.OptimState:
        return netcore.OptimState(
            lr={"extractor": self.lr_extractor, "classifier": self.lr_classifier,
                "gate": self.lr_gate},
            momentum=self.momentum, weight_decay=self.weight_decay, power=self.poly_power,
            max_iter=max_iter)


@dataclass
class MetricsRecord:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        if self.rows and row["iter"] < self.rows[-1]["iter"]:
            raise ValueError("metric rows must have a non-decreasing iteration index")
        self.rows.append({k: row.get(k, "") for k in METRIC_FIELDS})

    def __len__(self) -> int:
        return len(self.rows)


# -- evaluation -------------------------------------------------------------

def per_class_iou(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> dict[int, float]:
    """IoU for every class present in ``truth``."""
    out = {}
    for c in range(n_classes):
        t = truth == c
        if not t.any():
            continue
        p = pred == c
        out[c] = float(np.sum(p & t) / np.sum(p | t))
    return out


def mean_iou(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> float:
    ious = per_class_iou(pred, truth, n_classes)
    return float(np.mean(list(ious.values())))


def predict(params: netcore.ModelParams, x: np.ndarray, hfa_cfg: hfa.HfaConfig,
            chunk: int = 256) -> np.ndarray:
    preds = []
    for s in range(0, len(x), chunk):
        preds.append(np.argmax(hfa.hfa_forward(params, x[s:s + chunk], hfa_cfg).probs, axis=1))
    return np.concatenate(preds)


def evaluate(params: netcore.ModelParams, data: Dataset, hfa_cfg: hfa.HfaConfig) -> float:
    """Top-1 accuracy for vectors, mean IoU for fields."""
    if getattr(data, "y", None) is None:
        raise ValueError("evaluation needs labels")
    pred = predict(params, data.x, hfa_cfg)
    if data.x.ndim == 2:
        return float(np.mean(pred == data.y))
    return mean_iou(pred, data.y, params.n_classes)


def make_evaluator(data: Dataset, hfa_cfg: hfa.HfaConfig) -> Callable[[netcore.ModelParams], float]:
    return lambda params: evaluate(params, data, hfa_cfg)


# -- helpers ----------------------------------------------------------------

def _check_unlabeled(data) -> UnlabeledSet:
    if isinstance(data, Dataset) or hasattr(data, "y"):
        raise TypeError("adaptation accepts only unlabeled data (ids and inputs)")
    if not isinstance(data, UnlabeledSet):
        raise TypeError(f"expected an UnlabeledSet, got {type(data).__name__}")
    return data


def sample_entropy(probs: np.ndarray) -> np.ndarray:
    """Per-sample entropy; fields use the mean over sites."""
    h = entropy(np.moveaxis(probs, 1, -1))
    return h if h.ndim == 1 else h.reshape(h.shape[0], -1).mean(axis=1)


def _stage1_masks(probs: np.ndarray, cfg: AdaptConfig, tau_neg: float) -> np.ndarray:
    masks = np.moveaxis(build_masks(np.moveaxis(probs, 1, -1), cfg.tau_pos, tau_neg), -1, 1)
    if "cacl" in cfg.disable:
        masks = np.where(masks == 1, 1, 0).astype(np.int8)
    return masks


def _grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def _add(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    for k in a:
        a[k] += b[k]
    return a


def _batches(n: int, size: int) -> list[slice]:
    return [slice(s, min(n, s + size)) for s in range(0, n, size)]


@dataclass
class RunState:
    """Mutable state shared by the stages of one run."""
    opt: netcore.OptimState
    scheduler: TauNegScheduler
    metrics: MetricsRecord = field(default_factory=MetricsRecord)
    grad_variance: float = 0.0
    epoch: int = 0  # global epoch counter across stages, drives the tau_neg schedule
    update_counts: Counter = field(default_factory=Counter)


def _stage1_step(params, x, ids, cfg, hfa_cfg, bank, tau_neg):
    out = hfa.hfa_forward(params, x, hfa_cfg)
    probs = out.probs
    bank.update_many(ids, sample_entropy(probs))
    masks = _stage1_masks(probs, cfg, tau_neg)
    loss, gprobs = cacl_loss_probs(probs, masks, axis=1)
    grads = hfa.hfa_backward(params, out, gprobs)
    return loss, grads


def stage1(params: netcore.ModelParams, target: UnlabeledSet, cfg: AdaptConfig,
           bank: EntropyBank, state: RunState | None = None,
           evaluator: Callable | None = None):
    """Entropy-memory update and complementary self-training, classifier frozen."""
    target = _check_unlabeled(target)
    n = len(target)
    if n == 0:
        raise ValueError("empty target set")
    if state is None:
        state = new_run_state(cfg, n_stage1=cfg.stage1_epochs * len(_batches(n, cfg.batch_size)))
    dense = target.x.ndim == 4
    hfa_cfg = cfg.hfa_config(dense)
    params.freeze("classifier")
    params.unfreeze("extractor", "gate")
    prev_losses: list[float] = []
    for epoch in range(cfg.stage1_epochs):
        tau_neg = state.scheduler(state.epoch, state.grad_variance)
        rng = np.random.default_rng([cfg.seed, 1, epoch])
        order = rng.permutation(n)
        losses, norms = [], []
        for sl in _batches(n, cfg.batch_size):
            idx = order[sl]
            loss, grads = _stage1_step(params, target.x[idx], target.ids[idx], cfg, hfa_cfg,
                                       bank, tau_neg)
            netcore.sgd_step(params, grads, state.opt)
            state.update_counts.update(target.ids[idx].tolist())
            losses.append(loss * len(idx))
            norms.append(_grad_norm(grads))
        epoch_loss = float(sum(losses) / n)
        state.grad_variance = float(np.var(norms))
        state.epoch += 1
        state.metrics.append(
            iter=state.opt.iter, stage="stage1", loss_cacl=epoch_loss, loss_dis=0.0,
            loss_mix=0.0, metric=evaluator(params) if evaluator else float("nan"),
            n_ps=0, n_rt=0, tau_neg_eff=tau_neg, lr=state.opt.effective_lr("extractor"))
        log.debug("stage1 epoch %d loss %.6f", epoch, epoch_loss)
        prev_losses.append(epoch_loss)
        if cfg.plateau_stop and _plateaued(prev_losses, cfg.plateau_patience, cfg.plateau_delta):
            log.info("stage1 plateau after %d epochs", epoch + 1)
            break
    return params, bank


def _plateaued(losses: list[float], patience: int, delta: float) -> bool:
    if len(losses) <= patience:
        return False
    tail = losses[-(patience + 1):]
    return all(abs(b - a) < delta for a, b in zip(tail, tail[1:]))


def resolve_tau_par(cfg: AdaptConfig, bank: EntropyBank) -> float:
    return knee_tau_par(bank) if cfg.tau_par == "knee" else float(cfg.tau_par)


def _pseudo_labels(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.argmax(probs, axis=1), np.max(probs, axis=1)


def _sda_losses(params, reference, x_ps, x_rt, cfg, hfa_cfg, tau_neg, rng, mask_fn=None,
                pair_ids=()):
    """Pseudo-source correction plus the mixed-sample loss for one batch pair."""
    C = params.n_classes
    out_ps = hfa.hfa_forward(params, x_ps, hfa_cfg)
    ref_feats = hfa.hfa_forward(reference, x_ps, hfa_cfg).features
    y_ps, conf_ps = _pseudo_labels(out_ps.probs)
    omega = alignment.select_omega(y_ps, conf_ps, cfg.c_align, cfg.tau_pos)
    loss_dis, g_feat = alignment.dist_loss(out_ps.features, ref_feats, omega, cfg.lambda_align)

    y_rt, _ = _pseudo_labels(hfa.hfa_forward(params, x_rt, hfa_cfg).probs)
    if mask_fn is None:
        M = np.stack([np.asarray(alignment.make_class_mask(y, rng)) for y in y_ps])
    else:
        M = np.stack([np.asarray(mask_fn(y)) for y in y_ps])
    mixed = alignment.class_mix(x_ps, alignment.one_hot(y_ps, C), x_rt,
                                alignment.one_hot(y_rt, C), M, provenance=pair_ids)
    out_mix = hfa.hfa_forward(params, mixed.x_mix, hfa_cfg)
    masks = alignment.mix_masks(out_mix.probs, cfg.cacl_config(), tau_neg)
    if "cacl" in cfg.disable:
        masks = np.zeros_like(masks)
    loss_mix, g_mix = alignment.mix_loss_probs(out_mix.probs, mixed.y_mix, cfg.cacl_config(),
                                               masks=masks)
    grads = params.zeros_like()
    if omega.size:
        hfa.hfa_backward(params, out_ps, None, g_feat, into=grads)
    hfa.hfa_backward(params, out_mix, g_mix, into=grads)
    return loss_dis, loss_mix, grads


def stage2(params: netcore.ModelParams, reference: netcore.ModelParams, target: UnlabeledSet,
           bank: EntropyBank, cfg: AdaptConfig, state: RunState | None = None,
           evaluator: Callable | None = None, mask_fn: Callable | None = None):
    """Stepwise alignment on pseudo-source / remaining-target pairs."""
    target = _check_unlabeled(target)
    dense = target.x.ndim == 4
    hfa_cfg = cfg.hfa_config(dense)
    tau_par = resolve_tau_par(cfg, bank)
    part = partition(bank, tau_par)
    if part.n_rt == 0:
        raise ValueError(
            f"tau_par={tau_par} leaves no remaining-target samples out of {len(bank)}; "
            "lower tau_par")
    pos = {int(i): k for k, i in enumerate(target.ids)}
    ps_idx = np.array([pos[i] for i in part.ps_ids])
    rt_idx = np.array([pos[i] for i in part.rt_ids])
    if state is None:
        state = new_run_state(cfg, n_stage2=cfg.stage2_epochs * len(_batches(len(rt_idx),
                                                                             cfg.batch_size)))
    params.unfreeze("extractor", "classifier", "gate")
    for epoch in range(cfg.stage2_epochs):
        tau_neg = state.scheduler(state.epoch, state.grad_variance)
        rng = np.random.default_rng([cfg.seed, 2, epoch])
        rt_order = rt_idx[rng.permutation(len(rt_idx))]
        ps_order = ps_idx[rng.permutation(len(ps_idx))]
        sums = np.zeros(2)
        norms = []
        cursor = 0
        for sl in _batches(len(rt_order), cfg.batch_size):
            rt_b = rt_order[sl]
            take = np.arange(cursor, cursor + len(rt_b)) % len(ps_order)
            cursor += len(rt_b)
            ps_b = ps_order[take]
            ld, lm, grads = _sda_losses(params, reference, target.x[ps_b], target.x[rt_b], cfg,
                                        hfa_cfg, tau_neg, rng, mask_fn,
                                        pair_ids=(target.ids[ps_b], target.ids[rt_b]))
            netcore.sgd_step(params, grads, state.opt)
            state.update_counts.update(target.ids[ps_b].tolist())
            state.update_counts.update(target.ids[rt_b].tolist())
            sums += np.array([ld, lm]) * len(rt_b)
            norms.append(_grad_norm(grads))
        sums /= len(rt_idx)
        state.grad_variance = float(np.var(norms))
        state.epoch += 1
        state.metrics.append(
            iter=state.opt.iter, stage="stage2", loss_cacl=0.0, loss_dis=float(sums[0]),
            loss_mix=float(sums[1]), metric=evaluator(params) if evaluator else float("nan"),
            n_ps=part.n_ps, n_rt=part.n_rt, tau_neg_eff=tau_neg,
            lr=state.opt.effective_lr("extractor"))
    return params


def new_run_state(cfg: AdaptConfig, n_stage1: int = 0, n_stage2: int = 0) -> RunState:
    return RunState(opt=cfg.optim_state(max(1, n_stage1 + n_stage2)),
                    scheduler=TauNegScheduler(cfg.cacl_config()))


@dataclass
class AdaptResult:
    params: netcore.ModelParams
    bank: EntropyBank
    metrics: MetricsRecord
    partition_tau_par: float | None = None
    update_counts: Counter = field(default_factory=Counter)


def adapt(params: netcore.ModelParams, reference: netcore.ModelParams, target: UnlabeledSet,
          cfg: AdaptConfig, evaluator: Callable | None = None) -> AdaptResult:
    """Stage 1 then Stage 2 on a copy of ``params``."""
    target = _check_unlabeled(target)
    if len(target) == 0:
        raise ValueError("empty target set")
    model = params.clone()
    bank = EntropyBank(alpha=cfg.alpha)
    n = len(target)
    n1 = cfg.stage1_epochs * len(_batches(n, cfg.batch_size))
    run_sda = "sda" not in cfg.disable and cfg.stage2_epochs > 0
    # Stage-2 batch count depends on the partition; n batches is a safe upper bound
    # for the poly schedule length, refined once the split is known.
    state = new_run_state(cfg, n_stage1=n1)
    if cfg.stage1_epochs:
        stage1(model, target, cfg, bank, state, evaluator)
    else:
        out = hfa.hfa_forward(model, target.x, cfg.hfa_config(target.x.ndim == 4))
        bank.update_many(target.ids, sample_entropy(out.probs))
    tau_par = None
    if run_sda:
        tau_par = resolve_tau_par(cfg, bank)
        n_rt = n - min(ps_count(tau_par, n), n)
        state.opt.max_iter = n1 + cfg.stage2_epochs * len(_batches(n_rt, cfg.batch_size))
        stage2(model, reference, target, bank, replace(cfg, tau_par=tau_par), state, evaluator)
    model.unfreeze("extractor", "classifier", "gate")
    model.frozen.update(params.frozen)
    return AdaptResult(params=model, bank=bank, metrics=state.metrics, partition_tau_par=tau_par,
                       update_counts=state.update_counts)


@dataclass
class OnlineResult:
    params: netcore.ModelParams
    bank: EntropyBank
    metrics: MetricsRecord
    update_counts: Counter
    predictions: list[np.ndarray]


def adapt_online(params: netcore.ModelParams, reference: netcore.ModelParams,
                 stream: Iterable[UnlabeledSet], cfg: AdaptConfig,
                 batch_evaluator: Callable | None = None, n_batches: int | None = None
                 ) -> OnlineResult:
    """Streaming adaptation: one gradient step per incoming batch.

    Each step combines the complementary self-training loss with, once the
    memory has history, a within-batch alignment/mixing term: batch samples
    whose entropy is at or below the memory's ``tau_par`` quantile act as
    pseudo-source. Predictions for the batch are emitted right after its
    update. ``batch_evaluator(params, ids, preds)`` may score them.
    """
    model = params.clone()
    bank = EntropyBank(alpha=cfg.alpha)
    batches = stream if isinstance(stream, list) else list(stream)
    state = new_run_state(cfg, n_stage1=len(batches) if n_batches is None else n_batches)
    model.freeze("classifier")
    model.unfreeze("extractor", "gate")
    preds_out = []
    tau_par_fixed = None if cfg.tau_par == "knee" else float(cfg.tau_par)
    for b, batch in enumerate(batches):
        batch = _check_unlabeled(batch)
        if len(batch) == 0:
            raise ValueError("online batches must be non-empty")
        dense = batch.x.ndim == 4
        hfa_cfg = cfg.hfa_config(dense)
        tau_neg = state.scheduler(b, state.grad_variance)
        history = np.array(list(bank.entries.values()))
        cutoff = None
        if history.size and "sda" not in cfg.disable:
            tp = tau_par_fixed if tau_par_fixed is not None else knee_tau_par(history)
            cutoff = np.sort(history)[min(ps_count(tp, history.size), history.size) - 1]

        out = hfa.hfa_forward(model, batch.x, hfa_cfg)
        h = sample_entropy(out.probs)
        bank.update_many(batch.ids, h)
        masks = _stage1_masks(out.probs, cfg, tau_neg)
        loss_c, gprobs = cacl_loss_probs(out.probs, masks, axis=1)
        grads = hfa.hfa_backward(model, out, gprobs)
        loss_d = loss_m = 0.0
        n_ps = n_rt = 0
        if cutoff is not None:
            is_ps = h <= cutoff
            n_ps, n_rt = int(is_ps.sum()), int((~is_ps).sum())
            if n_ps and n_rt:
                ps_b = np.flatnonzero(is_ps)
                rt_b = np.flatnonzero(~is_ps)
                ps_b = ps_b[np.arange(len(rt_b)) % len(ps_b)]
                rng = np.random.default_rng([cfg.seed, 3, b])
                loss_d, loss_m, g2 = _sda_losses(model, reference, batch.x[ps_b], batch.x[rt_b],
                                                 cfg, hfa_cfg, tau_neg, rng)
                _add(grads, g2)
        netcore.sgd_step(model, grads, state.opt)
        state.update_counts.update(batch.ids.tolist())
        state.grad_variance = 0.0
        pred = predict(model, batch.x, hfa_cfg)
        preds_out.append(pred)
        metric = batch_evaluator(model, batch.ids, pred) if batch_evaluator else float("nan")
        state.metrics.append(
            iter=state.opt.iter, stage="online", loss_cacl=loss_c, loss_dis=loss_d,
            loss_mix=loss_m, metric=metric, n_ps=n_ps, n_rt=n_rt, tau_neg_eff=tau_neg,
            lr=state.opt.effective_lr("extractor"))
    model.frozen.update(params.frozen)
    return OnlineResult(params=model, bank=bank, metrics=state.metrics,
                        update_counts=state.update_counts, predictions=preds_out)


def stream_batches(data: UnlabeledSet, batch_size: int, seed: int) -> list[UnlabeledSet]:
    """Split ``data`` into a seeded random sequence of disjoint mini-batches."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    order = np.random.default_rng([seed, 4]).permutation(len(data))
    return [data.subset(order[sl]) for sl in _batches(len(data), batch_size)]


def ablation_matrix(cfg: AdaptConfig) -> dict[str, AdaptConfig]:
    """Configurations for the component ablations, keyed by a short name."""
    out = {"full": replace(cfg, disable=())}
    for flag in ABLATIONS:
        out[f"no-{flag}"] = replace(cfg, disable=(flag,))
    return out


# -- supervised training for the source model and the reference extractor ---

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 required")


def train_supervised(params: netcore.ModelParams, data: Dataset, cfg: TrainConfig,
                     seed: int = 0) -> netcore.ModelParams:
    """Plain cross-entropy training of extractor and classifier, in place."""
    n = len(data)
    C = params.n_classes
    opt = netcore.OptimState(lr={"extractor": cfg.lr, "classifier": cfg.lr, "gate": 0.0},
                             momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                             max_iter=max(1, cfg.epochs * len(_batches(n, cfg.batch_size))))
    params.unfreeze("extractor", "classifier")
    params.freeze("gate")
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([seed, 5, epoch]).permutation(n)
        for sl in _batches(n, cfg.batch_size):
            idx = order[sl]
            _, _, probs, cache = netcore.forward_any(params, data.x[idx])
            y = alignment.one_hot(data.y[idx], C)
            n_units = probs.size // C
            gl = (probs - y) / n_units
            grads = netcore.backward_any(params, cache, gl)
            netcore.sgd_step(params, grads, opt)
    params.unfreeze("gate")
    params.iter = 0
    return params
