"""Glue between the config, the generators and the engine.

Shared by the CLI and the benchmark tests so both run exactly the same
pipeline: a reference extractor trained on the generic distribution, a
source model fine-tuned from it, then adaptation on the target set.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import engine, netcore, synthdata
from .config import ExperimentConfig
from .synthdata import Dataset


@dataclass
class Domains:
    source: Dataset
    target: Dataset
    generic: Dataset


@dataclass
class Models:
    reference: netcore.ModelParams
    source: netcore.ModelParams


def make_domains(cfg: ExperimentConfig, seed: int | None = None) -> Domains:
    seed = cfg.seed if seed is None else seed
    src, tgt = synthdata.gen_domains(cfg.data, seed)
    generic = synthdata.gen_generic_distribution(cfg.data, seed)
    return Domains(source=src, target=tgt, generic=generic)


def train_models(cfg: ExperimentConfig, domains: Domains, seed: int | None = None) -> Models:
    """Reference on the generic set; source starts from the reference weights.

    Starting from the reference keeps the two feature spaces comparable,
    which the alignment loss relies on.
    """
    seed = cfg.seed if seed is None else seed
    ref = netcore.init_params(cfg.data.dims, cfg.data.n_classes, width=cfg.model.width,
                              feat_dim=cfg.model.feat_dim, seed=seed)
    engine.train_supervised(ref, domains.generic, cfg.reference, seed=seed)
    src = ref.clone()
    engine.train_supervised(src, domains.source, cfg.source, seed=seed + 1)
    return Models(reference=ref, source=src)


def hfa_config(cfg: ExperimentConfig, adapt: engine.AdaptConfig | None = None):
    return (adapt or cfg.adapt).hfa_config(cfg.dense)


def evaluate(params, data: Dataset, cfg: ExperimentConfig,
             adapt: engine.AdaptConfig | None = None) -> float:
    return engine.evaluate(params, data, hfa_config(cfg, adapt))


def online_evaluator(target: Dataset, cfg: ExperimentConfig, adapt=None):
    """Scores each streamed batch's predictions against held-out labels."""
    pos = {int(i): k for k, i in enumerate(target.ids)}
    n_classes = cfg.data.n_classes

    def score(params, ids, preds):
        y = target.y[[pos[int(i)] for i in ids]]
        if y.ndim == 1:
            return float(np.mean(preds == y))
        return engine.mean_iou(preds, y, n_classes)
    return score


def run_adaptation(cfg: ExperimentConfig, models: Models, target: Dataset,
                   adapt: engine.AdaptConfig | None = None, track: bool = True):
    """Offline or online adaptation as selected by ``adapt.mode``.

    The engine only receives the unlabeled view; labels stay in the
    evaluation callbacks.
    """
    adapt = cfg.adapt if adapt is None else adapt
    unlabeled = target.unlabeled()
    if adapt.mode == "online":
        stream = engine.stream_batches(unlabeled, adapt.batch_size, adapt.seed)
        return engine.adapt_online(models.source, models.reference, stream, adapt,
                                   online_evaluator(target, cfg, adapt) if track else None)
    evaluator = engine.make_evaluator(target, hfa_config(cfg, adapt)) if track else None
    return engine.adapt(models.source, models.reference, unlabeled, adapt, evaluator)


@dataclass
class BenchmarkRow:
    seed: int
    source_acc: float
    adapted_acc: float

    @property
    def improvement(self) -> float:
        return 100.0 * (self.adapted_acc - self.source_acc)


def benchmark(cfg: ExperimentConfig, seeds, adapt: engine.AdaptConfig | None = None
              ) -> list[BenchmarkRow]:
    """Adapt once per seed and compare target accuracy before and after."""
    rows = []
    for seed in seeds:
        scfg = cfg.with_seed(seed)
        a = replace(adapt if adapt is not None else scfg.adapt, seed=seed)
        dom = make_domains(scfg)
        models = train_models(scfg, dom)
        before = evaluate(models.source, dom.target, scfg, a)
        res = run_adaptation(scfg, models, dom.target, a, track=False)
        rows.append(BenchmarkRow(seed, before, evaluate(res.params, dom.target, scfg, a)))
    return rows


def ablation_table(cfg: ExperimentConfig, seeds) -> dict[str, list[float]]:
    """Target-metric gain in points per ablation setting and seed.

    Keys follow :func:`engine.ablation_matrix`; models are trained once per
    seed and shared by every setting.
    """
    table: dict[str, list[float]] = {}
    for seed in seeds:
        scfg = cfg.with_seed(seed)
        dom = make_domains(scfg)
        models = train_models(scfg, dom)
        for name, a in engine.ablation_matrix(replace(scfg.adapt, seed=seed)).items():
            before = evaluate(models.source, dom.target, scfg, a)
            res = run_adaptation(scfg, models, dom.target, a, track=False)
            gain = 100.0 * (evaluate(res.params, dom.target, scfg, a) - before)
            table.setdefault(name, []).append(gain)
    return table
