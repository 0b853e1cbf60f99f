"""Command-line front end.

    ssa-tta train-source --config exp.yaml --out runs/a
    ssa-tta adapt        --config exp.yaml --out runs/a [--mode online] [--disable sda]
    ssa-tta eval         --config exp.yaml --out runs/a
    ssa-tta verify       --config exp.yaml --out runs/a [--fault-inject grad-mix]
    ssa-tta sweep        --config exp.yaml --out runs/a

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 verification
failure. Timestamps appear only in ``*.manifest.json`` files, so every
other output is byte-identical across reruns with the same config and seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, artifacts, engine, experiment, netcore, verify
from .config import ConfigError, ExperimentConfig, config_digest, load_config, save_config

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_VERIFY = 0, 2, 3, 4
COMMANDS = ("train-source", "adapt", "eval", "verify", "sweep")

log = logging.getLogger("ssa_tta")


class MissingArtifact(Exception):
    pass


def _parse_disable(text: str) -> tuple[str, ...]:
    flags = tuple(sorted({s.strip() for s in text.split(",") if s.strip()}))
    unknown = set(flags) - set(engine.ABLATIONS)
    if unknown:
        raise argparse.ArgumentTypeError(
            f"unknown component(s) {sorted(unknown)}; choose from {','.join(engine.ABLATIONS)}")
    return flags


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssa-tta", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, type=Path, help="YAML experiment config")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    parser.add_argument("--mode", choices=engine.MODES, help="override adapt.mode")
    parser.add_argument("--disable", type=_parse_disable,
                        help="comma set of components to switch off: hfa,cacl,sda")
    parser.add_argument("--fault-inject", choices=verify.FAULTS, dest="fault",
                        help="verify only: corrupt one check on purpose")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    else:
        cfg = replace(cfg, adapt=replace(cfg.adapt, seed=cfg.seed))
    overrides = {}
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.disable is not None:
        overrides["disable"] = args.disable
    if overrides:
        try:
            cfg = replace(cfg, adapt=replace(cfg.adapt, **overrides))
        except ValueError as exc:
            raise ConfigError("adapt", str(exc)) from exc
    return cfg


def _manifest(command: str, cfg: ExperimentConfig, seeds=None, **extra) -> artifacts.RunManifest:
    return artifacts.RunManifest(command=command, config_digest=config_digest(cfg),
                                 seeds=list(seeds if seeds is not None else [cfg.seed]),
                                 started=artifacts.now_iso(), version=__version__, extra=extra)


def _load_model(path: Path) -> netcore.ModelParams:
    if not path.with_suffix(".bin").is_file() or not path.with_suffix(".json").is_file():
        raise MissingArtifact(f"missing model file {path.with_suffix('.bin')} "
                              "(run train-source first)")
    return netcore.load_params(path)


# -- commands ---------------------------------------------------------------

def cmd_train_source(cfg: ExperimentConfig, out: Path) -> int:
    manifest = _manifest("train-source", cfg)
    dom = experiment.make_domains(cfg)
    models = experiment.train_models(cfg, dom)
    ref_on_src = experiment.evaluate(models.reference, dom.source, cfg)
    ref_on_tgt = experiment.evaluate(models.reference, dom.target, cfg)
    src_acc = experiment.evaluate(models.source, dom.source, cfg)
    manifest.add(*netcore.save_params(models.reference, out / "reference",
                                      extra={"role": "reference"}))
    manifest.add(*netcore.save_params(models.source, out / "source", extra={"role": "source"}))
    manifest.add(save_config(cfg, out / "train-source.config.yaml"))
    manifest.extra.update(source_on_source=src_acc, reference_on_source=ref_on_src,
                          reference_on_target=ref_on_tgt)
    manifest.write(out / "train-source.manifest.json")
    print(f"source model: {src_acc:.4f} on source; reference: {ref_on_src:.4f} source, "
          f"{ref_on_tgt:.4f} target")
    return EXIT_OK


def cmd_adapt(cfg: ExperimentConfig, out: Path) -> int:
    models = experiment.Models(reference=_load_model(out / "reference"),
                               source=_load_model(out / "source"))
    manifest = _manifest("adapt", cfg, mode=cfg.adapt.mode,
                         disabled=sorted(cfg.adapt.disable))
    dom = experiment.make_domains(cfg)
    before = experiment.evaluate(models.source, dom.target, cfg)
    res = experiment.run_adaptation(cfg, models, dom.target)
    after = experiment.evaluate(res.params, dom.target, cfg)
    manifest.add(artifacts.write_metrics_csv(out / "metrics.csv", res.metrics))
    manifest.add(*netcore.save_params(res.params, out / "adapted", extra={"role": "adapted"}))
    manifest.add(*artifacts.dump_bank(out / "bank", res.bank, seed=cfg.seed))
    manifest.add(save_config(cfg, out / "adapt.config.yaml"))
    manifest.extra.update(target_before=before, target_after=after, rows=len(res.metrics))
    manifest.write(out / "adapt.manifest.json")
    print(f"target metric {before:.4f} -> {after:.4f} ({len(res.metrics)} metric rows)")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, out: Path) -> int:
    dom = experiment.make_domains(cfg)
    found = {}
    for role in ("reference", "source", "adapted"):
        path = out / role
        if path.with_suffix(".bin").is_file():
            params = _load_model(path)
            found[role] = {"source": experiment.evaluate(params, dom.source, cfg),
                           "target": experiment.evaluate(params, dom.target, cfg)}
    if not found:
        raise MissingArtifact(f"no model files in {out}")
    manifest = _manifest("eval", cfg)
    report = out / "eval.json"
    report.write_text(json.dumps(found, indent=2, sort_keys=True) + "\n")
    manifest.add(report)
    manifest.write(out / "eval.manifest.json")
    metric = "mIoU" if cfg.dense else "accuracy"
    for role, scores in found.items():
        print(f"{role:9s} {metric}: source {scores['source']:.4f}  target {scores['target']:.4f}")
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig, out: Path, fault: str | None = None) -> int:
    manifest = _manifest("verify", cfg, fault=fault)
    results = verify.run_all(cfg.verify, fault=fault)
    for r in results:
        print(r.line())
    report = out / "verify.json"
    payload = [{"name": r.name, "passed": r.passed, "detail": r.detail,
                "failing_case": r.failing_case, "info": r.info} for r in results]
    report.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    manifest.add(report)
    failed = [r for r in results if not r.passed]
    manifest.extra.update(failed=[r.name for r in failed])
    manifest.write(out / "verify.manifest.json")
    for r in failed:
        print(f"failing case for {r.name}: {json.dumps(r.failing_case, sort_keys=True)}")
    return EXIT_VERIFY if failed else EXIT_OK


def _axis_value(name: str, value):
    return tuple(int(v) for v in value) if name == "window" else value


def sensitivity_ranking(rows: list[dict]) -> list[dict]:
    """Max minus min of the outcome per axis, largest spread first."""
    by_axis: dict[str, list[float]] = {}
    for row in rows:
        by_axis.setdefault(row["axis"], []).append(row["metric"])
    ranking = [{"axis": a, "spread": max(v) - min(v), "points": len(v)} for a, v in by_axis.items()]
    ranking.sort(key=lambda r: (-r["spread"], r["axis"]))
    for rank, r in enumerate(ranking, 1):
        r["rank"] = rank
    return ranking


def run_sweep(cfg: ExperimentConfig) -> tuple[list[dict], list[dict]]:
    cache = {}
    for seed in cfg.sweep.seeds:
        scfg = cfg.with_seed(seed)
        dom = experiment.make_domains(scfg)
        cache[seed] = (scfg, dom, experiment.train_models(scfg, dom))
    rows = []
    for axis, values in cfg.sweep.axes.items():
        for value in values:
            scores, before = [], []
            for seed, (scfg, dom, models) in cache.items():
                adapt = replace(scfg.adapt, **{axis: _axis_value(axis, value)})
                res = experiment.run_adaptation(scfg, models, dom.target, adapt, track=False)
                scores.append(experiment.evaluate(res.params, dom.target, scfg, adapt))
                before.append(experiment.evaluate(models.source, dom.target, scfg, adapt))
            rows.append({"axis": axis, "value": json.dumps(value), "seeds": len(scores),
                         "metric": float(np.mean(scores)),
                         "improvement": float(100.0 * (np.mean(scores) - np.mean(before)))})
    return rows, sensitivity_ranking(rows)


def _write_rows(path: Path, rows: list[dict], header) -> Path:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header, lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def cmd_sweep(cfg: ExperimentConfig, out: Path) -> int:
    manifest = _manifest("sweep", cfg, seeds=cfg.sweep.seeds)
    rows, ranking = run_sweep(cfg)
    manifest.add(_write_rows(out / "sweep.csv", rows,
                             ("axis", "value", "seeds", "metric", "improvement")))
    manifest.add(_write_rows(out / "sensitivity.csv", ranking, ("rank", "axis", "spread", "points")))
    manifest.extra.update(ranking=[r["axis"] for r in ranking])
    manifest.write(out / "sweep.manifest.json")
    for row in rows:
        print(f"{row['axis']:8s} {row['value']:>10s}  metric {row['metric']:.4f}  "
              f"delta {row['improvement']:+.2f}")
    print("sensitivity ranking (max-min spread per axis):")
    for r in ranking:
        print(f"  {r['rank']}. {r['axis']:8s} {r['spread']:.4f}")
    if "tau_neg" in cfg.sweep.axes:
        top = ranking[0]["axis"]
        print(f"reference claim: tau_neg most sensitive; observed most sensitive: {top} "
              "(reported, not asserted)")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.fault and args.command != "verify":
        print("config error: --fault-inject only applies to verify", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.command == "train-source":
            return cmd_train_source(cfg, out)
        if args.command == "adapt":
            return cmd_adapt(cfg, out)
        if args.command == "eval":
            return cmd_eval(cfg, out)
        if args.command == "verify":
            return cmd_verify(cfg, out, args.fault)
        return cmd_sweep(cfg, out)
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
