# src/backend/experiments.py
"""Multi-seed ablation runs reported as medians.

Every experiment trains its variants once per seed on the same corpus and
records final WER per modality; directional claims are checked on the
medians, never on a single seed.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .config import RunManifest
from .decode_eval import evaluate
from .errors import ConfigError
from .metrics import read_metrics
from .model import Modality
from .synth_data import CorpusSplits
from .training import TrainResult, run_pretrain, train_semi, train_supervised

logger = logging.getLogger(__name__)

SEEDS = (42, 43, 44)


@dataclass
class VariantResult:
    name: str
    wers: Dict[str, List[float]] = field(default_factory=dict)  # key -> one value per seed
    extras: Dict[str, List[float]] = field(default_factory=dict)

    def add(self, key: str, value: float, extra: bool = False) -> None:
        (self.extras if extra else self.wers).setdefault(key, []).append(float(value))

    def median(self, key: str) -> float:
        values = self.wers.get(key) or self.extras.get(key)
        if not values:
            raise KeyError(f"variant {self.name} has no values for {key}")
        return float(np.median(values))


@dataclass
class ExperimentReport:
    name: str
    seeds: List[int]
    variants: Dict[str, VariantResult] = field(default_factory=dict)

    def variant(self, name: str) -> VariantResult:
        return self.variants.setdefault(name, VariantResult(name))

    def medians(self) -> Dict[str, Dict[str, float]]:
        out: Dict[str, Dict[str, float]] = {}
        for name, v in self.variants.items():
            keys = list(v.wers) + list(v.extras)
            out[name] = {k: v.median(k) for k in keys}
        return out

    def write(self, out_dir: str) -> str:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, f"{self.name}_summary.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"experiment": self.name, "seeds": self.seeds,
                       "variants": {k: asdict(v) for k, v in self.variants.items()},
                       "medians": self.medians()}, f, indent=2, sort_keys=True)
        return path


def _seeded(base: RunManifest, seed: int, out_dir: str, **changes) -> RunManifest:
    return replace(base, optim=replace(base.optim, seed=seed), out_dir=out_dir, **changes)


def _record_wers(variant: VariantResult, result: TrainResult) -> None:
    for modality, value in result.final_wer.items():
        variant.add(modality, value)


def epoch_series(metrics_path: str, metric: str) -> List[float]:
    """Per-epoch values of ``metric`` (step-level rows excluded), in epoch order."""
    rows = [r for r in read_metrics(metrics_path) if r["metric"] == metric and r.get("step") is None]
    return [r["value"] for r in sorted(rows, key=lambda r: r["epoch"])]


def sharing_experiment(base: RunManifest, corpus: CorpusSplits, out_root: str,
                       seeds: Sequence[int] = SEEDS) -> ExperimentReport:
    """One shared model for V/A/AV versus three separately trained models."""
    report = ExperimentReport("sharing", list(seeds))
    for seed in seeds:
        for name, shared in (("shared", True), ("unshared", False)):
            out = os.path.join(out_root, "sharing", name, f"seed{seed}")
            result = train_supervised(_seeded(base, seed, out, stage="supervised", shared=shared), corpus)
            _record_wers(report.variant(name), result)
    return report


def lambda_v_experiment(base: RunManifest, corpus: CorpusSplits, out_root: str,
                        seeds: Sequence[int] = SEEDS,
                        values: Sequence[float] = (0.1, 0.3, 0.5)) -> ExperimentReport:
    report = ExperimentReport("lambda_v", list(seeds))
    for seed in seeds:
        for lam in values:
            name = f"lambda_v={lam:g}"
            out = os.path.join(out_root, "lambda_v", name, f"seed{seed}")
            m = _seeded(base, seed, out, stage="supervised", loss=replace(base.loss, lambda_v=lam))
            _record_wers(report.variant(name), train_supervised(m, corpus))
    return report


def tau_experiment(base: RunManifest, corpus: CorpusSplits, out_root: str,
                   seeds: Sequence[int] = SEEDS,
                   values: Sequence[float] = (0.0, 0.8, 1.0)) -> ExperimentReport:
    """Semi-supervised runs per threshold; also records first/last epoch kept fractions."""
    report = ExperimentReport("tau", list(seeds))
    for seed in seeds:
        for tau in values:
            name = f"tau={tau:g}"
            out = os.path.join(out_root, "tau", name, f"seed{seed}")
            m = _seeded(base, seed, out, stage="semi", loss=replace(base.loss, tau=tau))
            result = train_semi(m, corpus=corpus)
            variant = report.variant(name)
            _record_wers(variant, result)
            kept = epoch_series(result.metrics_path, "kept_fraction_attn")
            if kept:
                variant.add("kept_first", kept[0], extra=True)
                variant.add("kept_last", kept[-1], extra=True)
    return report


def stages_experiment(base: RunManifest, corpus: CorpusSplits, out_root: str,
                      seeds: Sequence[int] = SEEDS) -> ExperimentReport:
    """Labelled-only supervised, semi-supervised, and pre-training followed by semi."""
    report = ExperimentReport("stages", list(seeds))
    for seed in seeds:
        root = os.path.join(out_root, "stages")
        sup = train_supervised(_seeded(base, seed, os.path.join(root, "supervised", f"seed{seed}"),
                                       stage="supervised"), corpus)
        _record_wers(report.variant("supervised"), sup)

        semi = train_semi(_seeded(base, seed, os.path.join(root, "semi", f"seed{seed}"), stage="semi"),
                          corpus=corpus)
        _record_wers(report.variant("semi"), semi)

        pre = run_pretrain(_seeded(base, seed, os.path.join(root, "pretrain", f"seed{seed}"),
                                   stage="pretrain"), corpus)
        tuned = train_semi(_seeded(base, seed, os.path.join(root, "pretrain_semi", f"seed{seed}"), stage="semi"),
                           init=pre.checkpoints["pretrain"], corpus=corpus)
        _record_wers(report.variant("pretrain+semi"), tuned)
    return report


def targets_experiment(base: RunManifest, corpus: CorpusSplits, out_root: str,
                       seeds: Sequence[int] = SEEDS,
                       targets: Sequence[str] = ("a", "av")) -> ExperimentReport:
    """Pre-training target modality, each followed by the same semi-supervised fine-tuning."""
    report = ExperimentReport("targets", list(seeds))
    for seed in seeds:
        for target in targets:
            name = f"targets={target}"
            root = os.path.join(out_root, "targets", name, f"seed{seed}")
            pre_manifest = _seeded(base, seed, os.path.join(root, "pretrain"), stage="pretrain",
                                   pretrain=replace(base.pretrain, target_modality=target))
            pre = run_pretrain(pre_manifest, corpus)
            tuned = train_semi(_seeded(base, seed, os.path.join(root, "semi"), stage="semi"),
                               init=pre.checkpoints["pretrain"], corpus=corpus)
            _record_wers(report.variant(name), tuned)
    return report


def noise_experiment(base: RunManifest, corpus: CorpusSplits, out_root: str,
                     seeds: Sequence[int] = SEEDS, snr_db: float = -5.0) -> ExperimentReport:
    """A and AV WER of one trained model on clean and on noise-corrupted audio."""
    report = ExperimentReport("noise", list(seeds))
    if not corpus.eval:
        raise ConfigError("noise experiment needs an eval split")
    tok = corpus.config.tokenizer
    for seed in seeds:
        out = os.path.join(out_root, "noise", f"seed{seed}")
        result = train_semi(_seeded(base, seed, out, stage="semi"), corpus=corpus, evaluate_final=False)
        model = result.models["final"]
        for label, snr in (("clean", None), (f"snr={snr_db:g}", snr_db)):
            for m in (Modality.A, Modality.AV):
                r = evaluate(model, corpus.eval, m, base.decode, tok, snr_db=snr, seed=seed,
                             device=next(model.parameters()).device.type,
                             dtype=next(model.parameters()).dtype)
                report.variant(label).add(m.value, r.wer)
    return report


EXPERIMENTS: Dict[str, Callable[..., ExperimentReport]] = {
    "sharing": sharing_experiment,
    "lambda_v": lambda_v_experiment,
    "tau": tau_experiment,
    "stages": stages_experiment,
    "targets": targets_experiment,
    "noise": noise_experiment,
}


def run_experiment(name: str, base: RunManifest, corpus: CorpusSplits, out_root: str,
                   seeds: Optional[Sequence[int]] = None) -> ExperimentReport:
    if name not in EXPERIMENTS:
        raise ConfigError(f"Unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}")
    report = EXPERIMENTS[name](base, corpus, out_root, seeds=tuple(seeds or SEEDS))
    path = report.write(out_root)
    logger.info("Experiment %s finished; summary in %s", name, path)
    return report
