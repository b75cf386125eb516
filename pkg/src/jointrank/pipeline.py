"""End-to-end experiments: warm start, augment, joint training, ablations, sweeps.

Every random draw is derived from ``TrainConfig.seed`` through named
streams, so a run is a pure function of (dataset, configs).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

from .augmentation import AugmentConfig, AugmentResult, build_instances
from .corpus import Dataset
from .errors import UsageError
from .numerics import SeededRng
from .trainer import (
    DYNAMIC,
    POINTWISE,
    STATIC,
    Models,
    TrainConfig,
    TrainResult,
    evaluate_models,
    init_models,
    train,
    warm_start,
)

log = logging.getLogger(__name__)

ABLATION_VARIANTS = ("dynamic", "static", "pointwise", "no-denoised")
METRIC_COLUMNS = ("retriever_MRR@10", "retriever_Recall@5", "retriever_Recall@10",
                  "retriever_Recall@50", "reranked_MRR@10")


def augment_rng(seed: int) -> SeededRng:
    return SeededRng(seed).child("augment")


def augment(data: Dataset, models: Models, config: TrainConfig, aug: AugmentConfig) -> AugmentResult:
    """Hybrid augmentation over the training queries; n_neg comes from the train config."""
    return build_instances(data.corpus, data.train_queries, data.qrels, models.retriever,
                           models.reranker, replace(aug, n_neg=config.n_neg), augment_rng(config.seed))


@dataclass
class Prepared:
    data: Dataset
    config: TrainConfig
    augment_config: AugmentConfig
    init: Models
    warm: Models
    augmented: AugmentResult

    def dev_metrics(self, models: Models) -> dict[str, float]:
        return evaluate_models(models, self.data.corpus, self.data.dev_queries, self.data.qrels,
                               self.config.eval_depth)


def prepare(data: Dataset, config: TrainConfig, aug: AugmentConfig) -> Prepared:
    config.validate()
    init = init_models(data.corpus.vocab_size, config)
    warm = warm_start(data.corpus, data.train_queries, data.qrels, config, init)
    return Prepared(data, config, aug, init, warm, augment(data, warm, config, aug))


def run_mode(prep: Prepared, config: TrainConfig | None = None, evaluate_epochs: bool = True) -> TrainResult:
    """Joint training from the prepared warm start under ``config`` (default: the prepared one)."""
    config = config or prep.config
    d = prep.data
    dev = d.dev_queries if evaluate_epochs else ()
    return train(d.corpus, d.train_queries, prep.augmented.instances, config, prep.warm, dev, d.qrels)


def variant_config(base: TrainConfig, variant: str) -> TrainConfig:
    if variant == "dynamic":
        return replace(base, mode=DYNAMIC)
    if variant == "static":
        return replace(base, mode=STATIC)
    if variant == "pointwise":
        return replace(base, mode=POINTWISE, use_in_batch_negatives=False)
    if variant == "no-denoised":
        return replace(base, mode=DYNAMIC, use_denoised=False)
    raise UsageError(f"unknown ablation variant {variant!r}")


@dataclass
class AblationRow:
    variant: str
    metrics: dict[str, float]
    initial_kl: float
    final_kl: float
    result: TrainResult


def ablation(prep: Prepared, variants: Sequence[str] = ABLATION_VARIANTS) -> list[AblationRow]:
    """Train each variant from the same warm start and instances; report dev metrics."""
    rows = []
    for v in variants:
        res = run_mode(prep, variant_config(prep.config, v), evaluate_epochs=False)
        rows.append(AblationRow(v, prep.dev_metrics(res.models), res.log.initial_kl, res.log.final_kl, res))
    return rows


@dataclass
class SweepRow:
    n_neg: int
    instances: int
    metrics: dict[str, float]


def sweep_negatives(data: Dataset, config: TrainConfig, aug: AugmentConfig, values: Sequence[int]) -> list[SweepRow]:
    """Instances per query: one shared warm start, then augment and train at each n_neg."""
    if not values:
        raise UsageError("sweep needs at least one n_neg value")
    config.validate()
    warm = warm_start(data.corpus, data.train_queries, data.qrels, config)
    rows = []
    for m in values:
        if m < 1:
            raise UsageError(f"n_neg values must be positive, got {m}")
        cfg = replace(config, n_neg=int(m))
        augmented = augment(data, warm, cfg, aug)
        prep = Prepared(data, cfg, aug, warm, warm, augmented)
        if not augmented.instances:
            log.warning("n_neg=%d produced no instances; reporting the warm start", m)
            rows.append(SweepRow(int(m), 0, prep.dev_metrics(warm)))
            continue
        res = run_mode(prep, evaluate_epochs=False)
        rows.append(SweepRow(int(m), len(augmented.instances), prep.dev_metrics(res.models)))
    return rows
