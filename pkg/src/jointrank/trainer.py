"""Warm start, joint retriever/re-ranker training, and the ablation modes."""

from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .augmentation import TrainingInstance
from .corpus import Corpus, Qrels, Query, _atomic_write
from .errors import TrainingError, UsageError, ValidationError
from .evaluation import ExactIndex, mrr_at_k, recall_at_k, rerank_run, retrieve
from .losses import LossReport, final_loss, kl_loss, listwise_ce_batch, pointwise_batch, pointwise_final_loss
from .models import (
    CrossEncoderForward,
    CrossEncoderParams,
    DualEncoderForward,
    DualEncoderParams,
    ListBatch,
)
from .numerics import AdamState, SeededRng, adam_step, clip_by_global_norm

log = logging.getLogger(__name__)

DYNAMIC = "dynamic_listwise"
STATIC = "static_distillation"
POINTWISE = "pointwise_reranker"
MODES = (DYNAMIC, STATIC, POINTWISE)

# Full-scale settings with pretrained backbones, kept for reference; not runnable on a desk.
FULL_SCALE_REFERENCE = {"batch_size": 96, "learning_rate": 1e-5, "epochs": 3, "n_neg_msmarco": 127, "n_neg_nq": 31}


@dataclass(frozen=True)
class TrainConfig:
    mode: str = DYNAMIC
    use_denoised: bool = True
    use_in_batch_negatives: bool = False
    epochs: int = 3
    batch_size: int = 8
    learning_rate: float = 1e-3
    n_neg: int = 7
    seed: int = 7
    warm_epochs: int = 4
    warm_learning_rate: float = 3e-3
    warm_calibrate: bool = True
    clip_norm: float = 5.0
    emb_dim: int = 128
    hidden_dim: int = 128
    out_dim: int = 128
    eval_depth: int = 50

    def validate(self) -> None:
        if self.mode not in MODES:
            raise UsageError(f"mode must be one of {', '.join(MODES)}; got {self.mode!r}")
        for name in ("epochs", "warm_epochs"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be non-negative")
        for name in ("batch_size", "n_neg", "emb_dim", "hidden_dim", "out_dim", "eval_depth"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be positive")
        for name in ("learning_rate", "warm_learning_rate", "clip_norm"):
            if not getattr(self, name) > 0:
                raise UsageError(f"{name} must be positive")
        if self.mode == POINTWISE and self.use_in_batch_negatives:
            # in-batch positives of other queries carry no pointwise label semantics we can trust
            raise UsageError("use_in_batch_negatives is only defined for the listwise modes")


@dataclass
class Models:
    retriever: DualEncoderParams
    reranker: CrossEncoderParams

    def copy(self) -> "Models":
        return Models(self.retriever.copy(), self.reranker.copy())


def init_models(vocab_size: int, config: TrainConfig) -> Models:
    rng = SeededRng(config.seed).child("init")
    return Models(
        DualEncoderParams.initialize(vocab_size, config.emb_dim, config.hidden_dim, config.out_dim,
                                     rng.child("de")),
        CrossEncoderParams.initialize(vocab_size, config.emb_dim, config.hidden_dim, 1, rng.child("ce")),
    )


class TokenLookup:
    """Resolves query / passage ids to token sequences."""

    def __init__(self, corpus: Corpus, queries: Sequence[Query]) -> None:
        self.corpus = corpus
        self.queries = {q.id: q for q in queries}

    def query(self, qid: str):
        try:
            return self.queries[qid].tokens
        except KeyError:
            raise ValidationError(f"unknown query id {qid!r}") from None

    def passage(self, pid: str):
        return self.corpus.get(pid).tokens


# --------------------------------------------------------------------------
# warm start


def _random_negative_lists(queries, qrels, corpus, n_neg, rng) -> list[tuple[str, list[str]]]:
    ids = corpus.ids
    out = []
    for q in queries:
        positives = qrels[q.id]
        ordered = sorted(positives)
        pos = ordered[int(rng.integers(0, len(ordered)))]
        negs: list[str] = []
        while len(negs) < n_neg:
            pid = ids[int(rng.integers(0, len(ids)))]
            if pid not in positives and pid not in negs:
                negs.append(pid)
        out.append((q.id, [pos] + negs))
    return out


def warm_start(
    corpus: Corpus,
    queries: Sequence[Query],
    qrels: Qrels,
    config: TrainConfig,
    models: Models | None = None,
) -> Models:
    """Supervised pre-training of both scorers on positive + random-negative lists.

    The retriever minimises listwise softmax cross-entropy over its dot-product
    scores, the re-ranker the same loss over its own scores. Listwise loss is
    blind to a common shift of a list's scores, so with ``warm_calibrate`` the
    re-ranker also gets a per-candidate logistic term; that pins its score
    scale and makes logistic confidences usable for denoising.
    """
    config.validate()
    for q in queries:
        if not qrels.get(q.id):
            raise ValidationError(f"warm start: query {q.id!r} has no positive passage")
    if not queries:
        raise ValidationError("warm start needs at least one training query")
    if len(corpus) <= config.n_neg:
        raise ValidationError("corpus too small to draw random negatives")
    models = (models or init_models(corpus.vocab_size, config)).copy()
    if config.warm_epochs == 0:
        return models
    lookup = TokenLookup(corpus, queries)
    rng = SeededRng(config.seed).child("warm")
    de_state = AdamState.fresh(len(models.retriever), config.warm_learning_rate)
    ce_state = AdamState.fresh(len(models.reranker), config.warm_learning_rate)
    for epoch in range(config.warm_epochs):
        erng = rng.child(epoch)
        lists = _random_negative_lists(queries, qrels, corpus, config.n_neg, erng.child("neg"))
        order = erng.child("order").permutation(len(lists))
        for start in range(0, len(order), config.batch_size):
            chunk = [lists[i] for i in order[start:start + config.batch_size]]
            batch = ListBatch([lookup.query(q) for q, _ in chunk],
                              [[lookup.passage(p) for p in ids] for _, ids in chunk])
            labels = [np.eye(len(ids), dtype=np.int64)[0] for _, ids in chunk]
            de_fwd = DualEncoderForward(models.retriever, batch)
            ce_fwd = CrossEncoderForward(models.reranker, batch)
            _, g_de = listwise_ce_batch(de_fwd.scores, labels)
            _, g_ce = listwise_ce_batch(ce_fwd.scores, labels)
            if config.warm_calibrate:
                _, g_pt = pointwise_batch(ce_fwd.scores, labels)
                g_ce = [a + b for a, b in zip(g_ce, g_pt)]
            gd = de_fwd.backward(np.concatenate(g_de))
            gc = ce_fwd.backward(np.concatenate(g_ce))
            (gd,), _ = clip_by_global_norm([gd], config.clip_norm)
            (gc,), _ = clip_by_global_norm([gc], config.clip_norm)
            new_de, de_state = adam_step(models.retriever.flat, gd, de_state)
            new_ce, ce_state = adam_step(models.reranker.flat, gc, ce_state)
            models = Models(models.retriever.with_flat(new_de), models.reranker.with_flat(new_ce))
    return models


# --------------------------------------------------------------------------
# joint training


@dataclass
class OptimizerStates:
    retriever: AdamState
    reranker: AdamState

    @classmethod
    def fresh(cls, models: Models, learning_rate: float) -> "OptimizerStates":
        return cls(AdamState.fresh(len(models.retriever), learning_rate),
                   AdamState.fresh(len(models.reranker), learning_rate))


def loss_view(batch: Sequence[TrainingInstance], use_in_batch_negatives: bool) -> list[list[str]]:
    """Candidate id lists as seen by the loss.

    With in-batch negatives, each list is extended by the positives of the
    other instances in the batch (skipping ids it already holds). The
    instances themselves are never modified.
    """
    lists = [list(inst.candidate_ids) for inst in batch]
    if not use_in_batch_negatives:
        return lists
    out = []
    for i, ids in enumerate(lists):
        seen = set(ids)
        extended = list(ids)
        for j, other in enumerate(batch):
            pid = other.positive_id
            if j != i and pid not in seen:
                extended.append(pid)
                seen.add(pid)
        out.append(extended)
    return out


def batch_loss(
    batch: Sequence[TrainingInstance],
    models: Models,
    lookup: TokenLookup,
    mode: str = DYNAMIC,
    use_in_batch_negatives: bool = False,
) -> tuple[LossReport, DualEncoderForward, CrossEncoderForward]:
    """Forward both scorers over the batch and evaluate the mode's objective."""
    if not batch:
        raise UsageError("empty batch")
    id_lists = loss_view(batch, use_in_batch_negatives)
    lb = ListBatch([lookup.query(inst.query_id) for inst in batch],
                   [[lookup.passage(pid) for pid in ids] for ids in id_lists])
    labels = [np.eye(len(ids), dtype=np.int64)[0] for ids in id_lists]
    de_fwd = DualEncoderForward(models.retriever, lb)
    ce_fwd = CrossEncoderForward(models.reranker, lb)
    objective = pointwise_final_loss if mode == POINTWISE else final_loss
    report = objective(de_fwd.scores, ce_fwd.scores, labels)
    return report, de_fwd, ce_fwd


def loss_and_gradients(
    batch: Sequence[TrainingInstance],
    models: Models,
    lookup: TokenLookup,
    mode: str = DYNAMIC,
    use_in_batch_negatives: bool = False,
) -> tuple[LossReport, np.ndarray, np.ndarray]:
    """The mode's objective with unclipped gradients for the retriever and re-ranker parameters."""
    report, de_fwd, ce_fwd = batch_loss(batch, models, lookup, mode, use_in_batch_negatives)
    return report, de_fwd.backward(report.grad_wrt_de_scores), ce_fwd.backward(report.grad_wrt_ce_scores)


@dataclass
class StepResult:
    models: Models
    states: OptimizerStates
    report: LossReport


def joint_train_step(
    batch: Sequence[TrainingInstance],
    models: Models,
    states: OptimizerStates,
    lookup: TokenLookup,
    mode: str = DYNAMIC,
    use_in_batch_negatives: bool = False,
    clip_norm: float = 5.0,
) -> StepResult:
    """One optimisation step.

    dynamic: retriever gets the KL gradient, re-ranker gets KL + supervised.
    static: same forward pass; re-ranker params and optimizer state untouched.
    pointwise: re-ranker gets KL + per-candidate logistic loss.
    """
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}")
    if mode == POINTWISE and use_in_batch_negatives:
        raise UsageError("use_in_batch_negatives is only defined for the listwise modes")
    report, de_fwd, ce_fwd = batch_loss(batch, models, lookup, mode, use_in_batch_negatives)
    gd = de_fwd.backward(report.grad_wrt_de_scores)
    (gd,), _ = clip_by_global_norm([gd], clip_norm)
    new_de, de_state = adam_step(models.retriever.flat, gd, states.retriever)
    if mode == STATIC:
        # the re-ranker backward pass is skipped entirely
        return StepResult(Models(models.retriever.with_flat(new_de), models.reranker),
                          OptimizerStates(de_state, states.reranker), report)
    gc = ce_fwd.backward(report.grad_wrt_ce_scores)
    (gc,), _ = clip_by_global_norm([gc], clip_norm)
    new_ce, ce_state = adam_step(models.reranker.flat, gc, states.reranker)
    return StepResult(Models(models.retriever.with_flat(new_de), models.reranker.with_flat(new_ce)),
                      OptimizerStates(de_state, ce_state), report)


def mean_list_kl(instances: Sequence[TrainingInstance], models: Models, lookup: TokenLookup,
                 chunk: int = 64) -> float:
    """Average KL(retriever || re-ranker) over the instance lists."""
    if not instances:
        raise UsageError("no instances")
    total = 0.0
    for start in range(0, len(instances), chunk):
        part = instances[start:start + chunk]
        lb = ListBatch([lookup.query(i.query_id) for i in part],
                       [[lookup.passage(p) for p in i.candidate_ids] for i in part])
        de = DualEncoderForward(models.retriever, lb).scores
        ce = CrossEncoderForward(models.reranker, lb).scores
        total += sum(kl_loss(a, b)[0] for a, b in zip(de, ce))
    return total / len(instances)


@dataclass
class StepRecord:
    step: int
    l_kl: float
    l_sup: float
    l_final: float


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[dict[str, float]] = field(default_factory=list)
    initial_kl: float = math.nan
    final_kl: float = math.nan

    def write(self, directory: Path) -> list[Path]:
        d = Path(directory)
        step_path = d / "train_log.tsv"
        lines = ["step\tl_kl\tl_sup\tl_final\n"]
        lines += [f"{r.step}\t{r.l_kl!r}\t{r.l_sup!r}\t{r.l_final!r}\n" for r in self.steps]
        _atomic_write(step_path, "".join(lines))
        metric_path = d / "epoch_metrics.tsv"
        lines = ["epoch\tmetric\tvalue\n"]
        for e in self.epochs:
            for k, v in e.items():
                if k != "epoch":
                    lines.append(f"{int(e['epoch'])}\t{k}\t{v!r}\n")
        lines.append(f"-\tinitial_mean_kl\t{self.initial_kl!r}\n")
        lines.append(f"-\tfinal_mean_kl\t{self.final_kl!r}\n")
        _atomic_write(metric_path, "".join(lines))
        return [step_path, metric_path]


def evaluate_models(models: Models, corpus: Corpus, queries: Sequence[Query], qrels: Qrels,
                    depth: int = 50, index: ExactIndex | None = None) -> dict[str, float]:
    """Retriever MRR@10 / Recall@{5,10,50} over the full corpus plus reranked MRR@10."""
    index = index or ExactIndex.build(models.retriever, corpus)
    run = retrieve(models.retriever, index, queries, depth)
    qr = {q.id: qrels[q.id] for q in queries}
    out = {"retriever_MRR@10": mrr_at_k(run, qr, 10)}
    for k in (5, 10, 50):
        out[f"retriever_Recall@{k}"] = recall_at_k(run, qr, min(k, depth))
    reranked = rerank_run(models.reranker, queries, run, corpus)
    out["reranked_MRR@10"] = mrr_at_k(reranked, qr, 10)
    return out


@contextmanager
def _diverged(where: str):
    """Turn non-finite scores or losses into a TrainingError that says where it happened."""
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            yield
        except ValidationError as exc:
            if "non-finite" not in str(exc):
                raise
            raise TrainingError(f"non-finite values at {where}: {exc}") from None


@dataclass
class TrainResult:
    models: Models
    log: TrainLog
    states: OptimizerStates


def train(
    corpus: Corpus,
    queries: Sequence[Query],
    instances: Sequence[TrainingInstance],
    config: TrainConfig,
    start: Models,
    dev_queries: Sequence[Query] = (),
    qrels: Qrels | None = None,
) -> TrainResult:
    """Run ``epochs`` passes of joint_train_step over seeded shuffles of the instances."""
    config.validate()
    if not config.use_denoised:
        instances = [i for i in instances if not i.is_denoised]
    if not instances:
        raise UsageError("no training instances")
    lookup = TokenLookup(corpus, queries)
    models = start.copy()
    states = OptimizerStates.fresh(models, config.learning_rate)
    log_ = TrainLog()
    with _diverged("the initial KL measurement"):
        log_.initial_kl = mean_list_kl(instances, models, lookup)
    rng = SeededRng(config.seed).child("train")
    step = 0
    for epoch in range(config.epochs):
        order = rng.child(epoch).permutation(len(instances))
        for s in range(0, len(order), config.batch_size):
            batch = [instances[i] for i in order[s:s + config.batch_size]]
            with _diverged(f"step {step} (epoch {epoch})"):
                res = joint_train_step(batch, models, states, lookup, config.mode,
                                       config.use_in_batch_negatives, config.clip_norm)
            r = res.report
            if not all(math.isfinite(v) for v in (r.l_kl, r.l_sup, r.l_final)):
                raise TrainingError(f"non-finite loss at step {step} (epoch {epoch}): "
                                    f"l_kl={r.l_kl}, l_sup={r.l_sup}")
            models, states = res.models, res.states
            log_.steps.append(StepRecord(step, r.l_kl, r.l_sup, r.l_final))
            step += 1
        if dev_queries and qrels is not None:
            metrics = evaluate_models(models, corpus, dev_queries, qrels, config.eval_depth)
            log_.epochs.append({"epoch": epoch, **metrics})
    with _diverged("the final KL measurement"):
        log_.final_kl = mean_list_kl(instances, models, lookup)
    return TrainResult(models, log_, states)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)


def with_overrides(config: TrainConfig, **kwargs) -> TrainConfig:
    return replace(config, **kwargs)
