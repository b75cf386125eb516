"""Hybrid data augmentation: undenoised and denoised listwise training instances."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import Corpus, Qrels, Query, _atomic_write, _read_lines
from .errors import ParseError, UsageError, ValidationError
from .evaluation import ExactIndex, retrieve
from .models import CrossEncoderForward, CrossEncoderParams, DualEncoderParams
from .numerics import SeededRng

log = logging.getLogger(__name__)

UNDENOISED = "undenoised"
DENOISED = "denoised"
GROUND_TRUTH = "ground_truth"


@dataclass(frozen=True)
class CandidatePool:
    query_id: str
    entries: tuple[tuple[str, float], ...]

    @property
    def ids(self) -> list[str]:
        return [pid for pid, _ in self.entries]


@dataclass(frozen=True)
class TrainingInstance:
    """One positive (always at position 0) followed by its negatives."""

    query_id: str
    candidate_ids: tuple[str, ...]
    negative_provenance: tuple[str, ...]
    positive_provenance: str = GROUND_TRUTH

    def __post_init__(self) -> None:
        if len(self.candidate_ids) < 2:
            raise ValidationError("an instance needs a positive and at least one negative")
        if len(set(self.candidate_ids)) != len(self.candidate_ids):
            raise ValidationError(f"instance for {self.query_id!r} repeats a passage id")
        if len(self.negative_provenance) != len(self.candidate_ids) - 1:
            raise ValidationError("one provenance tag per negative is required")
        for tag in self.negative_provenance:
            if tag not in (UNDENOISED, DENOISED):
                raise ValidationError(f"bad negative provenance {tag!r}")
        if self.positive_provenance not in (GROUND_TRUTH, DENOISED):
            raise ValidationError(f"bad positive provenance {self.positive_provenance!r}")

    @property
    def positive_id(self) -> str:
        return self.candidate_ids[0]

    @property
    def negative_ids(self) -> tuple[str, ...]:
        return self.candidate_ids[1:]

    @property
    def labels(self) -> np.ndarray:
        y = np.zeros(len(self.candidate_ids), dtype=np.int64)
        y[0] = 1
        return y

    @property
    def size(self) -> int:
        return len(self.candidate_ids)

    @property
    def is_denoised(self) -> bool:
        return self.positive_provenance == DENOISED or DENOISED in self.negative_provenance


@dataclass(frozen=True)
class AugmentConfig:
    n: int = 100             # retrieval depth for candidate pools
    n_neg: int = 7
    denoised_fraction: float = 0.5
    t_pos: float = 0.9
    t_neg: float = 0.1

    def validate(self) -> None:
        if self.n < 1:
            raise UsageError("n must be at least 1")
        if self.n_neg < 1:
            raise UsageError("n_neg must be at least 1")
        if not 0.0 <= self.denoised_fraction <= 1.0:
            raise UsageError("denoised_fraction must lie in [0, 1]")
        check_thresholds(self.t_pos, self.t_neg)


def check_thresholds(t_pos: float, t_neg: float) -> None:
    if not 0.0 <= t_neg <= t_pos <= 1.0:
        raise UsageError(f"thresholds must satisfy 0 <= t_neg <= t_pos <= 1, got t_neg={t_neg}, t_pos={t_pos}")


def retrieve_candidates(retriever: DualEncoderParams, index: ExactIndex, query: Query, n: int) -> CandidatePool:
    if len(index) == 0:
        raise UsageError("cannot retrieve from an empty corpus")
    if n < 1:
        raise UsageError("n must be at least 1")
    run = retrieve(retriever, index, [query], min(n, len(index)))
    return CandidatePool(query.id, tuple((e.passage_id, e.score) for e in run[query.id]))


def _ground_truth_positive(qrels: Qrels, query_id: str) -> str:
    """The labeled positive with the smallest id."""
    positives = qrels.get(query_id)
    if not positives:
        raise ValidationError(f"query {query_id!r} has no positive passage")
    return min(positives)


def sample_undenoised(pool: CandidatePool, qrels: Qrels, n_neg: int, rng: SeededRng) -> TrainingInstance | None:
    """Ground-truth positive plus ``n_neg`` uniformly sampled non-positive pool entries.

    Returns None (and logs) when the pool holds fewer than ``n_neg`` eligible negatives.
    """
    positive = _ground_truth_positive(qrels, pool.query_id)
    positives = qrels[pool.query_id]
    eligible = [pid for pid in pool.ids if pid not in positives]
    if len(eligible) < n_neg:
        log.warning("query %s: only %d eligible negatives for n_neg=%d; skipped",
                    pool.query_id, len(eligible), n_neg)
        return None
    picks = rng.choice(len(eligible), size=n_neg, replace=False)
    negatives = tuple(eligible[i] for i in picks)
    return TrainingInstance(pool.query_id, (positive,) + negatives, (UNDENOISED,) * n_neg, GROUND_TRUTH)


def confidences(reranker: CrossEncoderParams, query: Query, passage_ids: Sequence[str], corpus: Corpus) -> np.ndarray:
    """Logistic of the cross-encoder score for each passage."""
    if not passage_ids:
        return np.zeros(0)
    fwd = CrossEncoderForward.from_pairs(
        reranker, [query.tokens] * len(passage_ids), [corpus.get(pid).tokens for pid in passage_ids]
    )
    s = fwd.flat_scores
    return 0.5 * (1.0 + np.tanh(0.5 * s))


def denoise(
    pool: CandidatePool,
    reranker: CrossEncoderParams,
    thresholds: tuple[float, float],
    qrels: Qrels,
    query: Query,
    corpus: Corpus,
) -> tuple[list[str], list[str]]:
    """Split a pool by re-ranker confidence into (denoised positives, denoised negatives).

    Denoised positives exclude ground-truth positives; the ambiguous band
    [t_neg, t_pos] is dropped. Both lists keep pool order.
    """
    t_pos, t_neg = thresholds
    check_thresholds(t_pos, t_neg)
    conf = confidences(reranker, query, pool.ids, corpus)
    truth = qrels.get(pool.query_id, frozenset())
    positives = [pid for pid, c in zip(pool.ids, conf) if c > t_pos and pid not in truth]
    negatives = [pid for pid, c in zip(pool.ids, conf) if c < t_neg and pid not in truth]
    return positives, negatives


@dataclass
class AugmentResult:
    instances: list[TrainingInstance]
    skipped: int = 0
    counts: dict[str, int] = field(default_factory=dict)


def build_instances(
    corpus: Corpus,
    queries: Sequence[Query],
    qrels: Qrels,
    retriever: DualEncoderParams,
    reranker: CrossEncoderParams,
    config: AugmentConfig,
    rng: SeededRng,
) -> AugmentResult:
    """One instance per query: denoised with probability ``denoised_fraction``, else undenoised.

    Each query draws from its own named RNG stream, so results do not depend
    on processing order.
    """
    config.validate()
    index = ExactIndex.build(retriever, corpus)
    instances: list[TrainingInstance] = []
    skipped = 0
    for q in queries:
        qrng = rng.child(q.id)
        want_denoised = qrng.random() < config.denoised_fraction
        pool = retrieve_candidates(retriever, index, q, config.n)
        if want_denoised:
            inst = _denoised_instance(pool, q, corpus, qrels, reranker, config, qrng)
        else:
            inst = sample_undenoised(pool, qrels, config.n_neg, qrng)
        if inst is None:
            skipped += 1
            continue
        instances.append(inst)
    if skipped:
        log.info("augmentation skipped %d of %d queries", skipped, len(queries))
    counts = {
        DENOISED: sum(i.is_denoised for i in instances),
        UNDENOISED: sum(not i.is_denoised for i in instances),
        "skipped": skipped,
    }
    return AugmentResult(instances, skipped, counts)


def _denoised_instance(pool, query, corpus, qrels, reranker, config, rng) -> TrainingInstance | None:
    den_pos, den_neg = denoise(pool, reranker, (config.t_pos, config.t_neg), qrels, query, corpus)
    if len(den_neg) < config.n_neg:
        return None
    if den_pos:
        positive, pos_tag = den_pos[int(rng.integers(0, len(den_pos)))], DENOISED
    else:
        positive, pos_tag = _ground_truth_positive(qrels, query.id), GROUND_TRUTH
    picks = rng.choice(len(den_neg), size=config.n_neg, replace=False)
    negatives = tuple(den_neg[i] for i in picks)
    return TrainingInstance(query.id, (positive,) + negatives, (DENOISED,) * config.n_neg, pos_tag)


# --------------------------------------------------------------------------
# instance files: query_id, positive_id, comma-separated negatives, provenance flags


def _flags(inst: TrainingInstance) -> str:
    pos = "P" if inst.positive_provenance == GROUND_TRUTH else "p"
    neg = "".join("u" if t == UNDENOISED else "d" for t in inst.negative_provenance)
    return f"{pos}:{neg}"


def write_instances(path: Path, instances: Sequence[TrainingInstance]) -> None:
    """``P``/``p`` marks a ground-truth/denoised positive, ``u``/``d`` each negative's origin."""
    lines = [
        f"{i.query_id}\t{i.positive_id}\t{','.join(i.negative_ids)}\t{_flags(i)}\n" for i in instances
    ]
    _atomic_write(Path(path), "".join(lines))


def read_instances(path: Path) -> list[TrainingInstance]:
    out = []
    for line_no, line in _read_lines(Path(path)):
        parts = line.split("\t")
        if len(parts) != 4:
            raise ParseError(str(path), line_no, "expected 4 tab-separated fields")
        qid, pos, negs, flags = parts
        negatives = tuple(negs.split(",")) if negs else ()
        try:
            pflag, nflags = flags.split(":")
        except ValueError:
            raise ParseError(str(path), line_no, f"bad provenance flags {flags!r}") from None
        if pflag not in ("P", "p") or len(nflags) != len(negatives) or set(nflags) - {"u", "d"}:
            raise ParseError(str(path), line_no, f"bad provenance flags {flags!r}")
        try:
            inst = TrainingInstance(
                qid,
                (pos,) + negatives,
                tuple(UNDENOISED if c == "u" else DENOISED for c in nflags),
                GROUND_TRUTH if pflag == "P" else DENOISED,
            )
        except ValidationError as exc:
            raise ParseError(str(path), line_no, str(exc)) from None
        out.append(inst)
    return out


def check_instances(instances: Sequence[TrainingInstance], corpus: Corpus, queries: Mapping[str, Query]) -> None:
    for inst in instances:
        if inst.query_id not in queries:
            raise ValidationError(f"instance references unknown query {inst.query_id!r}")
        for pid in inst.candidate_ids:
            if pid not in corpus:
                raise ValidationError(f"instance for {inst.query_id!r} references unknown passage {pid!r}")
