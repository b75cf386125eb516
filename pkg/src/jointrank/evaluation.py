"""Exact dot-product index, retrieve-then-rerank, and MRR@k / Recall@k.

Ordering rule used everywhere: score descending, then passage id ascending.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Corpus, Qrels, Query, RunEntry, RunFile, write_run, _atomic_write
from .errors import UsageError, ValidationError
from .models import CrossEncoderForward, CrossEncoderParams, DualEncoderParams, encode_many

log = logging.getLogger(__name__)

RECALL_DEPTHS = (5, 10, 50)


@dataclass
class ExactIndex:
    embeddings: np.ndarray
    ids: list[str]
    # position of each row when ids are sorted ascending; used for tie-breaking
    id_rank: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.ids):
            raise UsageError("index needs one embedding row per passage id")
        order = sorted(range(len(self.ids)), key=self.ids.__getitem__)
        self.id_rank = np.empty(len(self.ids), dtype=np.int64)
        self.id_rank[order] = np.arange(len(self.ids))

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def build(cls, params: DualEncoderParams, corpus: Corpus) -> "ExactIndex":
        if len(corpus) == 0:
            raise UsageError("cannot index an empty corpus")
        emb = encode_many(params, [p.tokens for p in corpus.passages], "passage")
        return cls(emb, corpus.ids)


def rank_order(scores: np.ndarray, id_rank: np.ndarray, k: int) -> np.ndarray:
    """Row indices of the k best entries, by score desc then id asc, without a full sort."""
    n = scores.shape[0]
    k = min(k, n)
    if k < n:
        kth = np.partition(-scores, k - 1)[k - 1]
        # keep every row tied with the k-th score so the id tie-break stays exact
        cand = np.flatnonzero(-scores <= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((id_rank[cand], -scores[cand]))
    return cand[order[:k]]


def top_k(index: ExactIndex, query_emb: Sequence[float], k: int) -> list[tuple[str, float]]:
    q = np.asarray(query_emb, dtype=np.float64)
    if k < 1:
        raise UsageError("k must be at least 1")
    if q.shape != (index.embeddings.shape[1],):
        raise UsageError(f"query embedding has shape {q.shape}, index dimension is {index.embeddings.shape[1]}")
    if len(index) == 0:
        raise UsageError("index is empty")
    if k > len(index):
        log.warning("k=%d exceeds index size %d; clamping", k, len(index))
        k = len(index)
    scores = index.embeddings @ q
    rows = rank_order(scores, index.id_rank, k)
    return [(index.ids[r], float(scores[r])) for r in rows]


def retrieve(params: DualEncoderParams, index: ExactIndex, queries: Sequence[Query], k: int) -> RunFile:
    """Top-k for many queries with one matrix product."""
    if k < 1:
        raise UsageError("k must be at least 1")
    if k > len(index):
        log.warning("k=%d exceeds index size %d; clamping", k, len(index))
        k = len(index)
    run: RunFile = {}
    if not queries:
        return run
    Q = encode_many(params, [q.tokens for q in queries], "query")
    S = Q @ index.embeddings.T
    for q, scores in zip(queries, S):
        rows = rank_order(scores, index.id_rank, k)
        run[q.id] = [RunEntry(q.id, index.ids[r], i + 1, float(scores[r])) for i, r in enumerate(rows)]
    return run


def rerank(params: CrossEncoderParams, query: Query, candidate_ids: Sequence[str], corpus: Corpus) -> list[tuple[str, float]]:
    """Permute candidates by cross-encoder score (desc), ties by id (asc)."""
    if not candidate_ids:
        return []
    passages = [corpus.get(pid) for pid in candidate_ids]
    fwd = CrossEncoderForward.from_pairs(params, [query.tokens] * len(passages), [p.tokens for p in passages])
    scores = fwd.flat_scores
    order = sorted(range(len(candidate_ids)), key=lambda i: (-scores[i], candidate_ids[i]))
    return [(candidate_ids[i], float(scores[i])) for i in order]


def rerank_run(params: CrossEncoderParams, queries: Sequence[Query], run: Mapping[str, Sequence[RunEntry]], corpus: Corpus) -> RunFile:
    out: RunFile = {}
    for q in queries:
        ranked = rerank(params, q, [e.passage_id for e in run.get(q.id, [])], corpus)
        out[q.id] = [RunEntry(q.id, pid, i + 1, s) for i, (pid, s) in enumerate(ranked)]
    return out


def _first_positive_rank(entries: Sequence[RunEntry], positives: Iterable[str], k: int) -> int | None:
    pos = set(positives)
    for e in sorted(entries, key=lambda e: e.rank):
        if e.rank > k:
            break
        if e.passage_id in pos:
            return e.rank
    return None


def _check_run(run: Mapping[str, Sequence[RunEntry]], qrels: Qrels, k: int) -> None:
    if k < 1:
        raise UsageError("k must be at least 1")
    if not run:
        raise UsageError("run is empty")
    for qid in run:
        if qid not in qrels:
            raise ValidationError(f"query {qid!r} in run has no qrels")


def mrr_at_k(run: Mapping[str, Sequence[RunEntry]], qrels: Qrels, k: int) -> float:
    _check_run(run, qrels, k)
    total = 0.0
    for qid, entries in run.items():
        r = _first_positive_rank(entries, qrels[qid], k)
        if r is not None:
            total += 1.0 / r
    return total / len(run)


def recall_at_k(run: Mapping[str, Sequence[RunEntry]], qrels: Qrels, k: int) -> float:
    """Fraction of queries with at least one positive in the top k."""
    _check_run(run, qrels, k)
    hits = sum(_first_positive_rank(entries, qrels[qid], k) is not None for qid, entries in run.items())
    return hits / len(run)


def standard_metrics(run: Mapping[str, Sequence[RunEntry]], qrels: Qrels) -> dict[str, float]:
    out = {"MRR@10": mrr_at_k(run, qrels, 10)}
    for k in RECALL_DEPTHS:
        out[f"Recall@{k}"] = recall_at_k(run, qrels, k)
    return out


@dataclass
class PipelineResult:
    retriever: dict[str, float]
    reranked: dict[str, float]
    retriever_run: RunFile
    reranked_run: RunFile


def pipeline_eval(
    retriever: DualEncoderParams,
    reranker: CrossEncoderParams,
    corpus: Corpus,
    queries: Sequence[Query],
    qrels: Qrels,
    k_retrieve: int = 50,
    k_report: int = 50,
    out_dir: Path | None = None,
) -> PipelineResult:
    """Retrieve ``k_retrieve`` per query, rerank them, and score both stages.

    Metrics are MRR@10 and Recall@{5,10,50} with depths capped at ``k_report``.
    """
    if k_report > k_retrieve:
        raise UsageError("k_report must not exceed k_retrieve")
    index = ExactIndex.build(retriever, corpus)
    run = retrieve(retriever, index, queries, k_retrieve)
    reranked = rerank_run(reranker, queries, run, corpus)
    qr = {q.id: qrels[q.id] for q in queries if q.id in qrels}
    result = PipelineResult(
        retriever=_metrics_capped(run, qr, k_report),
        reranked=_metrics_capped(reranked, qr, k_report),
        retriever_run=run,
        reranked_run=reranked,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_run(out_dir / "run.retriever.tsv", run)
        write_run(out_dir / "run.reranked.tsv", reranked)
        write_metrics(out_dir / "metrics.tsv", {"retriever": result.retriever, "reranked": result.reranked})
    return result


def _metrics_capped(run, qrels, k_report: int) -> dict[str, float]:
    out = {"MRR@10": mrr_at_k(run, qrels, min(10, k_report))}
    for k in RECALL_DEPTHS:
        out[f"Recall@{k}"] = recall_at_k(run, qrels, min(k, k_report))
    return out


def write_metrics(path: Path, by_stage: Mapping[str, Mapping[str, float]]) -> None:
    lines = ["metric\tstage\tvalue\n"]
    for stage, metrics in by_stage.items():
        for name, value in metrics.items():
            lines.append(f"{name}\t{stage}\t{value!r}\n")
    _atomic_write(Path(path), "".join(lines))


def dev_mrr(retriever: DualEncoderParams, corpus: Corpus, queries: Sequence[Query], qrels: Qrels, k: int = 10) -> float:
    index = ExactIndex.build(retriever, corpus)
    return mrr_at_k(retrieve(retriever, index, queries, k), qrels, k)
