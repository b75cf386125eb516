"""Listwise training objectives and the pointwise ablation loss.

Every function returns the loss value together with its exact gradient with
respect to the raw (unnormalized) scores; chaining into model parameters
happens in :mod:`jointrank.models`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import UsageError, ValidationError
from .numerics import log_softmax, log_sum_exp, stable_softmax


@dataclass
class LossReport:
    l_kl: float
    l_sup: float
    l_final: float
    grad_wrt_de_scores: np.ndarray
    grad_wrt_ce_scores: np.ndarray
    instance_count: int
    # list boundaries into the flat gradient arrays
    offsets: np.ndarray

    def split_de(self) -> list[np.ndarray]:
        return np.split(self.grad_wrt_de_scores, self.offsets[1:-1])

    def split_ce(self) -> list[np.ndarray]:
        return np.split(self.grad_wrt_ce_scores, self.offsets[1:-1])


def normalize_listwise(scores: Sequence[float] | np.ndarray) -> np.ndarray:
    return stable_softmax(scores)


def kl_loss(de_scores, ce_scores) -> tuple[float, np.ndarray, np.ndarray]:
    """KL(retriever || re-ranker) over one candidate list.

    Both score lists receive gradient. With p = softmax(de), q = softmax(ce):
    d/d de_j = p_j (log p_j - log q_j - KL) and d/d ce_j = q_j - p_j.
    """
    a = np.asarray(de_scores, dtype=np.float64)
    b = np.asarray(ce_scores, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise UsageError(f"kl_loss needs equal-length lists, got {a.shape} and {b.shape}")
    log_p = log_softmax(a)
    log_q = log_softmax(b)
    p = np.exp(log_p)
    q = np.exp(log_q)
    r = log_p - log_q
    value = float(np.dot(p, r))
    grad_de = p * (r - value)
    grad_ce = q - p
    return max(value, 0.0), grad_de, grad_ce


def _positive_index(labels: np.ndarray) -> int:
    if not np.all((labels == 0) | (labels == 1)):
        raise ValidationError("labels must be binary")
    pos = np.flatnonzero(labels == 1)
    if pos.size != 1:
        raise ValidationError(f"expected exactly one positive label, found {pos.size}")
    return int(pos[0])


def sup_ce_loss(ce_scores, labels) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy of the single labeled positive against its list."""
    s = np.asarray(ce_scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise UsageError(f"scores and labels differ in length: {s.shape} vs {y.shape}")
    k = _positive_index(y)
    value = log_sum_exp(s) - float(s[k])
    grad = stable_softmax(s)
    grad[k] -= 1.0
    return value, grad


def pointwise_loss(ce_score: float, label: int) -> tuple[float, float]:
    """Logistic binary cross-entropy for a single (score, label) pair."""
    s = float(ce_score)
    if not np.isfinite(s):
        raise ValidationError("pointwise_loss received a non-finite score")
    if label not in (0, 1):
        raise ValidationError(f"label must be 0 or 1, got {label!r}")
    # softplus(s) - y*s, written to avoid overflow for large |s|
    value = max(s, 0.0) + float(np.log1p(np.exp(-abs(s)))) - label * s
    sigma = 1.0 / (1.0 + np.exp(-s)) if s >= 0 else float(np.exp(s) / (1.0 + np.exp(s)))
    return value, float(sigma) - label


def _pointwise_list(scores, labels) -> tuple[float, np.ndarray]:
    """Mean logistic loss over one list and its gradient; vectorized ``pointwise_loss``."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise UsageError("score and label lists differ in length")
    if not np.all(np.isfinite(s)):
        raise ValidationError("pointwise loss received a non-finite score")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be binary")
    values = np.maximum(s, 0.0) + np.log1p(np.exp(-np.abs(s))) - y * s
    e = np.exp(-np.abs(s))
    sigma = np.where(s >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(values.mean()), (sigma - y) / s.size


def _check_batch(de_lists, ce_lists, label_lists):
    if not (len(de_lists) == len(ce_lists) == len(label_lists)):
        raise UsageError("de, ce and label batches must hold the same number of lists")
    if len(de_lists) == 0:
        raise UsageError("empty batch")
    for i, (a, b, y) in enumerate(zip(de_lists, ce_lists, label_lists)):
        if not (len(a) == len(b) == len(y)):
            raise UsageError(f"list {i}: de/ce/label lengths differ")


def final_loss(de_lists, ce_lists, label_lists) -> LossReport:
    """KL plus supervised cross-entropy, each averaged over the N lists in the batch.

    Gradient to the retriever scores comes only from the KL term; the
    re-ranker scores collect both.
    """
    _check_batch(de_lists, ce_lists, label_lists)
    n = len(de_lists)
    kl_total = 0.0
    sup_total = 0.0
    g_de, g_ce = [], []
    for a, b, y in zip(de_lists, ce_lists, label_lists):
        kl, ga, gb_kl = kl_loss(a, b)
        sup, gb_sup = sup_ce_loss(b, y)
        kl_total += kl
        sup_total += sup
        g_de.append(ga / n)
        g_ce.append((gb_kl + gb_sup) / n)
    l_kl = kl_total / n
    l_sup = sup_total / n
    return LossReport(
        l_kl=l_kl,
        l_sup=l_sup,
        l_final=l_kl + l_sup,
        grad_wrt_de_scores=np.concatenate(g_de),
        grad_wrt_ce_scores=np.concatenate(g_ce),
        instance_count=n,
        offsets=_offsets(de_lists),
    )


def pointwise_final_loss(de_lists, ce_lists, label_lists) -> LossReport:
    """Ablation objective: per-candidate logistic loss for the re-ranker.

    The retriever still matches the listwise-normalized re-ranker scores via
    KL. The supervised term is the mean over candidates within a list, then
    averaged over lists.
    """
    _check_batch(de_lists, ce_lists, label_lists)
    n = len(de_lists)
    kl_total = 0.0
    sup_total = 0.0
    g_de, g_ce = [], []
    for a, b, y in zip(de_lists, ce_lists, label_lists):
        kl, ga, gb_kl = kl_loss(a, b)
        sup, gb_sup = _pointwise_list(b, y)
        kl_total += kl
        sup_total += sup
        g_de.append(ga / n)
        g_ce.append((gb_kl + gb_sup) / n)
    l_kl = kl_total / n
    l_sup = sup_total / n
    return LossReport(
        l_kl=l_kl,
        l_sup=l_sup,
        l_final=l_kl + l_sup,
        grad_wrt_de_scores=np.concatenate(g_de),
        grad_wrt_ce_scores=np.concatenate(g_ce),
        instance_count=n,
        offsets=_offsets(de_lists),
    )


def listwise_ce_batch(score_lists, label_lists) -> tuple[float, list[np.ndarray]]:
    """Mean softmax cross-entropy over lists; used for warm-starting either scorer."""
    if len(score_lists) == 0:
        raise UsageError("empty batch")
    n = len(score_lists)
    total = 0.0
    grads = []
    for s, y in zip(score_lists, label_lists):
        v, g = sup_ce_loss(s, y)
        total += v
        grads.append(g / n)
    return total / n, grads


def _offsets(lists) -> np.ndarray:
    return np.concatenate([[0], np.cumsum([len(x) for x in lists])]).astype(np.int64)


def pointwise_batch(score_lists, label_lists) -> tuple[float, list[np.ndarray]]:
    """Per-candidate logistic loss, mean within each list, then mean over lists."""
    if len(score_lists) == 0:
        raise UsageError("empty batch")
    n = len(score_lists)
    total = 0.0
    grads = []
    for s, y in zip(score_lists, label_lists):
        v, g = _pointwise_list(s, y)
        total += v
        grads.append(g / n)
    return total / n, grads
