"""Numeric kernels shared across the package.

Everything here works on float64 arrays. The finite-difference helper is a
test oracle and is never used on a training path.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import UsageError, ValidationError


def _as_scores(scores: Sequence[float] | np.ndarray) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise UsageError(f"expected a 1-d score sequence, got shape {s.shape}")
    if s.size == 0:
        raise UsageError("score sequence is empty")
    if not np.all(np.isfinite(s)):
        raise ValidationError("score sequence contains non-finite values")
    return s


def stable_softmax(scores: Sequence[float] | np.ndarray) -> np.ndarray:
    """Softmax with max-subtraction, so large logits cannot overflow."""
    s = _as_scores(scores)
    e = np.exp(s - s.max())
    return e / e.sum()


def _lse(s: np.ndarray) -> float:
    m = float(s.max())
    if s.size == 1:
        return m
    return m + float(np.log(np.exp(s - m).sum()))


def log_sum_exp(scores: Sequence[float] | np.ndarray) -> float:
    return _lse(_as_scores(scores))


def log_softmax(scores: Sequence[float] | np.ndarray) -> np.ndarray:
    s = _as_scores(scores)
    return s - _lse(s)


@dataclass
class AdamState:
    """Moments and hyperparameters for one flat parameter vector."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, size: int, learning_rate: float = 1e-3, **kwargs) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0, learning_rate, **kwargs)

    def copy(self) -> "AdamState":
        return AdamState(
            self.first_moment.copy(),
            self.second_moment.copy(),
            self.step_count,
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.epsilon,
        )


def adam_step(
    params: np.ndarray, grads: np.ndarray, state: AdamState
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape or state.first_moment.shape != params.shape or (
        state.second_moment.shape != params.shape
    ):
        raise UsageError(
            f"adam_step shape mismatch: params {params.shape}, grads {grads.shape}, "
            f"moments {state.first_moment.shape}/{state.second_moment.shape}"
        )
    for name in ("learning_rate", "beta1", "beta2", "epsilon"):
        if not getattr(state, name) > 0:
            raise UsageError(f"adam hyperparameter {name} must be positive")

    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamState(m, v, t, state.learning_rate, state.beta1, state.beta2, state.epsilon)
    return new_params, new_state


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale all gradients jointly so their concatenated L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.dot(g, g)) for g in grads)))
    if norm <= max_norm or norm == 0.0:
        return [g for g in grads], norm
    scale = max_norm / norm
    return [g * scale for g in grads], norm


@dataclass
class SeededRng:
    """Counter-based generator (Philox) keyed by a 64-bit seed.

    ``child(key)`` derives an independent stream without consuming state of the
    parent, so components can be seeded by name and stay stable when other
    components change how many numbers they draw.
    """

    seed: int
    key: tuple[int, ...] = ()
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise ValidationError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, name: str | int) -> "SeededRng":
        if isinstance(name, str):
            # stable across processes, unlike hash()
            digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
            tag = int.from_bytes(digest, "little") >> 1
        else:
            tag = int(name)
        return SeededRng(self.seed, self.key + (tag,))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace: bool = True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def finite_diff_grad(
    f: Callable[[np.ndarray], float], point: Sequence[float] | np.ndarray, eps: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not eps > 0:
        raise UsageError("eps must be positive")
    x = np.array(point, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + eps
        hi = float(f(x))
        x[i] = orig - eps
        lo = float(f(x))
        x[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValidationError(f"function is non-finite near coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest coordinate-wise |a - n| / max(|a|, |n|).

    Coordinates whose absolute difference is within ``floor`` count as exact.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    diff = np.abs(a - n)
    denom = np.maximum(np.abs(a), np.abs(n))
    rel = np.where(diff <= floor, 0.0, diff / np.where(denom > 0, denom, 1.0))
    return float(rel.max())
