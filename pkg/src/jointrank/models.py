"""Dual-encoder retriever and cross-encoder re-ranker with manual backprop.

Both scorers store their weights in one flat float64 vector; named arrays are
views into it, so Adam and the finite-difference oracle can address every
coordinate in a fixed order.

Dual-encoder tower (query and passage each have their own):
    mean-pool(embeddings) -> W1 x + b1 -> tanh -> W2 h + b2
and the score is the plain dot product of the two tower outputs.

Cross-encoder, one shared embedding table:
    f = [pool(q), pool(p), pool(q) * pool(p)] -> W1 f + b1 -> tanh -> w2 . h + b2
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import UsageError, ValidationError
from .numerics import SeededRng

INIT_SCALE = 0.1


class FlatParams:
    """A flat parameter vector with named, shaped views in a fixed order."""

    kind = "base"

    def __init__(self, vocab_size: int, emb_dim: int, hidden_dim: int, out_dim: int,
                 flat: np.ndarray | None = None) -> None:
        for name, v in (("vocab_size", vocab_size), ("emb_dim", emb_dim),
                        ("hidden_dim", hidden_dim), ("out_dim", out_dim)):
            if v <= 0:
                raise ValidationError(f"{name} must be positive")
        self.vocab_size = vocab_size
        self.emb_dim = emb_dim
        self.hidden_dim = hidden_dim
        self.out_dim = out_dim
        self.layout = self._layout()
        size = sum(math.prod(s) for _, s in self.layout)
        if flat is None:
            flat = np.zeros(size)
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (size,):
            raise UsageError(f"{self.kind} expects {size} parameters, got {flat.shape}")
        self.flat = flat
        self._views: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in self.layout:
            n = math.prod(shape)
            self._views[name] = self.flat[offset:offset + n].reshape(shape)
            offset += n

    def _layout(self) -> list[tuple[str, tuple[int, ...]]]:
        raise NotImplementedError

    @classmethod
    def count(cls, vocab_size: int, emb_dim: int, hidden_dim: int, out_dim: int) -> int:
        return cls(vocab_size, emb_dim, hidden_dim, out_dim).flat.size

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def __len__(self) -> int:
        return self.flat.size

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (self.vocab_size, self.emb_dim, self.hidden_dim, self.out_dim)

    def with_flat(self, flat: np.ndarray):
        return type(self)(*self.dims, flat=np.array(flat, dtype=np.float64))

    def copy(self):
        return self.with_flat(self.flat.copy())

    def zeros_like(self) -> np.ndarray:
        return np.zeros_like(self.flat)

    @classmethod
    def initialize(cls, vocab_size: int, emb_dim: int, hidden_dim: int, out_dim: int, rng: SeededRng):
        """Weights and embeddings uniform in [-0.1, 0.1]; biases zero."""
        p = cls(vocab_size, emb_dim, hidden_dim, out_dim)
        for name, shape in p.layout:
            if name.split(".")[-1].startswith("b"):
                continue
            p[name][...] = rng.uniform(-INIT_SCALE, INIT_SCALE, shape)
        return p

    def __eq__(self, other: object) -> bool:
        return (type(self) is type(other) and self.dims == other.dims
                and np.array_equal(self.flat, other.flat))

    def __repr__(self) -> str:
        return f"{type(self).__name__}(dims={self.dims}, n={self.flat.size})"


class DualEncoderParams(FlatParams):
    kind = "dual_encoder"
    towers = ("query", "passage")

    def _layout(self):
        V, E, H, D = self.dims
        out = []
        for t in self.towers:
            out += [(f"{t}.emb", (V, E)), (f"{t}.W1", (H, E)), (f"{t}.b1", (H,)),
                    (f"{t}.W2", (D, H)), (f"{t}.b2", (D,))]
        return out

    def tower(self, name: str) -> dict[str, np.ndarray]:
        if name not in self.towers:
            raise UsageError(f"unknown tower {name!r}")
        return {k.split(".", 1)[1]: v for k, v in self._views.items() if k.startswith(name + ".")}


class CrossEncoderParams(FlatParams):
    kind = "cross_encoder"

    def __init__(self, vocab_size: int, emb_dim: int, hidden_dim: int, out_dim: int = 1,
                 flat: np.ndarray | None = None) -> None:
        if out_dim != 1:
            raise ValidationError("cross encoder emits a scalar; out_dim must be 1")
        super().__init__(vocab_size, emb_dim, hidden_dim, out_dim, flat)

    def _layout(self):
        V, E, H, _ = self.dims
        return [("emb", (V, E)), ("W1", (H, 3 * E)), ("b1", (H,)), ("w2", (H,)), ("b2", (1,))]


# --------------------------------------------------------------------------
# bags of tokens


def bag_matrix(seqs: Sequence[Sequence[int]], vocab_size: int) -> np.ndarray:
    """Row i holds token frequencies of seqs[i] divided by its length, so X @ emb = mean-pool."""
    lengths = [len(s) for s in seqs]
    if not seqs:
        return np.zeros((0, vocab_size))
    if min(lengths) == 0:
        raise ValidationError("token sequence must be non-empty")
    flat = np.fromiter((t for s in seqs for t in s), dtype=np.int64, count=sum(lengths))
    if flat.min() < 0 or flat.max() >= vocab_size:
        raise ValidationError(f"token id out of range [0, {vocab_size})")
    rows = np.repeat(np.arange(len(seqs)), lengths)
    X = np.zeros((len(seqs), vocab_size))
    np.add.at(X, (rows, flat), np.repeat(1.0 / np.asarray(lengths, dtype=np.float64), lengths))
    return X


# --------------------------------------------------------------------------
# dual encoder


def _tower_forward(tw: dict[str, np.ndarray], X: np.ndarray):
    pooled = X @ tw["emb"]
    h = np.tanh(pooled @ tw["W1"].T + tw["b1"])
    out = h @ tw["W2"].T + tw["b2"]
    return out, (X, pooled, h)


def _tower_backward(tw: dict[str, np.ndarray], cache, d_out: np.ndarray) -> dict[str, np.ndarray]:
    X, pooled, h = cache
    dz = (d_out @ tw["W2"]) * (1.0 - h * h)
    return {
        "W2": d_out.T @ h,
        "b2": d_out.sum(axis=0),
        "W1": dz.T @ pooled,
        "b1": dz.sum(axis=0),
        "emb": X.T @ (dz @ tw["W1"]),
    }


def encode(params: DualEncoderParams, tokens: Sequence[int], tower: str = "query") -> np.ndarray:
    out, _ = _tower_forward(params.tower(tower), bag_matrix([tokens], params.vocab_size))
    return out[0]


def encode_many(params: DualEncoderParams, seqs: Sequence[Sequence[int]], tower: str) -> np.ndarray:
    if len(seqs) == 0:
        return np.zeros((0, params.out_dim))
    out, _ = _tower_forward(params.tower(tower), bag_matrix(seqs, params.vocab_size))
    return out


def score_de(query_emb: Sequence[float], passage_emb: Sequence[float]) -> float:
    q = np.asarray(query_emb, dtype=np.float64)
    p = np.asarray(passage_emb, dtype=np.float64)
    if q.shape != p.shape or q.ndim != 1:
        raise UsageError(f"embedding shapes differ: {q.shape} vs {p.shape}")
    return float(np.dot(q, p))


@dataclass
class ListBatch:
    """Queries with their candidate lists, as token sequences."""

    queries: list[Sequence[int]]
    candidates: list[list[Sequence[int]]]

    def __post_init__(self) -> None:
        if len(self.queries) != len(self.candidates):
            raise UsageError("one candidate list per query is required")

    @property
    def sizes(self) -> list[int]:
        return [len(c) for c in self.candidates]

    @property
    def flat_candidates(self) -> list[Sequence[int]]:
        return [p for c in self.candidates for p in c]

    @property
    def pair_query_index(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.queries)), self.sizes)


def _split(flat: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    return np.split(flat, np.cumsum(sizes)[:-1]) if len(sizes) else []


class DualEncoderForward:
    """Scores of a ListBatch plus the intermediates needed for its gradient."""

    def __init__(self, params: DualEncoderParams, batch: ListBatch) -> None:
        self.params = params
        self.batch = batch
        V = params.vocab_size
        self.q_out, self.q_cache = _tower_forward(params.tower("query"), bag_matrix(batch.queries, V))
        self.p_out, self.p_cache = _tower_forward(params.tower("passage"), bag_matrix(batch.flat_candidates, V))
        self.qi = batch.pair_query_index
        self.flat_scores = np.einsum("ij,ij->i", self.q_out[self.qi], self.p_out)

    @property
    def scores(self) -> list[np.ndarray]:
        return _split(self.flat_scores, self.batch.sizes)

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        g = np.asarray(upstream, dtype=np.float64)
        if g.shape != self.flat_scores.shape:
            raise UsageError(f"upstream has {g.size} entries, batch has {self.flat_scores.size} scores")
        d_q = np.zeros_like(self.q_out)
        np.add.at(d_q, self.qi, g[:, None] * self.p_out)
        d_p = g[:, None] * self.q_out[self.qi]
        grad = self.params.zeros_like()
        gp = self.params.with_flat(grad)
        for tower, cache, d_out in (("query", self.q_cache, d_q), ("passage", self.p_cache, d_p)):
            for name, value in _tower_backward(self.params.tower(tower), cache, d_out).items():
                gp[f"{tower}.{name}"][...] = value
        return gp.flat


def grad_de(params: DualEncoderParams, batch: ListBatch, upstream) -> np.ndarray:
    """d(sum_i upstream_i * s_de_i)/d(params), flattened in the params' coordinate order."""
    return DualEncoderForward(params, batch).backward(_flatten_upstream(upstream))


def de_scores(params: DualEncoderParams, batch: ListBatch) -> list[np.ndarray]:
    return DualEncoderForward(params, batch).scores


# --------------------------------------------------------------------------
# cross encoder


class CrossEncoderForward:
    def __init__(self, params: CrossEncoderParams, batch: ListBatch) -> None:
        self.params = params
        self.batch = batch
        V = params.vocab_size
        self.Xq = bag_matrix(batch.queries, V)[batch.pair_query_index]
        self.Xp = bag_matrix(batch.flat_candidates, V)
        self._forward()

    @classmethod
    def from_pairs(cls, params: CrossEncoderParams, q_seqs, p_seqs) -> "CrossEncoderForward":
        batch = ListBatch(list(q_seqs), [[p] for p in p_seqs])
        return cls(params, batch)

    def _forward(self) -> None:
        E = self.params["emb"]
        self.pq = self.Xq @ E
        self.pp = self.Xp @ E
        self.f = np.concatenate([self.pq, self.pp, self.pq * self.pp], axis=1)
        self.h = np.tanh(self.f @ self.params["W1"].T + self.params["b1"])
        self.flat_scores = self.h @ self.params["w2"] + self.params["b2"][0]

    @property
    def scores(self) -> list[np.ndarray]:
        return _split(self.flat_scores, self.batch.sizes)

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        g = np.asarray(upstream, dtype=np.float64)
        if g.shape != self.flat_scores.shape:
            raise UsageError(f"upstream has {g.size} entries, batch has {self.flat_scores.size} scores")
        p = self.params
        e = p.emb_dim
        grad = p.with_flat(p.zeros_like())
        grad["w2"][...] = g @ self.h
        grad["b2"][0] = g.sum()
        dz = np.outer(g, p["w2"]) * (1.0 - self.h * self.h)
        grad["W1"][...] = dz.T @ self.f
        grad["b1"][...] = dz.sum(axis=0)
        df = dz @ p["W1"]
        d_pq = df[:, :e] + df[:, 2 * e:] * self.pp
        d_pp = df[:, e:2 * e] + df[:, 2 * e:] * self.pq
        grad["emb"][...] = self.Xq.T @ d_pq + self.Xp.T @ d_pp
        return grad.flat


def score_ce(params: CrossEncoderParams, q_tokens: Sequence[int], p_tokens: Sequence[int]) -> float:
    return float(CrossEncoderForward.from_pairs(params, [q_tokens], [p_tokens]).flat_scores[0])


def ce_scores(params: CrossEncoderParams, batch: ListBatch) -> list[np.ndarray]:
    return CrossEncoderForward(params, batch).scores


def grad_ce(params: CrossEncoderParams, batch: ListBatch, upstream) -> np.ndarray:
    return CrossEncoderForward(params, batch).backward(_flatten_upstream(upstream))


def _flatten_upstream(upstream) -> np.ndarray:
    if isinstance(upstream, np.ndarray):
        return upstream.astype(np.float64).ravel()
    parts = [np.atleast_1d(np.asarray(u, dtype=np.float64)) for u in upstream]
    return np.concatenate(parts) if parts else np.zeros(0)


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"JRCK"
CHECKPOINT_VERSION = 1
_KINDS = {DualEncoderParams.kind: 1, CrossEncoderParams.kind: 2}
_HEADER = struct.Struct("<4sIIIIIIQ")


def save_checkpoint(path: Path, params: FlatParams) -> None:
    """Header (magic, version, kind, vocab, emb, hidden, out, count) then float64 LE values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, _KINDS[params.kind],
                          *params.dims, params.flat.size)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(params.flat.astype("<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: Path) -> FlatParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValidationError(f"{path}: truncated checkpoint header")
    magic, version, kind, V, E, H, D, count = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    cls = {1: DualEncoderParams, 2: CrossEncoderParams}.get(kind)
    if cls is None:
        raise ValidationError(f"{path}: unknown model kind {kind}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * count:
        raise ValidationError(f"{path}: expected {count} values, found {len(body) // 8}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return cls(V, E, H, D, flat=flat)
