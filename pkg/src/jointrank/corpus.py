"""Queries, passages, relevance labels, the synthetic generator and file I/O.

File formats (UTF-8, LF line endings, tab separated):

* corpus / query files: ``id<TAB>tok tok tok ...``
* qrels: ``query_id<TAB>passage_id<TAB>relevance`` with relevance in {0, 1}
* run files: ``query_id<TAB>passage_id<TAB>rank<TAB>score``
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ParseError, UsageError, ValidationError
from .numerics import SeededRng


@dataclass(frozen=True)
class Passage:
    id: str
    tokens: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.tokens:
            raise ValidationError(f"passage {self.id!r} has no tokens")


@dataclass(frozen=True)
class Query:
    id: str
    tokens: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.tokens:
            raise ValidationError(f"query {self.id!r} has no tokens")


@dataclass(frozen=True)
class Corpus:
    passages: tuple[Passage, ...]
    vocab_size: int
    _index: Mapping[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.vocab_size <= 0:
            raise ValidationError("vocab_size must be positive")
        index: dict[str, int] = {}
        for i, p in enumerate(self.passages):
            if p.id in index:
                raise ValidationError(f"duplicate passage id {p.id!r}")
            index[p.id] = i
            if max(p.tokens) >= self.vocab_size or min(p.tokens) < 0:
                raise ValidationError(f"passage {p.id!r} has a token id outside [0, {self.vocab_size})")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.passages)

    def __contains__(self, pid: str) -> bool:
        return pid in self._index

    def position(self, pid: str) -> int:
        try:
            return self._index[pid]
        except KeyError:
            raise ValidationError(f"unknown passage id {pid!r}") from None

    def get(self, pid: str) -> Passage:
        return self.passages[self.position(pid)]

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.passages]


Qrels = dict[str, frozenset[str]]


def validate_qrels(qrels: Mapping[str, Iterable[str]], corpus: Corpus, queries: Iterable[Query] = ()) -> None:
    """Referential integrity: every positive resolves, every listed query has one."""
    for qid, pids in qrels.items():
        pids = set(pids)
        if not pids:
            raise ValidationError(f"query {qid!r} has no positive passage")
        for pid in sorted(pids):
            if pid not in corpus:
                raise ValidationError(f"qrels for {qid!r} reference unknown passage {pid!r}")
    for q in queries:
        if q.id not in qrels:
            raise ValidationError(f"query {q.id!r} has no qrels entry")


# --------------------------------------------------------------------------
# tokenization


def tokenize(text: str, vocab_size: int) -> list[int]:
    """Lowercase, split on whitespace, hash each word into [0, vocab_size)."""
    if vocab_size <= 0:
        raise UsageError("vocab_size must be positive")
    words = text.lower().split()
    if not words:
        raise ValidationError("cannot tokenize empty text")
    out = []
    for w in words:
        h = hashlib.blake2b(w.encode("utf-8"), digest_size=8).digest()
        out.append(int.from_bytes(h, "little") % vocab_size)
    return out


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class GeneratorConfig:
    """Shape of a synthetic topical corpus.

    The vocabulary is cut into ``topic_count`` equal blocks. Passage tokens
    come from the passage's own topic block with probability ``topic_purity``
    and uniformly from the whole vocabulary otherwise (so stray tokens belong
    to other topics and act as confusers). Queries are drawn the same way
    with ``query_purity``.

    Training queries are labeled sparsely, like real click or annotation
    data: ``positives_per_query`` random passages of the topic (0 means all
    of them), so unlabeled same-topic passages are false negatives. Dev
    queries are always labeled with every passage of their topic.
    """

    num_passages: int = 2000
    num_queries: int = 200
    num_dev_queries: int = 50
    vocab_size: int = 40
    topic_count: int = 20
    tokens_per_passage: int = 24
    tokens_per_query: int = 8
    positives_per_query: int = 3
    topic_purity: float = 0.4
    query_purity: float = 0.6

    def validate(self) -> None:
        for name in ("num_passages", "num_queries", "vocab_size", "topic_count",
                     "tokens_per_passage", "tokens_per_query"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"generator field {name} must be positive")
        if self.num_dev_queries < 0 or self.positives_per_query < 0:
            raise ValidationError("num_dev_queries and positives_per_query must be non-negative")
        if self.topic_count > self.vocab_size:
            raise ValidationError("topic_count cannot exceed vocab_size")
        if self.num_passages < self.topic_count:
            raise ValidationError("need at least one passage per topic")
        if self.positives_per_query > self.num_passages // self.topic_count:
            raise ValidationError(
                f"positives_per_query={self.positives_per_query} exceeds the "
                f"{self.num_passages // self.topic_count} passages available per topic"
            )
        for name in ("topic_purity", "query_purity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"generator field {name} must lie in [0, 1]")


@dataclass(frozen=True)
class Dataset:
    corpus: Corpus
    train_queries: tuple[Query, ...]
    dev_queries: tuple[Query, ...]
    qrels: Qrels
    passage_topics: tuple[int, ...] = ()

    def queries(self, split: str) -> tuple[Query, ...]:
        if split == "train":
            return self.train_queries
        if split == "dev":
            return self.dev_queries
        raise UsageError(f"unknown split {split!r}")

    def qrels_for(self, queries: Iterable[Query]) -> Qrels:
        return {q.id: self.qrels[q.id] for q in queries}


def _id_width(n: int) -> int:
    return max(1, len(str(max(n - 1, 0))))


def generate_synthetic(config: GeneratorConfig, seed: int) -> Dataset:
    """Build a topical corpus plus train/dev queries and qrels; pure in (config, seed)."""
    config.validate()
    rng = SeededRng(seed)
    V, T = config.vocab_size, config.topic_count
    block = V // T

    def draw_topic_tokens(gen: SeededRng, topic: int, size: int, purity: float) -> np.ndarray:
        from_topic = gen.random(size) < purity
        own = topic * block + gen.integers(0, block, size)
        background = gen.integers(0, V, size)
        return np.where(from_topic, own, background)

    prng = rng.child("passages")
    topics = prng.permutation(config.num_passages) % T
    width = _id_width(config.num_passages)
    passages = []
    for i in range(config.num_passages):
        toks = draw_topic_tokens(prng, int(topics[i]), config.tokens_per_passage, config.topic_purity)
        passages.append(Passage(f"p{i:0{width}d}", tuple(int(t) for t in toks)))
    corpus = Corpus(tuple(passages), V)

    by_topic: list[np.ndarray] = [np.flatnonzero(topics == t) for t in range(T)]
    qrng = rng.child("queries")
    total = config.num_queries + config.num_dev_queries
    qwidth = _id_width(total)
    queries: list[Query] = []
    qrels: Qrels = {}
    for j in range(total):
        topic = int(qrng.integers(0, T))
        members = by_topic[topic]
        if config.positives_per_query and j < config.num_queries:
            members = qrng.choice(members, size=config.positives_per_query, replace=False)
        toks = draw_topic_tokens(qrng, topic, config.tokens_per_query, config.query_purity)
        qid = f"q{j:0{qwidth}d}"
        queries.append(Query(qid, tuple(int(t) for t in toks)))
        qrels[qid] = frozenset(passages[k].id for k in members)

    return Dataset(
        corpus=corpus,
        train_queries=tuple(queries[: config.num_queries]),
        dev_queries=tuple(queries[config.num_queries:]),
        qrels=qrels,
        passage_topics=tuple(int(t) for t in topics),
    )


# --------------------------------------------------------------------------
# file formats


def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _read_lines(path: Path) -> Iterable[tuple[int, str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    with open(path, "r", encoding="utf-8", newline="\n") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if line.strip():
                yield line_no, line


def write_token_file(path: Path, records: Sequence[Passage | Query]) -> None:
    lines = [f"{r.id}\t{' '.join(str(t) for t in r.tokens)}\n" for r in records]
    _atomic_write(path, "".join(lines))


def _read_token_records(path: Path) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for line_no, line in _read_lines(path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(str(path), line_no, "expected 'id<TAB>token ids'")
        try:
            toks = tuple(int(t) for t in parts[1].split())
        except ValueError:
            raise ParseError(str(path), line_no, "token ids must be integers") from None
        if not toks or min(toks) < 0:
            raise ParseError(str(path), line_no, "token list must be non-empty and non-negative")
        out.append((parts[0], toks))
    return out


def read_corpus(path: Path, vocab_size: int) -> Corpus:
    return Corpus(tuple(Passage(i, t) for i, t in _read_token_records(path)), vocab_size)


def read_queries(path: Path, vocab_size: int | None = None) -> tuple[Query, ...]:
    queries = tuple(Query(i, t) for i, t in _read_token_records(path))
    if vocab_size is not None:
        for q in queries:
            if max(q.tokens) >= vocab_size:
                raise ValidationError(f"query {q.id!r} has a token id outside [0, {vocab_size})")
    return queries


def write_qrels(path: Path, qrels: Mapping[str, Iterable[str]]) -> None:
    lines = []
    for qid in sorted(qrels):
        for pid in sorted(qrels[qid]):
            lines.append(f"{qid}\t{pid}\t1\n")
    _atomic_write(path, "".join(lines))


def read_qrels(path: Path, corpus: Corpus | None = None) -> Qrels:
    """Parse a qrels file; relevance-0 lines are accepted and ignored."""
    positives: dict[str, set[str]] = {}
    seen: set[str] = set()
    for line_no, line in _read_lines(path):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(str(path), line_no, "expected 'query_id<TAB>passage_id<TAB>relevance'")
        qid, pid, rel = parts
        if rel not in ("0", "1"):
            raise ParseError(str(path), line_no, f"relevance must be 0 or 1, got {rel!r}")
        if corpus is not None and pid not in corpus:
            raise ValidationError(f"{path}:{line_no}: unknown passage id {pid!r}")
        seen.add(qid)
        if rel == "1":
            positives.setdefault(qid, set()).add(pid)
    missing = sorted(seen - set(positives))
    if missing:
        raise ValidationError(f"{path}: query {missing[0]!r} has no positive passage")
    return {q: frozenset(p) for q, p in positives.items()}


@dataclass(frozen=True)
class RunEntry:
    query_id: str
    passage_id: str
    rank: int
    score: float


RunFile = dict[str, list[RunEntry]]


def format_score(score: float) -> str:
    # shortest repr that round-trips exactly
    return repr(float(score))


def write_run(path: Path, run: Mapping[str, Sequence[RunEntry]]) -> None:
    lines = []
    for qid in sorted(run):
        for e in sorted(run[qid], key=lambda e: e.rank):
            lines.append(f"{e.query_id}\t{e.passage_id}\t{e.rank}\t{format_score(e.score)}\n")
    _atomic_write(path, "".join(lines))


def read_run(path: Path) -> RunFile:
    run: RunFile = {}
    for line_no, line in _read_lines(path):
        parts = line.split("\t")
        if len(parts) != 4:
            raise ParseError(str(path), line_no, "expected 'query_id<TAB>passage_id<TAB>rank<TAB>score'")
        qid, pid, rank_s, score_s = parts
        try:
            rank = int(rank_s)
            score = float(score_s)
        except ValueError:
            raise ParseError(str(path), line_no, "rank must be an integer and score a real") from None
        if rank < 1:
            raise ParseError(str(path), line_no, "rank must be 1-based")
        run.setdefault(qid, []).append(RunEntry(qid, pid, rank, score))
    for entries in run.values():
        entries.sort(key=lambda e: e.rank)
    return run


# --------------------------------------------------------------------------
# dataset directories

DATASET_FILES = {
    "meta": "dataset.json",
    "corpus": "corpus.tsv",
    "train_queries": "queries.train.tsv",
    "dev_queries": "queries.dev.tsv",
    "train_qrels": "qrels.train.tsv",
    "dev_qrels": "qrels.dev.tsv",
}


def save_dataset(directory: Path, data: Dataset, config: GeneratorConfig | None = None, seed: int | None = None) -> list[Path]:
    d = Path(directory)
    meta = {"vocab_size": data.corpus.vocab_size}
    if config is not None:
        meta["generator"] = asdict(config)
    if seed is not None:
        meta["seed"] = seed
    _atomic_write(d / DATASET_FILES["meta"], json.dumps(meta, indent=2, sort_keys=True) + "\n")
    write_token_file(d / DATASET_FILES["corpus"], data.corpus.passages)
    write_token_file(d / DATASET_FILES["train_queries"], data.train_queries)
    write_token_file(d / DATASET_FILES["dev_queries"], data.dev_queries)
    write_qrels(d / DATASET_FILES["train_qrels"], data.qrels_for(data.train_queries))
    write_qrels(d / DATASET_FILES["dev_qrels"], data.qrels_for(data.dev_queries))
    return [d / f for f in DATASET_FILES.values()]


def load_dataset(directory: Path) -> Dataset:
    d = Path(directory)
    meta_path = d / DATASET_FILES["meta"]
    if not meta_path.exists():
        raise FileNotFoundError(str(meta_path))
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    vocab = int(meta["vocab_size"])
    corpus = read_corpus(d / DATASET_FILES["corpus"], vocab)
    train_q = read_queries(d / DATASET_FILES["train_queries"], vocab)
    dev_q = read_queries(d / DATASET_FILES["dev_queries"], vocab)
    qrels = dict(read_qrels(d / DATASET_FILES["train_qrels"], corpus))
    qrels.update(read_qrels(d / DATASET_FILES["dev_qrels"], corpus))
    validate_qrels(qrels, corpus, train_q + dev_q)
    return Dataset(corpus, train_q, dev_q, qrels)


def generator_config_fields() -> dict[str, type]:
    return {f.name: f.type for f in fields(GeneratorConfig)}
