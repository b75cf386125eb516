"""Exact index, retrieve-then-rerank and the ranking metrics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointrank.corpus import Corpus, Passage, Query, RunEntry, read_run
from jointrank.errors import UsageError, ValidationError
from jointrank.evaluation import (
    ExactIndex,
    mrr_at_k,
    pipeline_eval,
    recall_at_k,
    rerank,
    rerank_run,
    retrieve,
    standard_metrics,
    top_k,
)
from jointrank.models import CrossEncoderParams, DualEncoderParams, encode_many
from jointrank.numerics import SeededRng


def oracle_top_k(emb, ids, q, k):
    scores = emb @ q
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [(ids[i], float(scores[i])) for i in order[:k]]


def make_run(ranked):
    """{qid: [pid, ...]} -> RunFile with descending dummy scores."""
    return {q: [RunEntry(q, p, i + 1, -float(i)) for i, p in enumerate(ps)] for q, ps in ranked.items()}


class TestTopK:
    def test_full_ranking_is_a_sort(self, nprng):
        emb, ids = nprng.normal(size=(30, 4)), [f"p{i:02d}" for i in range(30)]
        q = nprng.normal(size=4)
        assert top_k(ExactIndex(emb, ids), q, 30) == oracle_top_k(emb, ids, q, 30)

    def test_orthonormal(self):
        emb = np.eye(5)
        ids = [f"p{i}" for i in range(5)]
        for i in range(5):
            assert top_k(ExactIndex(emb, ids), emb[i], 1)[0][0] == f"p{i}"

    def test_ties_by_ascending_id(self):
        idx = ExactIndex(np.ones((4, 2)), ["d", "b", "c", "a"])
        assert [p for p, _ in top_k(idx, [1.0, 0.0], 3)] == ["a", "b", "c"]

    def test_ties_straddling_the_cut(self):
        emb = np.array([[2.0], [1.0], [1.0], [1.0], [0.0]])
        idx = ExactIndex(emb, ["e", "z", "m", "a", "b"])
        assert [p for p, _ in top_k(idx, [1.0], 2)] == ["e", "a"]

    def test_clamp(self, nprng, caplog):
        idx = ExactIndex(nprng.normal(size=(3, 2)), ["a", "b", "c"])
        assert len(top_k(idx, [1.0, 0.0], 10)) == 3
        assert "clamping" in caplog.text

    def test_errors(self):
        idx = ExactIndex(np.ones((2, 2)), ["a", "b"])
        with pytest.raises(UsageError):
            top_k(idx, [1.0, 0.0], 0)
        with pytest.raises(UsageError):
            top_k(idx, [1.0], 1)
        with pytest.raises(UsageError):
            ExactIndex(np.ones((2, 2)), ["a"])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 60), st.integers(1, 70), st.booleans())
    def test_matches_oracle(self, seed, n, k, coarse):
        g = np.random.default_rng(seed)
        emb = g.normal(size=(n, 3))
        if coarse:  # force many exact ties
            emb = np.round(emb)
        ids = [f"p{i}" for i in g.permutation(n)]
        q = np.round(g.normal(size=3)) if coarse else g.normal(size=3)
        assert top_k(ExactIndex(emb, ids), q, k) == oracle_top_k(emb, ids, q, min(k, n))

    def test_batch_retrieve_matches_top_k(self, tiny_data, tiny_models):
        p = tiny_models.retriever
        idx = ExactIndex.build(p, tiny_data.corpus)
        run = retrieve(p, idx, tiny_data.dev_queries, 7)
        q_emb = encode_many(p, [q.tokens for q in tiny_data.dev_queries], "query")
        for q, e in zip(tiny_data.dev_queries, q_emb):
            want = top_k(idx, e, 7)
            assert [x.passage_id for x in run[q.id]] == [pid for pid, _ in want]
            np.testing.assert_allclose([x.score for x in run[q.id]], [s for _, s in want], rtol=1e-12)
            assert [x.rank for x in run[q.id]] == list(range(1, 8))

    def test_build_rejects_empty_corpus(self):
        with pytest.raises(UsageError):
            ExactIndex.build(DualEncoderParams(5, 2, 2, 2), Corpus((), 5))


def small_corpus():
    return Corpus(tuple(Passage(f"p{i}", (i, (i + 1) % 6)) for i in range(6)), 6)


class TestRerank:
    def test_single(self):
        c = small_corpus()
        params = CrossEncoderParams.initialize(6, 3, 3, 1, SeededRng(1))
        out = rerank(params, Query("q", (1,)), ["p3"], c)
        assert [p for p, _ in out] == ["p3"]

    def test_zero_params_tie_order(self):
        out = rerank(CrossEncoderParams(6, 3, 3), Query("q", (1,)), ["p4", "p0", "p3"], small_corpus())
        assert [p for p, _ in out] == ["p0", "p3", "p4"]

    def test_permutation(self, tiny_data, tiny_models):
        q = tiny_data.dev_queries[0]
        ids = tiny_data.corpus.ids[:25]
        out = rerank(tiny_models.reranker, q, ids, tiny_data.corpus)
        assert sorted(p for p, _ in out) == sorted(ids)
        scores = [s for _, s in out]
        assert scores == sorted(scores, reverse=True)

    def test_unknown_id(self):
        with pytest.raises(ValidationError):
            rerank(CrossEncoderParams(6, 3, 3), Query("q", (1,)), ["nope"], small_corpus())


class TestMetrics:
    def test_mrr_examples(self):
        qrels = {"a": frozenset({"x"}), "b": frozenset({"y"})}
        assert mrr_at_k(make_run({"a": ["n1", "n2", "x"]}), qrels, 10) == pytest.approx(1 / 3)
        assert mrr_at_k(make_run({"a": ["n1", "n2", "x"]}), qrels, 2) == 0.0
        run = make_run({"a": ["x"], "b": ["n1", "n2", "n3", "y"]})
        assert mrr_at_k(run, qrels, 10) == 0.625

    def test_recall_examples(self):
        qrels = {q: frozenset({"x"}) for q in "abcd"}
        assert recall_at_k(make_run({q: ["x", "n"] for q in "abcd"}), qrels, 1) == 1.0
        assert recall_at_k(make_run({q: ["n", "x"] for q in "abcd"}), qrels, 1) == 0.0
        run = make_run({"a": ["x"], "b": ["n", "x"], "c": ["n", "n2", "x"], "d": ["n"] * 1})
        assert recall_at_k(run, qrels, 3) == 0.75

    def test_first_positive_only(self):
        qrels = {"a": frozenset({"x", "y"})}
        assert mrr_at_k(make_run({"a": ["n", "y", "x"]}), qrels, 10) == 0.5

    def test_missing_qrels(self):
        with pytest.raises(ValidationError):
            mrr_at_k(make_run({"zz": ["x"]}), {"a": frozenset({"x"})}, 10)
        with pytest.raises(ValidationError):
            recall_at_k(make_run({"zz": ["x"]}), {"a": frozenset({"x"})}, 10)

    def test_bad_k(self):
        with pytest.raises(UsageError):
            mrr_at_k(make_run({"a": ["x"]}), {"a": frozenset({"x"})}, 0)

    @given(st.integers(0, 2**31))
    def test_monotone_in_k(self, seed):
        g = np.random.default_rng(seed)
        ranked = {f"q{i}": [f"p{j}" for j in g.permutation(40)[:20]] for i in range(5)}
        qrels = {q: frozenset(f"p{j}" for j in g.choice(40, 2, replace=False)) for q in ranked}
        run = make_run(ranked)
        mrr = [mrr_at_k(run, qrels, k) for k in range(1, 25)]
        rec = [recall_at_k(run, qrels, k) for k in range(1, 25)]
        assert mrr == sorted(mrr) and rec == sorted(rec)
        assert all(0 <= v <= 1 for v in mrr + rec)

    def test_standard_metric_names(self):
        m = standard_metrics(make_run({"a": ["x"]}), {"a": frozenset({"x"})})
        assert m == {"MRR@10": 1.0, "Recall@5": 1.0, "Recall@10": 1.0, "Recall@50": 1.0}


class TestPipeline:
    def test_outputs_and_files(self, tmp_path, tiny_data, tiny_models):
        res = pipeline_eval(tiny_models.retriever, tiny_models.reranker, tiny_data.corpus,
                            tiny_data.dev_queries, tiny_data.qrels, 20, 20, out_dir=tmp_path)
        for name in ("run.retriever.tsv", "run.reranked.tsv", "metrics.tsv"):
            assert (tmp_path / name).is_file()
        assert read_run(tmp_path / "run.retriever.tsv").keys() == res.retriever_run.keys()
        lines = (tmp_path / "metrics.tsv").read_text().splitlines()
        assert lines[0] == "metric\tstage\tvalue" and len(lines) == 9
        for q in tiny_data.dev_queries:
            a = sorted(e.passage_id for e in res.retriever_run[q.id])
            b = sorted(e.passage_id for e in res.reranked_run[q.id])
            assert a == b
        # reranking only permutes the candidate set
        assert res.reranked["Recall@50"] == res.retriever["Recall@50"]

    def test_full_depth_recall(self, tiny_data, tiny_models):
        m = len(tiny_data.corpus)
        res = pipeline_eval(tiny_models.retriever, tiny_models.reranker, tiny_data.corpus,
                            tiny_data.dev_queries, tiny_data.qrels, m, m)
        assert res.retriever["Recall@50"] <= 1.0
        assert recall_at_k(res.retriever_run, tiny_data.qrels, m) == 1.0

    def test_zero_reranker_is_id_order(self, tiny_data, tiny_models):
        zero = CrossEncoderParams(tiny_data.corpus.vocab_size, 4, 4)
        res = pipeline_eval(tiny_models.retriever, zero, tiny_data.corpus, tiny_data.dev_queries,
                            tiny_data.qrels, 20, 20)
        for q in tiny_data.dev_queries:
            ids = [e.passage_id for e in res.reranked_run[q.id]]
            assert ids == sorted(ids)

    def test_depth_contract(self, tiny_data, tiny_models):
        with pytest.raises(UsageError):
            pipeline_eval(tiny_models.retriever, tiny_models.reranker, tiny_data.corpus,
                          tiny_data.dev_queries, tiny_data.qrels, 10, 20)

    def test_rerank_run_preserves_queries(self, tiny_data, tiny_models):
        idx = ExactIndex.build(tiny_models.retriever, tiny_data.corpus)
        run = retrieve(tiny_models.retriever, idx, tiny_data.dev_queries, 5)
        out = rerank_run(tiny_models.reranker, tiny_data.dev_queries, run, tiny_data.corpus)
        assert out.keys() == run.keys()
