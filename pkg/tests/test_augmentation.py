"""Candidate pools, undenoised sampling, denoising and instance files."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointrank.augmentation import (
    DENOISED,
    GROUND_TRUTH,
    UNDENOISED,
    AugmentConfig,
    CandidatePool,
    TrainingInstance,
    build_instances,
    check_instances,
    confidences,
    denoise,
    read_instances,
    retrieve_candidates,
    sample_undenoised,
    write_instances,
)
from jointrank.corpus import Corpus, Passage, Query
from jointrank.errors import ParseError, UsageError, ValidationError
from jointrank.evaluation import ExactIndex
from jointrank.models import CrossEncoderParams, DualEncoderParams, encode_many
from jointrank.numerics import SeededRng
from jointrank.trainer import Models


def identity_retriever(n):
    """Each single-token text maps to tanh(1) times its own basis vector."""
    p = DualEncoderParams(n, n, n, n)
    for t in ("query", "passage"):
        for name in ("emb", "W1", "W2"):
            p[f"{t}.{name}"][...] = np.eye(n)
    return p


def constant_reranker(vocab, confidence):
    p = CrossEncoderParams(vocab, 2, 2)
    p["b2"][0] = math.log(confidence / (1 - confidence))
    return p


def pool_of(ids, qid="q"):
    return CandidatePool(qid, tuple((pid, -float(i)) for i, pid in enumerate(ids)))


def corpus_of(n, vocab=5):
    return Corpus(tuple(Passage(f"p{i}", (i % vocab,)) for i in range(n)), vocab)


class TestInstance:
    def test_invariants(self):
        inst = TrainingInstance("q", ("a", "b", "c"), (UNDENOISED, DENOISED))
        assert inst.positive_id == "a" and inst.negative_ids == ("b", "c")
        assert inst.labels.tolist() == [1, 0, 0] and inst.size == 3 and inst.is_denoised

    @pytest.mark.parametrize("ids,tags,pos", [
        (("a",), (), GROUND_TRUTH),
        (("a", "a"), (UNDENOISED,), GROUND_TRUTH),
        (("a", "b"), (), GROUND_TRUTH),
        (("a", "b"), ("other",), GROUND_TRUTH),
        (("a", "b"), (UNDENOISED,), "other"),
    ])
    def test_rejects(self, ids, tags, pos):
        with pytest.raises(ValidationError):
            TrainingInstance("q", ids, tags, pos)


class TestRetrieveCandidates:
    def test_clamped_to_corpus(self):
        c = corpus_of(3)
        r = identity_retriever(5)
        pool = retrieve_candidates(r, ExactIndex.build(r, c), Query("q", (1,)), 5)
        assert len(pool.entries) == 3

    def test_matching_passage_first(self):
        c = corpus_of(5)
        r = identity_retriever(5)
        for i in range(5):
            pool = retrieve_candidates(r, ExactIndex.build(r, c), Query("q", (i,)), 3)
            assert pool.ids[0] == f"p{i}"

    def test_ranked_with_ties_by_id(self):
        c = corpus_of(8)
        r = identity_retriever(5)
        pool = retrieve_candidates(r, ExactIndex.build(r, c), Query("q", (2,)), 8)
        assert pool.ids[:2] == ["p2", "p7"]
        assert pool.ids[2:] == sorted(pool.ids[2:])

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 120))
    def test_matches_full_sort(self, seed, n):
        g = np.random.default_rng(seed)
        c = Corpus(tuple(Passage(f"p{i:03d}", tuple(g.integers(0, 20, 4))) for i in range(100)), 20)
        r = DualEncoderParams.initialize(20, 4, 4, 4, SeededRng(seed))
        q = Query("q", tuple(g.integers(0, 20, 3)))
        pool = retrieve_candidates(r, ExactIndex.build(r, c), q, n)
        scores = encode_many(r, [p.tokens for p in c.passages], "passage") @ encode_many(r, [q.tokens], "query")[0]
        order = sorted(range(100), key=lambda i: (-scores[i], c.ids[i]))[: min(n, 100)]
        assert pool.ids == [c.ids[i] for i in order]

    def test_bad_n(self):
        c = corpus_of(3)
        r = identity_retriever(5)
        with pytest.raises(UsageError):
            retrieve_candidates(r, ExactIndex.build(r, c), Query("q", (1,)), 0)


class TestSampleUndenoised:
    def test_exhaustive(self):
        ids = [f"p{i}" for i in range(10)]
        inst = sample_undenoised(pool_of(ids), {"q": frozenset({"p4"})}, 9, SeededRng(0))
        assert inst.positive_id == "p4"
        assert sorted(inst.negative_ids) == sorted(set(ids) - {"p4"})
        assert inst.negative_provenance == (UNDENOISED,) * 9 and inst.positive_provenance == GROUND_TRUTH

    def test_first_positive_by_id(self):
        inst = sample_undenoised(pool_of(["a", "b", "c", "d"]), {"q": frozenset({"z", "c"})}, 2, SeededRng(0))
        assert inst.positive_id == "c"
        assert "c" not in inst.negative_ids

    def test_deterministic(self):
        ids = [f"p{i}" for i in range(30)]
        qrels = {"q": frozenset({"p0"})}
        a = sample_undenoised(pool_of(ids), qrels, 5, SeededRng(3))
        b = sample_undenoised(pool_of(ids), qrels, 5, SeededRng(3))
        assert a == b

    def test_insufficient_is_skipped(self, caplog):
        assert sample_undenoised(pool_of(["a", "b"]), {"q": frozenset({"a"})}, 3, SeededRng(0)) is None
        assert "skipped" in caplog.text

    def test_uniform(self):
        ids = [f"p{i}" for i in range(10)]
        qrels = {"q": frozenset({"p0"})}
        rng = SeededRng(42)
        counts = dict.fromkeys(ids[1:], 0)
        trials = 10_000
        for _ in range(trials):
            for pid in sample_undenoised(pool_of(ids), qrels, 3, rng).negative_ids:
                counts[pid] += 1
        freqs = np.array(list(counts.values())) / trials
        assert np.all(np.abs(freqs - 1 / 3) <= 0.02)


class TestDenoise:
    def setup_method(self):
        self.corpus = corpus_of(6)
        self.query = Query("q", (1,))
        self.pool = pool_of(self.corpus.ids)
        self.qrels = {"q": frozenset({"p0"})}

    def test_degenerate_thresholds(self):
        for conf in (0.01, 0.5, 0.99):
            pos, neg = denoise(self.pool, constant_reranker(5, conf), (1.0, 0.0), self.qrels, self.query, self.corpus)
            assert pos == [] and neg == []

    def test_all_low_confidence(self):
        pos, neg = denoise(self.pool, constant_reranker(5, 0.05), (0.9, 0.1), self.qrels, self.query, self.corpus)
        assert pos == [] and neg == ["p1", "p2", "p3", "p4", "p5"]

    def test_high_confidence_excludes_ground_truth(self):
        pos, neg = denoise(self.pool, constant_reranker(5, 0.95), (0.9, 0.1), self.qrels, self.query, self.corpus)
        assert pos == ["p1", "p2", "p3", "p4", "p5"] and neg == []

    def test_ambiguous_band_dropped(self):
        pos, neg = denoise(self.pool, constant_reranker(5, 0.5), (0.9, 0.1), self.qrels, self.query, self.corpus)
        assert pos == [] and neg == []

    def test_inverted_thresholds(self):
        with pytest.raises(UsageError):
            denoise(self.pool, constant_reranker(5, 0.5), (0.1, 0.9), self.qrels, self.query, self.corpus)

    def test_confidence_is_logistic(self):
        r = CrossEncoderParams.initialize(5, 3, 3, 1, SeededRng(2))
        c = confidences(r, self.query, ["p1", "p2"], self.corpus)
        from jointrank.models import score_ce

        want = [1 / (1 + math.exp(-score_ce(r, (1,), self.corpus.get(p).tokens))) for p in ("p1", "p2")]
        np.testing.assert_allclose(c, want, rtol=1e-14)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 1000), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_lower_t_neg_never_grows(self, seed, a, b):
        lo, hi = sorted((a, b))
        r = CrossEncoderParams.initialize(5, 3, 3, 1, SeededRng(seed))
        r = r.with_flat(r.flat * 40)
        _, neg_hi = denoise(self.pool, r, (1.0, hi), self.qrels, self.query, self.corpus)
        _, neg_lo = denoise(self.pool, r, (1.0, lo), self.qrels, self.query, self.corpus)
        assert set(neg_lo) <= set(neg_hi)


class TestBuildInstances:
    def run(self, data, models, **kw):
        cfg = AugmentConfig(**{"n": 40, "n_neg": 4, **kw})
        return build_instances(data.corpus, data.train_queries, data.qrels, models.retriever,
                               models.reranker, cfg, SeededRng(5))

    def test_all_undenoised(self, tiny_data, tiny_models):
        res = self.run(tiny_data, tiny_models, denoised_fraction=0.0)
        assert res.instances and not any(i.is_denoised for i in res.instances)
        assert res.counts == {DENOISED: 0, UNDENOISED: len(res.instances), "skipped": res.skipped}

    def test_starvation(self, tiny_data, tiny_models):
        res = self.run(tiny_data, tiny_models, denoised_fraction=1.0, t_neg=0.0)
        assert res.instances == [] and res.skipped == len(tiny_data.train_queries)

    def test_size_and_invariants(self, tiny_data, tiny_models):
        # a sharpened random re-ranker spreads confidences over (0, 1)
        r = CrossEncoderParams.initialize(tiny_data.corpus.vocab_size, 8, 8, 1, SeededRng(4))
        models = Models(tiny_models.retriever, r.with_flat(r.flat * 30))
        res = self.run(tiny_data, models, denoised_fraction=0.5, t_pos=0.6, t_neg=0.4)
        assert res.instances
        for inst in res.instances:
            assert inst.size == 5
            assert inst.positive_id not in inst.negative_ids
            truth = tiny_data.qrels[inst.query_id]
            if inst.positive_provenance == GROUND_TRUTH:
                assert inst.positive_id in truth
            assert not truth & set(inst.negative_ids)
        assert {i.is_denoised for i in res.instances} == {True, False}

    def test_deterministic(self, tiny_data, tiny_models):
        a = self.run(tiny_data, tiny_models)
        b = self.run(tiny_data, tiny_models)
        assert a.instances == b.instances and a.counts == b.counts

    def test_query_order(self, tiny_data, tiny_models):
        res = self.run(tiny_data, tiny_models, denoised_fraction=0.0)
        order = [q.id for q in tiny_data.train_queries]
        got = [i.query_id for i in res.instances]
        assert got == sorted(got, key=order.index)

    def test_config_validation(self):
        for bad in ({"n": 0}, {"n_neg": 0}, {"denoised_fraction": 1.5}, {"t_pos": 0.1, "t_neg": 0.2}):
            with pytest.raises(UsageError):
                AugmentConfig(**bad).validate()


class TestInstanceFiles:
    def test_round_trip(self, tmp_path, tiny_data, tiny_models):
        res = TestBuildInstances().run(tiny_data, tiny_models, t_pos=0.6, t_neg=0.4)
        write_instances(tmp_path / "i.tsv", res.instances)
        assert read_instances(tmp_path / "i.tsv") == res.instances

    def test_line_format(self, tmp_path):
        inst = TrainingInstance("q1", ("a", "b", "c"), (UNDENOISED, DENOISED), DENOISED)
        write_instances(tmp_path / "i.tsv", [inst])
        assert (tmp_path / "i.tsv").read_text() == "q1\ta\tb,c\tp:ud\n"

    @pytest.mark.parametrize("line", ["q1\ta\tb\n", "q1\ta\tb,c\tP:u\n", "q1\ta\tb\tX:u\n", "q1\ta\ta\tP:u\n"])
    def test_parse_errors(self, tmp_path, line):
        (tmp_path / "i.tsv").write_text(line)
        with pytest.raises(ParseError):
            read_instances(tmp_path / "i.tsv")

    def test_check_instances(self, tiny_data):
        qmap = {q.id: q for q in tiny_data.train_queries}
        ids = tiny_data.corpus.ids
        check_instances([TrainingInstance(tiny_data.train_queries[0].id, (ids[0], ids[1]), (UNDENOISED,))],
                        tiny_data.corpus, qmap)
        with pytest.raises(ValidationError):
            check_instances([TrainingInstance("nope", (ids[0], ids[1]), (UNDENOISED,))], tiny_data.corpus, qmap)
        with pytest.raises(ValidationError):
            check_instances([TrainingInstance(tiny_data.train_queries[0].id, (ids[0], "zz"), (UNDENOISED,))],
                            tiny_data.corpus, qmap)
