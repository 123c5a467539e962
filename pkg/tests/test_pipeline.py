import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fastslow.data import DataConfig, generate_dataset
from fastslow.encoders import DualEncoderConfig, EncoderConfig
from fastslow.fast import FastModel, embed_corpus
from fastslow.index import ExactIndex, Hits, build_exact, build_pq
from fastslow.pipeline import (CURVE_COLUMNS, EmptyCaption, QuerySet, RetrievalPipeline, SlowCorpus,
                               benchmark, combine, linear_fit, mean_recall, recall_at_k, rerank_curve,
                               rows_to_csv, smallest_matching_k, synthetic_pipeline)
from fastslow.slow import DecoderConfig, SlowConfig, SlowModel

SLOW = SlowConfig(EncoderConfig(widths=(4, 4, 8), d=16), DecoderConfig(d_model=16, n_heads=2, n_layers=1, d_visual=16))
FAST = DualEncoderConfig(EncoderConfig(widths=(4, 4, 8), d=8), embed_dim=8)


@pytest.fixture(scope="module")
def world():
    ds = generate_dataset(DataConfig(n_train=10, n_val=2, n_test=24), seed=4)
    slow, fast = SlowModel.init(SLOW, 1), FastModel.init(FAST, 2)
    index = build_exact(embed_corpus(ds, "test", fast))
    corpus = SlowCorpus.from_dataset(slow, ds, "test")
    return ds, slow, fast, index, corpus, QuerySet.gold_captions(ds, "test")


def make(world, K=5, beta=0.0):
    _, _, fast, index, corpus, _ = world
    return RetrievalPipeline(fast, index, corpus, K=K, beta=beta)


def exhaustive_oracle(ds, slow, caption):
    """Score every test scene one at a time; sort by (-h, id) in Python."""
    scored = []
    for sid in ds.split_ids("test"):
        h = float(slow.score_one_caption(slow.visual(ds.render(sid)[None]), caption)[0])
        scored.append((-h, sid))
    return [sid for _, sid in sorted(scored)]


class TestCombine:
    def test_hand_computed_order(self):
        # fast order 7, 3, 9, 1, 5; K=4 leaves id 5 in the tail
        hits = Hits(np.array([7, 3, 9, 1, 5]), np.array([4.0, 3.0, 2.0, 1.0, 0.5]))
        slow = np.array([-10.0, -8.5, -9.0, -7.0])
        ranked = combine(hits, slow, 4, 0.5)
        # combined: 7 -> -8.0, 3 -> -7.0, 9 -> -8.0, 1 -> -6.5; 7 and 9 tie, lower id first
        assert ranked.ids.tolist() == [1, 3, 7, 9, 5]
        assert ranked.combined[:4].tolist() == [-6.5, -7.0, -8.0, -8.0]
        assert ranked.n_reranked == 4 and ranked.stage(3) == "rerank" and ranked.stage(4) == "fast"
        assert math.isnan(ranked.slow[4]) and math.isnan(ranked.combined[4])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 20), st.integers(0, 2**31))
    def test_huge_beta_keeps_fast_order(self, n, seed):
        rng = np.random.default_rng(seed)
        fast = np.sort(rng.normal(size=n))[::-1]
        hits = Hits(rng.permutation(n), fast)
        ranked = combine(hits, rng.normal(size=n) * 50, n, 1e12)
        assert np.array_equal(ranked.ids, hits.ids)


class TestQuery:
    def test_k1_top1_is_fast_top1(self, world):
        _, _, fast, index, _, qs = world
        for beta in (0.0, 5.0, -3.0):
            p = make(world, K=1, beta=beta)
            for c in qs.captions[:5]:
                ranked, _ = p.query(c)
                assert ranked.ids[0] == index.topk(p.text_embedding(c), 1).ids[0]

    def test_k_equals_n_beta0_is_exhaustive_slow(self, world):
        ds, slow, _, _, _, qs = world
        p = make(world, K=24)
        for c in qs.captions[:4]:
            ranked, stats = p.query(c)
            assert ranked.ids.tolist() == exhaustive_oracle(ds, slow, c)
            assert stats.slow_calls == 24

    def test_slow_calls_equal_k(self, world):
        p = make(world)
        for K in (1, 3, 24):
            _, stats = p.query(world[5].captions[0], K=K)
            assert stats.slow_calls == K

    def test_k_above_n_is_clamped(self, world):
        with pytest.warns(UserWarning, match="exceeds"):
            p = make(world, K=100)
        assert p.K == 24
        with pytest.warns(UserWarning):
            _, stats = p.query(world[5].captions[0], K=30)
        assert stats.slow_calls == 24

    def test_errors(self, world):
        p = make(world)
        with pytest.raises(EmptyCaption):
            p.query((1, 2))
        with pytest.raises(EmptyCaption):
            p.query(())
        with pytest.raises(ValueError, match="at least 1"):
            make(world, K=0)
        with pytest.raises(ValueError, match="finite"):
            make(world, beta=math.inf)

    def test_deterministic(self, world):
        p = make(world, K=7, beta=0.3)
        a, _ = p.query(world[5].captions[3])
        b, _ = p.query(world[5].captions[3])
        for f in ("ids", "fast", "slow", "combined"):
            assert np.array_equal(getattr(a, f), getattr(b, f), equal_nan=True)

    def test_recompute_matches_precompute(self, world):
        ds, slow, _, _, corpus, qs = world
        lazy = SlowCorpus.from_dataset(slow, ds, "test", precompute=False)
        rows = np.arange(len(corpus))
        assert np.array_equal(lazy.score(rows, qs.captions[0]), corpus.score(rows, qs.captions[0]))

    def test_tail_in_fast_order(self, world):
        p = make(world, K=5)
        ranked, _ = p.query(world[5].captions[2])
        hits = p.fast_hits(world[5].captions[2])
        assert np.array_equal(ranked.ids[5:], hits.ids[5:])
        assert set(ranked.ids[:5]) == set(hits.ids[:5])

    def test_mismatched_corpus_rejected(self, world):
        _, _, fast, index, corpus, _ = world
        other = ExactIndex(index.ids + 1, index.vectors)
        with pytest.raises(ValueError, match="same scene ids"):
            RetrievalPipeline(fast, other, corpus)

    def test_pq_index_pipeline(self, world):
        ds, _, fast, _, corpus, qs = world
        pq = build_pq(embed_corpus(ds, "test", fast), M=2, Kc=4, iters=2, seed=0)
        ranked, stats = RetrievalPipeline(fast, pq, corpus, K=3).query(qs.captions[0])
        assert len(ranked) == 24 and stats.slow_calls == 3


class TestRecall:
    def test_perfect_ranking(self):
        golds = [4, 2, 9]
        rankings = [[g] + [x for x in range(10) if x != g] for g in golds]
        assert mean_recall(rankings, golds, 1) == 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.permutations(list(range(12))), st.integers(0, 11))
    def test_monotone_in_k(self, order, gold):
        values = [recall_at_k(order, gold, k) for k in range(1, 13)]
        assert values == sorted(values) and values[-1] == 1

    def test_random_ranking_is_chance(self):
        rng = np.random.default_rng(0)
        n, trials = 20, 10_000
        hits = sum(recall_at_k(rng.permutation(n), 0, 1) for _ in range(trials))
        p = 1 / n
        assert abs(hits / trials - p) <= 3 * math.sqrt(p * (1 - p) / trials)

    def test_errors(self):
        with pytest.raises(ValueError):
            recall_at_k([1, 2], 1, 0)
        with pytest.raises(KeyError):
            recall_at_k([1, 2], 3, 1)


@pytest.fixture(scope="module")
def rows(world):
    return rerank_curve(make(world), world[5], [1, 4, 24], [0.0, 0.5], timings=False)


class TestCurve:
    def test_reference_rows(self, rows):
        assert rows[0]["beta"] == "fast_only" and rows[0]["K"] == 0
        assert rows[-1]["beta"] == "slow_only" and rows[-1]["K"] == 24
        full = [r for r in rows if r["K"] == 24 and r["beta"] == 0.0][0]
        assert (full["R1"], full["R5"]) == (rows[-1]["R1"], rows[-1]["R5"])

    def test_slow_calls_equal_k(self, rows):
        assert all(r["min_slow_calls"] == r["max_slow_calls"] == r["mean_slow_calls"] == r["K"] for r in rows)

    def test_k1_matches_fast_r1(self, rows):
        assert all(r["R1"] == rows[0]["R1"] for r in rows if r["K"] == 1)

    def test_csv(self, rows, world):
        text = rows_to_csv(rows)
        assert text.splitlines()[0] == ",".join(CURVE_COLUMNS)
        assert len(text.splitlines()) == len(rows) + 1
        again = rerank_curve(make(world), world[5], [1, 4, 24], [0.0, 0.5], timings=False)
        assert rows_to_csv(again) == text

    def test_smallest_matching_k(self, rows):
        k = smallest_matching_k(rows)
        assert k is not None and k <= 24
        with pytest.raises(ValueError):
            smallest_matching_k(rows[:-1])


class TestBenchmark:
    def test_report_structure(self, world):
        p = make(world)
        before = p.slow.calls
        report = benchmark(p, world[5].captions[:4], Ks=(2, 5), warmup=1)
        # warm-up plus timed: exhaustive 24 per query, fast & slow K per query
        assert p.slow.calls - before == 5 * 24 + 5 * 2 + 5 * 5
        assert [r.mode for r in report.rows] == ["fast_only", "slow_exhaustive", "fast_slow", "fast_slow"]
        assert all(r.n == 4 and r.p95_ms >= r.median_ms for r in report.rows)
        assert report.speedup(5) > 0
        assert "speedup" in report.table() and report.to_csv().startswith("N,mode")

    def test_linear_fit(self):
        slope, intercept, r2 = linear_fit([1, 2, 4], [3.0, 5.0, 9.0])
        assert (round(slope, 12), round(intercept, 12), round(r2, 12)) == (2.0, 1.0, 1.0)

    def test_synthetic_corpus_cycles_bank(self, world):
        ds, slow, fast, *_ = world
        bank = ds.renders(ds.split_ids("test")[:3])
        p = synthetic_pipeline(fast, slow, bank, 10)
        cap = world[5].captions[0]
        h = p.slow.score(np.arange(10), cap)
        assert np.array_equal(h[[0, 3, 6, 9]], np.full(4, h[0]))
        assert np.array_equal(h[:3], SlowCorpus(slow, [0, 1, 2], bank).score(np.arange(3), cap))
