import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fastslow import _kernels
from fastslow.fast import EmbeddingMatrix
from fastslow.index import (ExactIndex, IndexFormatError, PQIndex, build_exact, build_pq, decode_index,
                            encode_index, encode_pq, kmeans_pp, load_index, lloyd, save_index,
                            topk_exact, topk_pq, train_pq)


def brute_force_topk(ids, vectors, q, k):
    """Loop over every row; sort by (-score, id)."""
    scored = []
    for sid, v in zip(ids, vectors):
        s = 0.0
        for a, b in zip(v.tolist(), q.tolist()):
            s += float(np.float32(a)) * b
        scored.append((-s, int(sid)))
    scored.sort()
    return [sid for _, sid in scored[:k]]


@pytest.fixture(scope="module")
def corpus():
    rng = np.random.default_rng(0)
    ids = rng.permutation(5000)[:1000] + 10
    return ids, rng.normal(size=(1000, 16)).astype(np.float32)


class TestExact:
    def test_matches_brute_force_for_all_k(self, corpus):
        ids, vecs = corpus
        index = build_exact((ids, vecs))
        q = np.random.default_rng(1).normal(size=16)
        full = brute_force_topk(ids, vecs, q, len(ids))
        for k in (0, 1, 2, 10, 137, 999, 1000):
            assert topk_exact(q, k, index).ids.tolist() == full[:k]

    def test_orthogonal_basis_top1(self):
        e = 8
        index = ExactIndex(np.arange(e) * 3, np.eye(e))
        for i in range(e):
            hit = index.topk(np.eye(e)[i], 1)
            assert hit.ids.tolist() == [3 * i] and hit.scores[0] == 1.0

    def test_ties_broken_by_ascending_id(self):
        index = ExactIndex([9, 2, 5, 7], np.ones((4, 3)))
        assert index.topk(np.ones(3), 4).ids.tolist() == [2, 5, 7, 9]

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 60), st.integers(0, 2**31))
    def test_prefix_property(self, n, seed):
        rng = np.random.default_rng(seed)
        # small integer grid makes ties common
        index = ExactIndex(rng.permutation(n), rng.integers(-2, 3, size=(n, 3)))
        q = rng.integers(-2, 3, size=3)
        full = index.topk(q, n)
        for k in range(n + 1):
            part = index.topk(q, k)
            assert part.ids.tolist() == full.ids[:k].tolist()
            assert np.all(np.diff(part.scores) <= 0)

    def test_accepts_embedding_matrix(self, corpus):
        ids, vecs = corpus
        a = build_exact(EmbeddingMatrix(ids, vecs))
        assert np.array_equal(a.ids, np.sort(ids))

    def test_errors(self, corpus):
        index = build_exact(corpus)
        with pytest.raises(ValueError, match="dimension"):
            index.topk(np.ones(15), 3)
        with pytest.raises(ValueError, match="exceeds"):
            index.topk(np.ones(16), 1001)
        with pytest.raises(ValueError, match="non-negative"):
            index.topk(np.ones(16), -1)
        with pytest.raises(ValueError, match="unique"):
            ExactIndex([1, 1], np.ones((2, 2)))


class TestKMeans:
    def test_zero_iterations_is_seeding(self, corpus):
        _, vecs = corpus
        books = train_pq(vecs, 4, 16, 0, seed=5)
        x, rng = vecs.astype(np.float64), np.random.default_rng(5)
        for m in range(4):
            seeded = kmeans_pp(x[:, 4 * m:4 * m + 4], 16, rng)
            assert np.array_equal(books.centroids[m], seeded.astype(np.float32))
        assert books.report.iteration_errors == [[]] * 4
        assert books.report.final_error == books.report.seeding_error

    def test_kc_equal_to_n_has_zero_error(self):
        # float32 input, so storing the codebooks as float32 loses nothing
        x = np.random.default_rng(2).normal(size=(32, 6)).astype(np.float32)
        books = train_pq(x, 3, 32, 3, seed=0)
        assert books.report.seeding_error == [0.0, 0.0, 0.0]
        assert books.report.final_error == [0.0, 0.0, 0.0]

    def test_lloyd_never_increases_error(self, corpus):
        _, vecs = corpus
        report = train_pq(vecs, 2, 32, 15, seed=1).report
        assert report.monotone()
        for seed, errs in zip(report.seeding_error, report.iteration_errors):
            assert errs[-1] < seed

    def test_empty_cluster_keeps_centre(self):
        x = np.array([[0.0], [0.1], [0.2]])
        c, _ = lloyd(x, np.array([[0.1], [50.0]]), 2)
        assert c[1, 0] == 50.0

    def test_duplicate_points(self):
        x = np.zeros((10, 2))
        x[5:] = 1.0
        books = train_pq(x, 1, 4, 2, seed=0)
        assert books.report.final_error == [0.0]

    def test_argument_errors(self, corpus):
        _, vecs = corpus
        with pytest.raises(ValueError, match="divide"):
            train_pq(vecs, 5, 8, 1, 0)
        with pytest.raises(ValueError, match="at least"):
            train_pq(vecs[:10], 4, 16, 1, 0)


@pytest.fixture(scope="module")
def pq(corpus):
    return build_pq(corpus, M=4, Kc=32, iters=5, seed=3)


class TestPQ:
    def test_scores_equal_reconstructed_dot(self, pq):
        q = np.random.default_rng(4).normal(size=16)
        recon = pq.reconstruct().astype(np.float64)
        expected = np.array([sum(recon[i, d] * q[d] for d in range(16)) for i in range(len(pq))])
        assert np.allclose(pq.scores(q), expected, rtol=0, atol=1e-12)

    def test_codes_are_nearest_centroid(self, corpus, pq):
        ids, vecs = corpus
        order = np.argsort(ids)
        x = vecs[order].astype(np.float64)
        for m in range(pq.M):
            sub = x[:, 4 * m:4 * m + 4]
            d = ((sub[:, None, :] - pq.centroids[m].astype(np.float64)[None]) ** 2).sum(-1)
            best = d[np.arange(len(x)), pq.codes[:, m]]
            assert np.all(best <= d.min(1) + 1e-9)

    def test_lossless_matches_exact(self):
        rng = np.random.default_rng(6)
        for n, e in ((300, 16), (37, 5)):
            ids = rng.permutation(n)
            vecs = rng.normal(size=(n, e)).astype(np.float32)
            pq = PQIndex(ids, np.arange(n)[:, None], vecs[None])
            ex = ExactIndex(ids, vecs)
            q = rng.normal(size=e)
            assert np.array_equal(pq.scores(q), ex.scores(q))
            a, b = pq.topk(q, n), ex.topk(q, n)
            assert np.array_equal(a.ids, b.ids) and np.array_equal(a.scores, b.scores)

    def test_trained_lossless_with_single_subspace(self):
        rng = np.random.default_rng(7)
        vecs = rng.normal(size=(40, 6)).astype(np.float32)
        pq = build_pq((np.arange(40), vecs), M=1, Kc=40, iters=0, seed=0)
        q = rng.normal(size=6)
        assert np.array_equal(pq.topk(q, 40).ids, ExactIndex(np.arange(40), vecs).topk(q, 40).ids)

    def test_cost_independent_of_dimension(self):
        rng = np.random.default_rng(8)
        counts = []
        for e in (8, 32, 128):
            vecs = rng.normal(size=(200, e))
            pq = build_pq((np.arange(200), vecs), M=4, Kc=16, iters=1, seed=0)
            pq.counter.reset()
            topk_pq(rng.normal(size=e), 5, pq)
            counts.append((pq.counter.lookups, pq.counter.table_entries, pq.counter.queries))
        assert counts == [(800, 64, 1)] * 3

    def test_uint16_codes(self):
        rng = np.random.default_rng(9)
        vecs = rng.normal(size=(300, 4))
        pq = build_pq((np.arange(300), vecs), M=2, Kc=257, iters=1, seed=0)
        assert pq.codes.dtype == np.uint16
        q = rng.normal(size=4)
        assert np.allclose(pq.scores(q), pq.reconstruct().astype(np.float64) @ q, atol=1e-12)

    def test_encode_pq_matches_build(self, corpus, pq):
        ids, vecs = corpus
        order = np.argsort(ids)
        assert np.array_equal(encode_pq(vecs[order], pq.centroids), pq.codes)


class TestKernels:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 300), st.integers(1, 6), st.sampled_from([4, 256, 300]), st.integers(0, 2**31))
    def test_backends_agree_bitwise(self, n, M, Kc, seed):
        rng = np.random.default_rng(seed)
        codes = rng.integers(0, Kc, size=(n, M)).astype(np.uint8 if Kc <= 256 else np.uint16)
        tables = rng.normal(size=(M, Kc))
        impls = _kernels.backends()
        ref = impls["python"].adc_scan(codes, tables)
        for name, mod in impls.items():
            assert np.array_equal(mod.adc_scan(codes, tables), ref), name
        scores = np.round(ref, 1)  # rounding creates ties
        for k in {0, n // 2, n}:
            want = impls["python"].topk_desc(scores, k)
            for name, mod in impls.items():
                assert np.array_equal(mod.topk_desc(scores, k), want), name

    def test_topk_rejects_nan(self):
        with pytest.raises(ValueError, match="finite"):
            _kernels.topk_desc(np.array([1.0, np.nan]), 1)


class TestPersistence:
    def test_round_trip_both_kinds(self, corpus, tmp_path):
        exact = build_exact(corpus)
        pq = build_pq(corpus, M=4, Kc=8, iters=2, seed=0)
        q = np.random.default_rng(0).normal(size=16)
        for name, index in (("e.idx", exact), ("p.idx", pq)):
            save_index(tmp_path / name, index)
            back = load_index(tmp_path / name)
            assert type(back) is type(index)
            a, b = back.topk(q, 20), index.topk(q, 20)
            assert np.array_equal(a.ids, b.ids) and np.array_equal(a.scores, b.scores)
            assert (tmp_path / name).read_bytes()[:6] == b"FSIDX1"

    def test_corruption_detected(self, corpus):
        blob = bytearray(encode_index(build_exact(corpus)))
        blob[100] ^= 1
        with pytest.raises(IndexFormatError, match="checksum"):
            decode_index(bytes(blob))
        with pytest.raises(IndexFormatError, match="magic"):
            decode_index(b"NOTIDX" + bytes(blob[6:]))
        with pytest.raises(IndexFormatError):
            decode_index(bytes(blob[:20]))
