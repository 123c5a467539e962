import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fastslow import autodiff as ad
from fastslow.autodiff import Tensor
from fastslow.data import DataConfig, generate_dataset
from fastslow.encoders import DualEncoderConfig, EncoderConfig
from fastslow.fast import (EmbeddingFormatError, EmbeddingMatrix, FastModel, decode_embeddings,
                           embed_corpus, encode_embeddings, load_embeddings, nce_from_scores,
                           nce_loss, save_embeddings, train_fast)
from fastslow.training import TrainConfig

SMALL = DualEncoderConfig(EncoderConfig(widths=(4, 4, 8), d=8), embed_dim=8)


def straight_line_nce(f, g):
    B = len(f)
    S = [[sum(f[i][k] * g[j][k] for k in range(len(f[0]))) for j in range(B)] for i in range(B)]
    total = 0.0
    for i in range(B):
        terms = [S[i][i]] + [S[j][i] for j in range(B) if j != i] + [S[i][j] for j in range(B) if j != i]
        total -= S[i][i] - math.log(sum(math.exp(t) for t in terms))
    return total


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(DataConfig(n_train=24, n_val=4, n_test=10), seed=3)


class TestNCE:
    def test_single_pair_is_zero(self):
        f = Tensor(np.array([[0.5, -2.0, 1.0]]))
        assert nce_loss(f, Tensor(np.array([[3.0, 1.0, -1.0]]))).item() == 0.0

    def test_negatives_disabled_is_zero(self):
        rng = np.random.default_rng(0)
        assert nce_loss(Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 3))),
                        negatives=False).item() == 0.0

    def test_one_tied_negative_is_log2(self):
        loss = nce_from_scores(Tensor(np.array([1.7])), Tensor(np.array([[1.7]])))
        assert abs(loss.item() - math.log(2)) < 1e-15

    def test_three_pairs_straight_line(self):
        rng = np.random.default_rng(1)
        f, g = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        assert abs(nce_loss(Tensor(f), Tensor(g)).item() - straight_line_nce(f.tolist(), g.tolist())) < 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 2**31))
    def test_positive_and_permutation_invariant(self, B, seed):
        rng = np.random.default_rng(seed)
        f, g = rng.normal(size=(B, 3)), rng.normal(size=(B, 3))
        loss = nce_loss(Tensor(f), Tensor(g)).item()
        assert loss > 0
        perm = rng.permutation(B)
        assert abs(nce_loss(Tensor(f[perm]), Tensor(g[perm])).item() - loss) < 1e-12

    def test_stable_for_large_scores(self):
        f = np.array([[100.0, 0.0], [0.0, 100.0]])
        assert math.isfinite(nce_loss(Tensor(f), Tensor(f * 10)).item())

    def test_shape_errors(self):
        with pytest.raises(ad.ShapeError):
            nce_loss(Tensor(np.ones((3, 2))), Tensor(np.ones((2, 2))))
        with pytest.raises(ValueError):
            nce_loss(Tensor(np.ones((0, 2))), Tensor(np.ones((0, 2))))

    def test_gradient_three_pairs(self):
        cfg = DualEncoderConfig(EncoderConfig(raster=8, widths=(1, 1, 1), d=2), vocab_size=6, embed_dim=3)
        model = FastModel.init(cfg, 2)
        rng = np.random.default_rng(3)
        for name, t in model.params.params.items():
            if name.endswith("b"):
                t.data = rng.normal(scale=0.5, size=t.shape)
        renders = rng.random((3, 8, 8, 3))
        caps = [(1, 4, 2), (1, 5, 4, 2), (1, 3, 5, 2)]
        report = ad.grad_check(lambda: nce_loss(model.embed_images(renders), model.embed_texts(caps)),
                               model.parameters())
        assert report.passed, str(report)


class TestTrainFast:
    def test_zero_steps(self, ds):
        model, _ = train_fast(ds, SMALL, TrainConfig(steps=0, seed=9))
        init = FastModel.init(SMALL, 9)
        assert all(np.array_equal(v, init.state_dict()[k]) for k, v in model.state_dict().items())

    def test_seed_determinism(self, ds):
        cfg = TrainConfig(steps=5, batch_size=6, warmup=1, seed=1, timings=False)
        a, la = train_fast(ds, SMALL, cfg)
        b, lb = train_fast(ds, SMALL, cfg)
        assert la.to_csv() == lb.to_csv()
        assert all(np.array_equal(v, b.state_dict()[k]) for k, v in a.state_dict().items())

    def test_loss_falls(self, ds):
        _, log = train_fast(ds, SMALL, TrainConfig(steps=80, batch_size=8, lr=5e-3, warmup=5))
        losses = log.losses()
        assert losses[-20:].mean() < losses[:20].mean()


class TestEmbedCorpus:
    def test_rows_follow_ascending_ids(self, ds):
        model = FastModel.init(SMALL, 0)
        ids = ds.split_ids("test")[::-1]
        m = embed_corpus(ds, ids, model, chunk=3)
        assert list(m.ids) == sorted(ids)
        for row, sid in zip(m.vectors, m.ids):
            direct = model.embed_images(ds.render(int(sid))[None]).data[0].astype(np.float32)
            assert np.array_equal(row, direct)

    def test_empty_split(self, ds):
        m = embed_corpus(ds, [], FastModel.init(SMALL, 0))
        assert m.vectors.shape == (0, 8) and len(m) == 0

    def test_checksum_stable(self, ds):
        a = embed_corpus(ds, "test", FastModel.init(SMALL, 0))
        b = embed_corpus(ds, "test", FastModel.init(SMALL, 0))
        assert a.checksum() == b.checksum()
        assert a.checksum() != embed_corpus(ds, "test", FastModel.init(SMALL, 1)).checksum()

    def test_file_round_trip(self, ds, tmp_path):
        m = embed_corpus(ds, "test", FastModel.init(SMALL, 0))
        save_embeddings(tmp_path / "e.bin", m)
        back = load_embeddings(tmp_path / "e.bin")
        assert np.array_equal(back.vectors, m.vectors) and np.array_equal(back.ids, m.ids)
        raw = (tmp_path / "e.bin").read_bytes()
        assert raw[:6] == b"FSEMB1"

    def test_bad_files(self):
        m = EmbeddingMatrix(np.arange(3), np.ones((3, 2)))
        blob = encode_embeddings(m)
        with pytest.raises(EmbeddingFormatError, match="magic"):
            decode_embeddings(b"XXXXXX" + blob[6:])
        with pytest.raises(EmbeddingFormatError, match="expected"):
            decode_embeddings(blob[:-3])
