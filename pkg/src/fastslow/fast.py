"""The Fast dual encoder: NCE training and corpus embedding.

Scores are plain dot products f(x)^T g(y), so the image side can be
precomputed and indexed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import atomic_write_bytes, checksum64
from .data import Dataset
from .encoders import DualEncoderConfig, DualEncoderParams, embed_image, embed_text
from .slow import sample_batch
from .training import StepResult, TrainConfig, TrainLog, run

EMB_MAGIC = b"FSEMB1"
NEG_FILL = -1e30  # exp underflows to exactly 0 after max-subtraction


class EmbeddingFormatError(ValueError):
    pass


def nce_from_scores(positive: Tensor, negatives: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """-sum_i log(e^{s_i} / (e^{s_i} + sum_k e^{n_ik})); ``mask`` marks entries that are not negatives."""
    if positive.ndim != 1 or negatives.ndim != 2 or negatives.shape[0] != positive.shape[0]:
        raise ad.ShapeError(f"nce: positive {positive.shape} vs negatives {negatives.shape}")
    if positive.shape[0] < 1:
        raise ValueError("nce: empty batch")
    if mask is not None:
        negatives = ad.masked_fill(negatives, mask, NEG_FILL)
    B = positive.shape[0]
    logits = ad.concat([ad.reshape(positive, (B, 1)), negatives], axis=1)
    picked = ad.gather_last(ad.log_softmax(logits, axis=1), np.zeros(B, dtype=np.int64))
    return ad.neg(ad.sum(picked))


def in_batch_scores(f: Tensor, g: Tensor) -> Tensor:
    """S[i, j] = f(x_i)^T g(y_j)."""
    return ad.matmul(f, ad.transpose(g, (1, 0)))


def nce_loss(f: Tensor, g: Tensor, negatives: bool = True) -> Tensor:
    """L_DE with N_i = {(x_j, y_i)} u {(x_i, y_j)} over j != i in the batch."""
    if f.ndim != 2 or f.shape != g.shape:
        raise ad.ShapeError(f"nce: image embeddings {f.shape} vs text embeddings {g.shape}")
    B = f.shape[0]
    if B < 1:
        raise ValueError("nce: batch of size < 1")
    S = in_batch_scores(f, g)
    eye = np.eye(B, dtype=bool)
    pos = ad.sum(ad.mul(S, eye.astype(np.float64)), axis=1)
    # row i of S^T holds f(x_j)^T g(y_i): images paired with caption i
    neg = ad.concat([ad.transpose(S, (1, 0)), S], axis=1)
    mask = np.concatenate([eye, eye], axis=1)
    if not negatives:
        mask = np.ones_like(mask)
    return nce_from_scores(pos, neg, mask)


# ---------------------------------------------------------------- model + training

class FastModel:
    def __init__(self, config: DualEncoderConfig, rng: np.random.Generator):
        self.config = config
        self.params = DualEncoderParams(config, rng)

    @classmethod
    def init(cls, config: DualEncoderConfig, seed: int) -> "FastModel":
        return cls(config, np.random.default_rng(seed))

    def parameters(self) -> list[Tensor]:
        return self.params.parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        return self.params.state_dict()

    def load_state_dict(self, arrays) -> None:
        self.params.load_state_dict(arrays)

    def embed_images(self, renders) -> Tensor:
        return embed_image(renders, self.params)

    def embed_texts(self, captions: Sequence[Sequence[int]]) -> Tensor:
        return embed_text(captions, self.params)


def train_fast(dataset: Dataset, model_config: DualEncoderConfig, config: TrainConfig,
               init_seed: int | None = None) -> tuple[FastModel, TrainLog]:
    model = FastModel.init(model_config, config.seed if init_seed is None else init_seed)
    train_ids = dataset.split_ids("train")

    def sample(rng):
        ids, caps = sample_batch(rng, dataset, train_ids, config.batch_size)
        return ids.tolist(), (ids, caps)

    def loss(batch):
        ids, caps = batch
        f = model.embed_images(dataset.renders(ids))
        g = model.embed_texts([c.tokens for c in caps])
        return StepResult(ad.scale(nce_loss(f, g), 1.0 / len(ids)))

    return model, run(model.parameters(), sample, loss, config)


# ---------------------------------------------------------------- corpus embeddings

@dataclass
class EmbeddingMatrix:
    """Rows are f(x) for ``ids`` in ascending scene-id order, stored as float32."""
    ids: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or len(self.ids) != len(self.vectors):
            raise ValueError(f"embedding matrix: {len(self.ids)} ids vs vectors {self.vectors.shape}")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def checksum(self) -> int:
        return checksum64([self.vectors.astype("<f4").tobytes(), self.ids.astype("<i8").tobytes()])


def embed_corpus(dataset: Dataset, ids: Sequence[int] | str, model: FastModel,
                 chunk: int = 64) -> EmbeddingMatrix:
    if isinstance(ids, str):
        ids = dataset.split_ids(ids)
    ids = np.sort(np.asarray(ids, dtype=np.int64))
    e = model.config.embed_dim
    rows = [np.zeros((0, e))]
    for start in range(0, len(ids), chunk):
        part = ids[start:start + chunk]
        rows.append(model.embed_images(dataset.renders(part.tolist())).data)
    return EmbeddingMatrix(ids, np.concatenate(rows))


def encode_embeddings(m: EmbeddingMatrix) -> bytes:
    """``FSEMB1``, u64 count, u32 dim, float32 rows, then int64 scene ids; little-endian."""
    return (EMB_MAGIC + struct.pack("<QI", len(m), m.dim)
            + m.vectors.astype("<f4").tobytes() + m.ids.astype("<i8").tobytes())


def decode_embeddings(blob: bytes) -> EmbeddingMatrix:
    head = len(EMB_MAGIC) + 12
    if not blob.startswith(EMB_MAGIC) or len(blob) < head:
        raise EmbeddingFormatError("not an embedding file: bad magic")
    n, dim = struct.unpack_from("<QI", blob, len(EMB_MAGIC))
    expected = head + 4 * n * dim + 8 * n
    if len(blob) != expected:
        raise EmbeddingFormatError(f"embedding file has {len(blob)} bytes, expected {expected}")
    vecs = np.frombuffer(blob, dtype="<f4", count=n * dim, offset=head).reshape(n, dim)
    ids = np.frombuffer(blob, dtype="<i8", count=n, offset=head + 4 * n * dim)
    return EmbeddingMatrix(ids.copy(), vecs.copy())


def save_embeddings(path, m: EmbeddingMatrix) -> None:
    atomic_write_bytes(path, encode_embeddings(m))


def load_embeddings(path) -> EmbeddingMatrix:
    return decode_embeddings(Path(path).read_bytes())
