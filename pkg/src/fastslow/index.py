"""Maximum inner-product search: an exact index and a product-quantization index.

Both store float32 vectors (or codes) and rank by float64 scores. Ties are
broken by ascending scene id, which is also the row order.

Index file layout (little-endian)::

    b"FSIDX1", u8 kind (0 exact, 1 pq), u64 N, u32 e
    exact: f32[N, e] vectors
    pq:    u32 M, u32 Kc, u8 code width (1 or 2), f32[M, Kc, e/M] codebooks, codes[N, M]
    i64[N] scene ids
    u64 checksum (blake2b-64 of every preceding byte)
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .checkpoint import atomic_write_bytes, checksum64

log = logging.getLogger(__name__)

IDX_MAGIC = b"FSIDX1"
KIND_EXACT, KIND_PQ = 0, 1


class IndexFormatError(ValueError):
    pass


@dataclass
class Hits:
    """Top-k result: scene ids with their scores, best first."""
    ids: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def _sorted_by_id(ids, vectors) -> tuple[np.ndarray, np.ndarray]:
    ids = np.asarray(ids, dtype=np.int64)
    if len(np.unique(ids)) != len(ids):
        raise ValueError("index ids must be unique")
    order = np.argsort(ids, kind="stable")
    return ids[order], np.asarray(vectors)[order]


def _check_query(q, dim: int) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (dim,):
        raise ValueError(f"query dimension {q.shape} does not match index dimension {dim}")
    return q


def _check_k(k: int, n: int) -> int:
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds index size {n}")
    return int(k)


# ---------------------------------------------------------------- exact

class ExactIndex:
    def __init__(self, ids: Sequence[int], vectors: np.ndarray):
        vectors = np.asarray(vectors)
        if vectors.ndim != 2 or len(vectors) != len(ids):
            raise ValueError(f"exact index: {len(ids)} ids vs vectors {vectors.shape}")
        self.ids, v = _sorted_by_id(ids, vectors)
        self.vectors = np.ascontiguousarray(v, dtype=np.float32)
        self.vectors.flags.writeable = False
        self._wide = self.vectors.astype(np.float64)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def scores(self, q) -> np.ndarray:
        """q^T f(x) for every row, float64."""
        return self._wide @ _check_query(q, self.dim)

    def topk(self, q, k: int) -> Hits:
        s = self.scores(q)
        rows = _kernels.topk_desc(s, _check_k(k, len(self)))
        return Hits(self.ids[rows], s[rows])


def build_exact(embeddings) -> ExactIndex:
    """From an :class:`~fastslow.fast.EmbeddingMatrix` or an ``(ids, vectors)`` pair."""
    ids, vectors = (embeddings.ids, embeddings.vectors) if hasattr(embeddings, "ids") else embeddings
    return ExactIndex(ids, vectors)


def topk_exact(q, k: int, index: ExactIndex) -> Hits:
    return index.topk(q, k)


# ---------------------------------------------------------------- k-means / PQ

@dataclass
class PQTrainReport:
    seeding_error: list[float]              # per sub-space, after k-means++ seeding
    iteration_errors: list[list[float]]     # per sub-space, error after each Lloyd iteration
    final_error: list[float] = field(default_factory=list)

    def monotone(self, rtol: float = 1e-12) -> bool:
        """Error never rises between Lloyd steps, up to floating-point noise."""
        for seed, errs in zip(self.seeding_error, self.iteration_errors):
            seq = [seed, *errs]
            if any(b > a * (1 + rtol) + 1e-300 for a, b in zip(seq, seq[1:])):
                return False
        return True


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _assign(x: np.ndarray, c: np.ndarray, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid (first index on ties) and its squared distance."""
    labels = np.empty(len(x), dtype=np.int64)
    dist = np.empty(len(x))
    for s in range(0, len(x), chunk):
        d = _sq_dists(x[s:s + chunk], c)
        lab = d.argmin(axis=1)
        # recompute the winning distance directly so zero-error cases are exact
        diff = x[s:s + chunk] - c[lab]
        labels[s:s + chunk] = lab
        dist[s:s + chunk] = (diff * diff).sum(1)
    return labels, dist


def kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: each next centre is drawn with probability proportional to D^2."""
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:  # every point already coincides with a centre
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(free[rng.integers(len(free))])
        chosen.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(1))
    return x[chosen].copy()


def lloyd(x: np.ndarray, centroids: np.ndarray, iters: int) -> tuple[np.ndarray, list[float]]:
    """Fixed number of Lloyd steps; empty clusters keep their previous centre."""
    c = centroids.copy()
    errors = []
    labels, _ = _assign(x, c)
    for _ in range(iters):
        counts = np.bincount(labels, minlength=len(c))
        sums = np.zeros_like(c)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        c[nonempty] = sums[nonempty] / counts[nonempty, None]
        labels, dist = _assign(x, c)
        errors.append(float(dist.mean()))
    return c, errors


@dataclass
class Codebooks:
    centroids: np.ndarray  # (M, Kc, e/M) float32
    report: PQTrainReport

    @property
    def M(self) -> int:
        return self.centroids.shape[0]

    @property
    def Kc(self) -> int:
        return self.centroids.shape[1]


def train_pq(embeddings: np.ndarray, M: int, Kc: int, iters: int, seed: int) -> Codebooks:
    x = np.asarray(embeddings, dtype=np.float64)
    n, e = x.shape
    if M < 1 or e % M:
        raise ValueError(f"M={M} must divide the embedding dimension {e}")
    if n < Kc:
        raise ValueError(f"need at least Kc={Kc} vectors to train, got {n}")
    if Kc > 65536:
        raise ValueError("Kc above 65536 is not supported")
    sub = e // M
    rng = np.random.default_rng(seed)
    books, seeding, iteration = [], [], []
    for m in range(M):
        xs = x[:, m * sub:(m + 1) * sub]
        init = kmeans_pp(xs, Kc, rng)
        seeding.append(float(_assign(xs, init)[1].mean()))
        c, errs = lloyd(xs, init, iters)
        iteration.append(errs)
        books.append(c)
        log.info("pq sub-space %d: seeding error %.6g, final %.6g", m, seeding[-1],
                 errs[-1] if errs else seeding[-1])
    report = PQTrainReport(seeding, iteration)
    if not report.monotone():
        raise AssertionError("Lloyd iterations increased the quantization error")
    centroids = np.stack(books).astype(np.float32)
    report.final_error = [float(_assign(x[:, m * sub:(m + 1) * sub], centroids[m].astype(np.float64))[1].mean())
                          for m in range(M)]
    return Codebooks(centroids, report)


@dataclass
class CostCounter:
    """Work done on the table-lookup path of the most recent queries."""
    table_entries: int = 0
    lookups: int = 0
    queries: int = 0

    def reset(self) -> None:
        self.table_entries = self.lookups = self.queries = 0


class PQIndex:
    def __init__(self, ids: Sequence[int], codes: np.ndarray, centroids: np.ndarray):
        centroids = np.ascontiguousarray(centroids, dtype=np.float32)
        if centroids.ndim != 3:
            raise ValueError("codebooks must be (M, Kc, e/M)")
        M, Kc, _ = centroids.shape
        codes = np.asarray(codes)
        if codes.ndim != 2 or codes.shape[1] != M or len(codes) != len(ids):
            raise ValueError(f"codes {codes.shape} do not match {len(ids)} ids and M={M}")
        if codes.size and (codes.min() < 0 or codes.max() >= Kc):
            raise ValueError("codes outside [0, Kc)")
        self.ids, codes = _sorted_by_id(ids, codes)
        self.codes = np.ascontiguousarray(codes, dtype=np.uint8 if Kc <= 256 else np.uint16)
        self.centroids = centroids
        self.counter = CostCounter()

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def M(self) -> int:
        return self.centroids.shape[0]

    @property
    def Kc(self) -> int:
        return self.centroids.shape[1]

    @property
    def dim(self) -> int:
        return self.centroids.shape[0] * self.centroids.shape[2]

    def tables(self, q) -> np.ndarray:
        """tables[m, c] = q_m . centroid[m, c], shape (M, Kc), float64."""
        q = _check_query(q, self.dim).reshape(self.M, -1)
        wide = self.centroids.astype(np.float64)
        # one matrix-vector product per sub-space, the same kernel as ExactIndex.scores
        t = np.stack([wide[m] @ q[m] for m in range(self.M)])
        self.counter.table_entries += t.size
        return t

    def scores(self, q) -> np.ndarray:
        t = self.tables(q)
        self.counter.lookups += self.codes.size
        self.counter.queries += 1
        return _kernels.adc_scan(self.codes, t)

    def topk(self, q, k: int) -> Hits:
        s = self.scores(q)
        rows = _kernels.topk_desc(s, _check_k(k, len(self)))
        return Hits(self.ids[rows], s[rows])

    def reconstruct(self) -> np.ndarray:
        return np.concatenate([self.centroids[m][self.codes[:, m]] for m in range(self.M)], axis=1)


def encode_pq(vectors: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    x = np.asarray(vectors, dtype=np.float64)
    M, Kc, sub = centroids.shape
    codes = np.empty((len(x), M), dtype=np.uint8 if Kc <= 256 else np.uint16)
    for m in range(M):
        codes[:, m] = _assign(x[:, m * sub:(m + 1) * sub], centroids[m].astype(np.float64))[0]
    return codes


def build_pq(embeddings, M: int, Kc: int, iters: int, seed: int) -> PQIndex:
    ids, vectors = (embeddings.ids, embeddings.vectors) if hasattr(embeddings, "ids") else embeddings
    books = train_pq(vectors, M, Kc, iters, seed)
    index = PQIndex(ids, encode_pq(vectors, books.centroids), books.centroids)
    index.report = books.report
    return index


def topk_pq(q, k: int, index: PQIndex) -> Hits:
    return index.topk(q, k)


# ---------------------------------------------------------------- persistence

def encode_index(index: ExactIndex | PQIndex) -> bytes:
    n = len(index)
    if isinstance(index, ExactIndex):
        body = [IDX_MAGIC, struct.pack("<BQI", KIND_EXACT, n, index.dim),
                index.vectors.astype("<f4").tobytes()]
    else:
        width = index.codes.dtype.itemsize
        body = [IDX_MAGIC, struct.pack("<BQI", KIND_PQ, n, index.dim),
                struct.pack("<IIB", index.M, index.Kc, width),
                index.centroids.astype("<f4").tobytes(),
                index.codes.astype("<u1" if width == 1 else "<u2").tobytes()]
    body.append(index.ids.astype("<i8").tobytes())
    blob = b"".join(body)
    return blob + struct.pack("<Q", checksum64([blob]))


def decode_index(blob: bytes) -> ExactIndex | PQIndex:
    if not blob.startswith(IDX_MAGIC):
        raise IndexFormatError("not an index file: bad magic")
    if len(blob) < len(IDX_MAGIC) + 13 + 8:
        raise IndexFormatError("index file truncated")
    body, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if checksum64([body]) != stored:
        raise IndexFormatError("index checksum mismatch")
    pos = len(IDX_MAGIC)
    kind, n, e = struct.unpack_from("<BQI", body, pos)
    pos += 13
    try:
        if kind == KIND_EXACT:
            vecs = np.frombuffer(body, "<f4", n * e, pos).reshape(n, e)
            pos += 4 * n * e
            ids = np.frombuffer(body, "<i8", n, pos)
            return ExactIndex(ids.copy(), vecs.copy())
        if kind == KIND_PQ:
            M, Kc, width = struct.unpack_from("<IIB", body, pos)
            pos += 9
            cents = np.frombuffer(body, "<f4", M * Kc * (e // M), pos).reshape(M, Kc, e // M)
            pos += 4 * cents.size
            codes = np.frombuffer(body, "<u1" if width == 1 else "<u2", n * M, pos).reshape(n, M)
            pos += width * n * M
            ids = np.frombuffer(body, "<i8", n, pos)
            return PQIndex(ids.copy(), codes.copy(), cents.copy())
    except (ValueError, struct.error) as exc:
        raise IndexFormatError(f"index payload malformed: {exc}") from None
    raise IndexFormatError(f"unknown index kind {kind}")


def save_index(path, index) -> None:
    atomic_write_bytes(path, encode_index(index))


def load_index(path) -> ExactIndex | PQIndex:
    return decode_index(Path(path).read_bytes())
