"""Fast & Slow query path, retrieval metrics and the latency benchmark.

A query embeds the caption with the fast text encoder, takes the top K items
from the index, rescores them with the slow captioning model and orders the
re-ranked block by ``h + beta * f^T g``. Items outside the block follow in fast
order, so recall@k is defined for every k.
"""

from __future__ import annotations

import csv
import io
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor
from .data import BOS, EOS, Caption, Dataset
from .fast import FastModel
from .index import ExactIndex, Hits, PQIndex
from .slow import CrossMemory, SlowModel, caption_score


class EmptyCaption(ValueError):
    pass


def caption_tokens(caption: Caption | Sequence[int]) -> tuple[int, ...]:
    tokens = tuple(int(t) for t in (caption.tokens if isinstance(caption, Caption) else caption))
    if len(tokens) >= 2 and tokens[0] == BOS and tokens[-1] == EOS:
        tokens = tokens[1:-1]
    if not tokens:
        raise EmptyCaption("caption has no words")
    return (BOS, *tokens, EOS)


# ---------------------------------------------------------------- slow stage

class SlowCorpus:
    """Slow-model view of a corpus; row r belongs to ``ids[r]`` (ascending).

    ``bank`` holds the renders that rows draw from: row r uses ``bank[r % len(bank)]``.
    With ``precompute`` the cross-attention keys and values of every bank entry
    are built once; otherwise the image features are recomputed on each call.
    ``calls`` counts h(x, y) evaluations.
    """

    def __init__(self, model: SlowModel, ids: Sequence[int], bank: np.ndarray,
                 precompute: bool = True, chunk: int = 128):
        self.model = model
        self.ids = np.asarray(ids, dtype=np.int64)
        if np.any(np.diff(self.ids) <= 0):
            raise ValueError("corpus ids must be strictly ascending")
        self.bank = np.asarray(bank)
        if len(self.bank) == 0 and len(self.ids):
            raise ValueError("empty render bank")
        self.precompute, self.chunk = precompute, chunk
        self.calls = 0
        self._memory: tuple[list, list] | None = None
        if precompute:
            self._memory = self._build_memory(np.arange(len(self.bank)))

    @classmethod
    def from_dataset(cls, model: SlowModel, dataset: Dataset, ids: Sequence[int] | str,
                     precompute: bool = True) -> "SlowCorpus":
        ids = dataset.split_ids(ids) if isinstance(ids, str) else ids
        ids = np.sort(np.asarray(ids, dtype=np.int64))
        return cls(model, ids, dataset.renders(ids.tolist()), precompute)

    def __len__(self) -> int:
        return len(self.ids)

    def _build_memory(self, bank_rows: np.ndarray) -> tuple[list, list]:
        fwd, bwd = [], []
        for s in range(0, len(bank_rows), self.chunk):
            mem_f, mem_b = self.model.memories(self.model.visual(self.bank[bank_rows[s:s + self.chunk]]))
            fwd.append([(k.data, v.data) for k, v in mem_f.layers])
            bwd.append([(k.data, v.data) for k, v in mem_b.layers])

        def join(parts):
            n_layers = len(parts[0]) if parts else 0
            return [(np.concatenate([p[l][0] for p in parts]), np.concatenate([p[l][1] for p in parts]))
                    for l in range(n_layers)]
        return join(fwd), join(bwd)

    def _memories(self, bank_rows: np.ndarray) -> tuple[CrossMemory, CrossMemory]:
        if self._memory is None:
            return self.model.memories(self.model.visual(self.bank[bank_rows]))
        f, b = self._memory
        return (CrossMemory([(Tensor(k[bank_rows]), Tensor(v[bank_rows])) for k, v in f]),
                CrossMemory([(Tensor(k[bank_rows]), Tensor(v[bank_rows])) for k, v in b]))

    def score(self, rows: np.ndarray, caption: Sequence[int]) -> np.ndarray:
        """h(x_r, y) for each corpus row r, in the order given."""
        rows = np.asarray(rows, dtype=np.int64)
        out = np.empty(len(rows))
        for s in range(0, len(rows), self.chunk):
            part = rows[s:s + self.chunk]
            mem = self._memories(part % len(self.bank))
            out[s:s + len(part)] = caption_score(mem, [caption] * len(part), self.model.decoder).data
        self.calls += len(rows)
        return out


# ---------------------------------------------------------------- results

@dataclass
class RankedList:
    """Final ordering of the corpus for one query.

    The first ``n_reranked`` entries are the re-ranked block, ordered by
    ``combined`` descending then id ascending; the rest follow in fast order.
    ``slow`` and ``combined`` are NaN outside the block.
    """
    ids: np.ndarray
    fast: np.ndarray
    slow: np.ndarray
    combined: np.ndarray
    n_reranked: int

    def __len__(self) -> int:
        return len(self.ids)

    def stage(self, position: int) -> str:
        return "rerank" if position < self.n_reranked else "fast"

    def position(self, scene_id: int) -> int:
        hit = np.flatnonzero(self.ids == scene_id)
        if not len(hit):
            raise KeyError(f"scene {scene_id} not in ranking")
        return int(hit[0])


@dataclass
class QueryStats:
    slow_calls: int
    probe_ms: float
    rerank_ms: float
    total_ms: float


def order_desc(scores: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Permutation sorting by score descending, then id ascending."""
    return np.lexsort((ids, -np.asarray(scores, dtype=np.float64)))


def combine(hits: Hits, slow: np.ndarray, K: int, beta: float) -> RankedList:
    """Re-order the first K hits by h + beta * fast; keep the tail as it is."""
    n = len(hits)
    combined = slow + beta * hits.scores[:K]
    order = order_desc(combined, hits.ids[:K])
    tail = np.full(n - K, np.nan)
    return RankedList(ids=np.concatenate([hits.ids[:K][order], hits.ids[K:]]),
                      fast=np.concatenate([hits.scores[:K][order], hits.scores[K:]]),
                      slow=np.concatenate([slow[order], tail]),
                      combined=np.concatenate([combined[order], tail]),
                      n_reranked=K)


# ---------------------------------------------------------------- pipeline

class RetrievalPipeline:
    def __init__(self, fast: FastModel, index: ExactIndex | PQIndex, slow: SlowCorpus,
                 K: int = 10, beta: float = 0.0):
        if not np.array_equal(index.ids, slow.ids):
            raise ValueError("index and slow corpus must cover the same scene ids")
        if not math.isfinite(beta):
            raise ValueError(f"beta must be finite, got {beta}")
        self.fast, self.index, self.slow = fast, index, slow
        self.K = self.clamp_k(K)
        self.beta = float(beta)

    def __len__(self) -> int:
        return len(self.index)

    def clamp_k(self, K: int) -> int:
        if K < 1:
            raise ValueError(f"K must be at least 1, got {K}")
        if K > len(self):
            warnings.warn(f"K={K} exceeds corpus size {len(self)}; using K={len(self)}", stacklevel=3)
            return len(self)
        return int(K)

    def text_embedding(self, caption) -> np.ndarray:
        return self.fast.embed_texts([caption_tokens(caption)]).data[0]

    def fast_hits(self, caption) -> Hits:
        return self.index.topk(self.text_embedding(caption), len(self))

    def query(self, caption, K: int | None = None, beta: float | None = None) -> tuple[RankedList, QueryStats]:
        lists, stats = self.query_betas(caption, [self.beta if beta is None else beta], K)
        return lists[0], stats

    def query_betas(self, caption, betas: Sequence[float],
                    K: int | None = None) -> tuple[list[RankedList], QueryStats]:
        """One fast probe and one slow pass, ordered under each beta in turn."""
        K = self.K if K is None else self.clamp_k(K)
        tokens = caption_tokens(caption)
        t0 = time.perf_counter()
        hits = self.fast_hits(tokens)
        t1 = time.perf_counter()
        before = self.slow.calls
        cand = hits.ids[:K]
        rows = np.searchsorted(self.slow.ids, cand)
        by_id = np.argsort(cand, kind="stable")
        slow = np.empty(K)
        slow[by_id] = self.slow.score(rows[by_id], tokens)
        lists = [combine(hits, slow, K, b) for b in betas]
        t2 = time.perf_counter()
        stats = QueryStats(self.slow.calls - before, (t1 - t0) * 1e3, (t2 - t1) * 1e3, (t2 - t0) * 1e3)
        return lists, stats

    def fast_only(self, caption) -> tuple[RankedList, QueryStats]:
        t0 = time.perf_counter()
        hits = self.fast_hits(caption)
        ms = (time.perf_counter() - t0) * 1e3
        nan = np.full(len(hits), np.nan)
        return RankedList(hits.ids, hits.scores, nan, nan.copy(), 0), QueryStats(0, ms, 0.0, ms)

    def slow_only(self, caption) -> tuple[RankedList, QueryStats]:
        """Exhaustive slow scoring of every corpus item."""
        tokens = caption_tokens(caption)
        t0 = time.perf_counter()
        before = self.slow.calls
        h = self.slow.score(np.arange(len(self.slow)), tokens)
        order = order_desc(h, self.slow.ids)
        ms = (time.perf_counter() - t0) * 1e3
        nan = np.full(len(h), np.nan)
        ranked = RankedList(self.slow.ids[order], nan, h[order], h[order].copy(), len(h))
        return ranked, QueryStats(self.slow.calls - before, 0.0, ms, ms)


# ---------------------------------------------------------------- metrics

def recall_at_k(ranking: RankedList | Sequence[int], gold: int, k: int) -> int:
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    ids = ranking.ids if isinstance(ranking, RankedList) else np.asarray(ranking)
    hit = np.flatnonzero(ids == gold)
    if not len(hit):
        raise KeyError(f"gold scene {gold} not in the ranking")
    return int(hit[0] < k)


def mean_recall(rankings: Sequence, golds: Sequence[int], k: int) -> float:
    if len(rankings) != len(golds):
        raise ValueError("one gold id per ranking required")
    if not len(rankings):
        raise ValueError("no queries")
    return float(np.mean([recall_at_k(r, g, k) for r, g in zip(rankings, golds)]))


@dataclass
class QuerySet:
    """Queries with their gold scene ids."""
    captions: list[tuple[int, ...]]
    golds: list[int]

    @classmethod
    def gold_captions(cls, dataset: Dataset, ids: Sequence[int] | str) -> "QuerySet":
        ids = dataset.split_ids(ids) if isinstance(ids, str) else list(ids)
        return cls([dataset.gold_caption(i).tokens for i in ids], [int(i) for i in ids])

    def __len__(self) -> int:
        return len(self.golds)


# ---------------------------------------------------------------- re-rank curve

CURVE_COLUMNS = ("K", "beta", "R1", "R5", "mean_slow_calls", "min_slow_calls", "max_slow_calls", "mean_wall_ms")


def rerank_curve(pipeline: RetrievalPipeline, queries: QuerySet, Ks: Sequence[int],
                 betas: Sequence[float], references: bool = True, timings: bool = True) -> list[dict]:
    """R@1 and R@5 for every (K, beta), plus fast-only and slow-only rows.

    For each K the slow scores are computed once per query and shared by all
    betas, so the wall time of a row is that of a query at its K. With
    ``timings=False`` wall times are written as 0.0 and the rows are reproducible.
    """
    def _curve_row(K, beta, rankings, stats, golds) -> dict:
        wall = float(np.mean([s.total_ms for s in stats])) if timings else 0.0
        calls = [s.slow_calls for s in stats]
        return {"K": K, "beta": beta,
                "R1": mean_recall(rankings, golds, 1), "R5": mean_recall(rankings, golds, 5),
                "mean_slow_calls": float(np.mean(calls)), "min_slow_calls": min(calls),
                "max_slow_calls": max(calls), "mean_wall_ms": wall}

    rows = []
    if references:
        got = [pipeline.fast_only(c) for c in queries.captions]
        rows.append(_curve_row(0, "fast_only", [r for r, _ in got], [s for _, s in got], queries.golds))
    for K in Ks:
        K = pipeline.clamp_k(K)
        per_beta = [[] for _ in betas]
        stats = []
        for c in queries.captions:
            lists, st = pipeline.query_betas(c, betas, K)
            stats.append(st)
            for acc, ranked in zip(per_beta, lists):
                acc.append(ranked)
        for b, ranked in zip(betas, per_beta):
            rows.append(_curve_row(K, float(b), ranked, stats, queries.golds))
    if references:
        got = [pipeline.slow_only(c) for c in queries.captions]
        rows.append(_curve_row(len(pipeline), "slow_only", [r for r, _ in got], [s for _, s in got],
                               queries.golds))
    return rows


def smallest_matching_k(rows: Sequence[dict]) -> int | None:
    """Smallest re-ranked K whose R@1 reaches the slow-only R@1, over any beta."""
    ref = [r for r in rows if r["beta"] == "slow_only"]
    if not ref:
        raise ValueError("curve has no slow-only reference row")
    target = ref[0]["R1"]
    ks = [r["K"] for r in rows if not isinstance(r["beta"], str) and r["R1"] >= target]
    return min(ks) if ks else None


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str] = CURVE_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in (r[c] for c in columns)])
    return buf.getvalue()


# ---------------------------------------------------------------- benchmark

@dataclass
class Latency:
    mode: str
    K: int
    n: int
    median_ms: float
    p95_ms: float
    slow_stage_median_ms: float


@dataclass
class BenchReport:
    N: int
    rows: list[Latency] = field(default_factory=list)

    def get(self, mode: str, K: int | None = None) -> Latency:
        for r in self.rows:
            if r.mode == mode and (K is None or r.K == K):
                return r
        raise KeyError((mode, K))

    def speedup(self, K: int) -> float:
        """Median slow-exhaustive time over median fast & slow time at K."""
        return self.get("slow_exhaustive").median_ms / self.get("fast_slow", K).median_ms

    def table(self) -> str:
        lines = [f"N={self.N}",
                 f"{'mode':<16}{'K':>7}{'runs':>6}{'median ms':>12}{'p95 ms':>12}{'slow ms':>12}{'speedup':>10}"]
        has_exh = any(r.mode == "slow_exhaustive" for r in self.rows)
        for r in self.rows:
            sp = f"{self.speedup(r.K):.1f}x" if r.mode == "fast_slow" and has_exh else ""
            lines.append(f"{r.mode:<16}{r.K:>7}{r.n:>6}{r.median_ms:>12.3f}{r.p95_ms:>12.3f}"
                         f"{r.slow_stage_median_ms:>12.3f}{sp:>10}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["N", "mode", "K", "runs", "median_ms", "p95_ms", "slow_stage_median_ms", "speedup"])
        has_exh = any(r.mode == "slow_exhaustive" for r in self.rows)
        for r in self.rows:
            sp = self.speedup(r.K) if r.mode == "fast_slow" and has_exh else ""
            w.writerow([self.N, r.mode, r.K, r.n, repr(r.median_ms), repr(r.p95_ms),
                        repr(r.slow_stage_median_ms), repr(sp) if sp != "" else ""])
        return buf.getvalue()


def _timed(fn: Callable, captions, warmup: int) -> list[QueryStats]:
    for i in range(warmup):
        fn(captions[i % len(captions)])
    return [fn(c)[1] for c in captions]


def _summary(mode: str, K: int, stats: list[QueryStats]) -> Latency:
    total = np.array([s.total_ms for s in stats])
    slow = np.array([s.rerank_ms for s in stats])
    return Latency(mode, K, len(stats), float(np.median(total)), float(np.percentile(total, 95)),
                   float(np.median(slow)))


def benchmark(pipeline: RetrievalPipeline, captions: Sequence, Ks: Sequence[int] = (10,),
              warmup: int = 3, exhaustive: bool = True, exhaustive_queries: int | None = None,
              exhaustive_warmup: int | None = None) -> BenchReport:
    """Median and p95 wall time per query for fast-only, slow-exhaustive and fast & slow.

    Warm-up queries are run first and not timed. Exhaustive scoring can be
    limited to the first ``exhaustive_queries`` captions because it is the
    expensive mode at large N.
    """
    captions = list(captions)
    if not captions:
        raise ValueError("benchmark needs at least one query")
    report = BenchReport(len(pipeline))
    report.rows.append(_summary("fast_only", 0, _timed(pipeline.fast_only, captions, warmup)))
    if exhaustive:
        ex = captions[:exhaustive_queries] if exhaustive_queries else captions
        wu = warmup if exhaustive_warmup is None else exhaustive_warmup
        report.rows.append(_summary("slow_exhaustive", len(pipeline), _timed(pipeline.slow_only, ex, wu)))
    for K in Ks:
        K = pipeline.clamp_k(K)
        report.rows.append(_summary("fast_slow", K,
                                    _timed(lambda c: pipeline.query(c, K=K), captions, warmup)))
    return report


def linear_fit(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares slope, intercept and r^2."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 - (resid ** 2).sum() / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)


def synthetic_pipeline(fast: FastModel, slow: SlowModel, bank: np.ndarray, n: int, seed: int = 0,
                       K: int = 10, beta: float = 0.0) -> RetrievalPipeline:
    """N unit-Gaussian item embeddings in an exact index; slow rows cycle through ``bank``.

    Used to time the query path at corpus sizes the synthetic dataset cannot reach.
    """
    rng = np.random.default_rng(seed)
    vecs = rng.normal(size=(n, fast.config.embed_dim)).astype(np.float32)
    ids = np.arange(n, dtype=np.int64)
    return RetrievalPipeline(fast, ExactIndex(ids, vecs), SlowCorpus(slow, ids, bank), K, beta)
