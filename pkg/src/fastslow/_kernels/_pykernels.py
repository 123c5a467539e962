"""numpy reference implementations of the hot index kernels."""

from __future__ import annotations

import numpy as np


def adc_scan(codes: np.ndarray, tables: np.ndarray) -> np.ndarray:
    """score[i] = sum_m tables[m, codes[i, m]], accumulated in order m = 0, 1, ..."""
    n, m = codes.shape
    if m == 0:
        return np.zeros(n)
    acc = tables[0, codes[:, 0]].astype(np.float64)
    for j in range(1, m):
        acc += tables[j, codes[:, j]]
    return acc


def topk_desc(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, descending; equal scores by ascending index."""
    n = len(scores)
    k = max(0, min(int(k), n))
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    if k < n:
        part = np.argpartition(-scores, k - 1)[:k]
        thresh = scores[part].min()
        above = np.flatnonzero(scores > thresh)
        ties = np.flatnonzero(scores == thresh)[:k - len(above)]
        cand = np.concatenate([above, ties])
    else:
        cand = np.arange(n)
    return cand[np.lexsort((cand, -scores[cand]))].astype(np.int64)
