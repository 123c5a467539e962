"""Index kernels: compiled when the extension is built, numpy otherwise.

Set ``FASTSLOW_PURE_PYTHON=1`` to force the numpy implementations.
"""

from __future__ import annotations

import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_use_compiled = _ckernels is not None and os.environ.get("FASTSLOW_PURE_PYTHON", "") != "1"
BACKEND = "cython" if _use_compiled else "python"
_impl = _ckernels if _use_compiled else _pykernels


def backends() -> dict:
    out = {"python": _pykernels}
    if _ckernels is not None:
        out["cython"] = _ckernels
    return out


def adc_scan(codes: np.ndarray, tables: np.ndarray) -> np.ndarray:
    codes = np.ascontiguousarray(codes)
    tables = np.ascontiguousarray(tables, dtype=np.float64)
    if _use_compiled and codes.dtype in (np.uint8, np.uint16):
        return _ckernels.adc_scan(codes, tables)
    return _pykernels.adc_scan(codes, tables)


def topk_desc(scores: np.ndarray, k: int) -> np.ndarray:
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("topk: scores must be finite")
    return _impl.topk_desc(scores, int(k))
