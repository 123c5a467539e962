"""Two-stage text-to-image retrieval: a dot-product dual encoder, a cross-attention
captioning scorer, distillation between them, and an index plus re-ranking pipeline."""

import os as _os

# FASTSLOW_THREADS caps BLAS threads on the query path; it must be applied before numpy loads.
_threads = _os.environ.get("FASTSLOW_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
