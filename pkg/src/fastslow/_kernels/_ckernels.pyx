# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled index kernels; outputs are bit-identical to ``_pykernels``."""

import numpy as np
from libc.stdint cimport uint8_t, uint16_t, int64_t
from libc.stdlib cimport malloc, free

ctypedef fused code_t:
    uint8_t
    uint16_t


def adc_scan(code_t[:, ::1] codes, const double[:, ::1] tables):
    cdef Py_ssize_t n = codes.shape[0], m = codes.shape[1], i, j
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double acc
    if m == 0:
        return out
    with nogil:
        for i in range(n):
            acc = tables[0, codes[i, 0]]
            for j in range(1, m):
                acc = acc + tables[j, codes[i, j]]
            o[i] = acc
    return out


cdef inline bint _worse(double sa, int64_t ia, double sb, int64_t ib) noexcept nogil:
    # a ranks below b
    return sa < sb or (sa == sb and ia > ib)


cdef void _sift_down(double* s, int64_t* idx, Py_ssize_t size, Py_ssize_t pos) noexcept nogil:
    cdef Py_ssize_t child
    cdef double ts
    cdef int64_t ti
    while True:
        child = 2 * pos + 1
        if child >= size:
            return
        if child + 1 < size and _worse(s[child + 1], idx[child + 1], s[child], idx[child]):
            child += 1
        if not _worse(s[child], idx[child], s[pos], idx[pos]):
            return
        ts = s[pos]; s[pos] = s[child]; s[child] = ts
        ti = idx[pos]; idx[pos] = idx[child]; idx[child] = ti
        pos = child


def topk_desc(const double[::1] scores, Py_ssize_t k):
    cdef Py_ssize_t n = scores.shape[0], i, size
    if k > n:
        k = n
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    cdef double* hs = <double*> malloc(k * sizeof(double))
    cdef int64_t* hi = <int64_t*> malloc(k * sizeof(int64_t))
    if hs == NULL or hi == NULL:
        free(hs); free(hi)
        raise MemoryError()
    out = np.empty(k, dtype=np.int64)
    cdef int64_t[::1] o = out
    cdef double ts
    cdef int64_t ti
    with nogil:
        # min-heap on rank: the root is the worst of the current top k
        for i in range(k):
            hs[i] = scores[i]; hi[i] = i
        for i in range(k // 2 - 1, -1, -1):
            _sift_down(hs, hi, k, i)
        for i in range(k, n):
            if _worse(hs[0], hi[0], scores[i], i):
                hs[0] = scores[i]; hi[0] = i
                _sift_down(hs, hi, k, 0)
        size = k
        while size > 0:
            size -= 1
            o[size] = hi[0]
            ts = hs[0]; hs[0] = hs[size]; hs[size] = ts
            ti = hi[0]; hi[0] = hi[size]; hi[size] = ti
            _sift_down(hs, hi, size, 0)
    free(hs); free(hi)
    return out
