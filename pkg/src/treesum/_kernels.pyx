# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled sequence-matching kernels: LCS length and clipped count overlap.

Mirrors ``treesum._kernels_py`` exactly; see that module for the contract.
"""

import numpy as np

from libc.stdint cimport int64_t


def lcs_length(a, b):
    cdef const int64_t[::1] av = np.ascontiguousarray(a, dtype=np.int64)
    cdef const int64_t[::1] bv = np.ascontiguousarray(b, dtype=np.int64)
    cdef Py_ssize_t na = av.shape[0], nb = bv.shape[0]
    if na == 0 or nb == 0:
        return 0
    cdef int64_t[::1] prev = np.zeros(nb + 1, dtype=np.int64)
    cdef int64_t[::1] cur = np.zeros(nb + 1, dtype=np.int64)
    cdef Py_ssize_t i, j
    cdef int64_t best, diag
    for i in range(na):
        for j in range(1, nb + 1):
            diag = prev[j - 1] + (1 if av[i] == bv[j - 1] else 0)
            best = prev[j] if prev[j] > diag else diag
            if cur[j - 1] > best:
                best = cur[j - 1]
            cur[j] = best
        prev, cur = cur, prev
    return int(prev[nb])


def clipped_overlap(keys_a, counts_a, keys_b, counts_b):
    cdef const int64_t[::1] ka = np.ascontiguousarray(keys_a, dtype=np.int64)
    cdef const int64_t[::1] ca = np.ascontiguousarray(counts_a, dtype=np.int64)
    cdef const int64_t[::1] kb = np.ascontiguousarray(keys_b, dtype=np.int64)
    cdef const int64_t[::1] cb = np.ascontiguousarray(counts_b, dtype=np.int64)
    cdef Py_ssize_t na = ka.shape[0], nb = kb.shape[0]
    cdef Py_ssize_t i = 0, j = 0
    cdef int64_t total = 0
    while i < na and j < nb:
        if ka[i] == kb[j]:
            total += ca[i] if ca[i] < cb[j] else cb[j]
            i += 1
            j += 1
        elif ka[i] < kb[j]:
            i += 1
        else:
            j += 1
    return int(total)
