"""Numpy fallback for the compiled sequence-matching kernels.

Same contract as the Cython module ``treesum._kernels``: exact results,
just slower. Selected automatically when the extension is unavailable or
``TREESUM_PURE_PYTHON`` is set.
"""

import numpy as np


def lcs_length(a, b):
    """Length of the longest common subsequence of two int sequences."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if len(a) == 0 or len(b) == 0:
        return 0
    # Row recurrence row[j] = max(t[j], row[j-1]) is a prefix maximum,
    # which lets each row be one vectorized pass.
    prev = np.zeros(len(b) + 1, dtype=np.int64)
    for ai in a:
        t = np.maximum(prev[1:], prev[:-1] + (b == ai))
        row = np.maximum.accumulate(t)
        prev[1:] = row
    return int(prev[-1])


def clipped_overlap(keys_a, counts_a, keys_b, counts_b):
    """Sum of min(count_a, count_b) over keys present in both sorted arrays."""
    keys_a = np.asarray(keys_a, dtype=np.int64)
    keys_b = np.asarray(keys_b, dtype=np.int64)
    if len(keys_a) == 0 or len(keys_b) == 0:
        return 0
    counts_a = np.asarray(counts_a, dtype=np.int64)
    counts_b = np.asarray(counts_b, dtype=np.int64)
    pos = np.searchsorted(keys_b, keys_a)
    safe = np.minimum(pos, len(keys_b) - 1)
    hit = keys_b[safe] == keys_a
    hit &= pos < len(keys_b)
    return int(np.minimum(counts_a[hit], counts_b[pos[hit]]).sum())
