"""Backend selection and shared helpers for the sequence-matching kernels.

``lcs_length`` and ``clipped_overlap`` come from the compiled extension when
it is importable, otherwise from the numpy fallback. Set
``TREESUM_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

if os.environ.get("TREESUM_PURE_PYTHON"):
    from . import _kernels_py as _impl

    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        from . import _kernels_py as _impl

        BACKEND = "python"

lcs_length = _impl.lcs_length
clipped_overlap = _impl.clipped_overlap

_EMPTY = np.zeros(0, dtype=np.int64)


def pack_ngrams(ids, n):
    """Pack the n-grams of an int id sequence into int64 keys (n in {1, 2}).

    Ids must fit in 31 bits, which any realistic vocabulary does.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if n == 1:
        return ids
    if n == 2:
        if len(ids) < 2:
            return _EMPTY
        return (ids[:-1] << 32) | ids[1:]
    raise ValueError(f"packed n-grams support n in {{1, 2}}, got {n}")


def ngram_counts(ids, n):
    """Sorted unique packed n-gram keys and their multiplicities."""
    packed = pack_ngrams(ids, n)
    if len(packed) == 0:
        return _EMPTY, _EMPTY
    return np.unique(packed, return_counts=True)
