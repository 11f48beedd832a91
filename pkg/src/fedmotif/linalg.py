"""Deterministic dense kernels for the message-passing engine.

Distributed and centralized forward passes must produce bit-identical
embeddings (the expressivity-equivalence check demands max-abs diff == 0.0).
BLAS matmul does not guarantee that a given output row is independent of the
other rows in the batch: kernel dispatch varies with the operand shapes, so a
client computing a subset of rows can drift from the full-batch result in the
last ulp.  Every dense product on a forward path therefore goes through
``row_matmul``, whose accumulation order per output element depends only on
the inner dimension.
"""

from __future__ import annotations

import numpy as np

__all__ = ["row_matmul", "affine", "relu", "segment_reduce"]


def row_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product whose rows are bitwise independent of batch composition.

    ``row_matmul(A, B)[i] == row_matmul(A[i:i+1], B)[0]`` exactly, for any
    row subset.  Relies on einsum's non-optimized path, which accumulates
    each output element sequentially over the inner axis.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return np.einsum("ij,jk->ik", a, b, optimize=False)


def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x @ w + b with the deterministic kernel."""
    return row_matmul(x, w) + b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def segment_reduce(values: np.ndarray, offsets: np.ndarray, width: int):
    """Per-segment sum, mean and max over contiguous row blocks.

    ``values`` holds message rows grouped so that segment ``t`` occupies
    ``values[offsets[t]:offsets[t+1]]``.  Empty segments reduce to zero for
    all three aggregators.  Returns ``(agg, argmax)`` where ``agg`` is the
    ``[T x 3*width]`` concatenation ``[sum | mean | max]`` and ``argmax``
    holds, per segment and column, the row index (into ``values``) that
    attained the max, or -1 for empty segments (used by the backward pass;
    ties resolve to the first row so duplicated messages from parallel edges
    are counted once).
    """
    n_seg = len(offsets) - 1
    agg = np.zeros((n_seg, 3 * width), dtype=np.float64)
    argmax = np.full((n_seg, width), -1, dtype=np.int64)
    for t in range(n_seg):
        lo, hi = offsets[t], offsets[t + 1]
        if hi == lo:
            continue
        block = values[lo:hi]
        s = block.sum(axis=0)
        agg[t, :width] = s
        agg[t, width : 2 * width] = s / (hi - lo)
        agg[t, 2 * width :] = block.max(axis=0)
        argmax[t] = lo + np.argmax(block, axis=0)
    return agg, argmax
