"""Small deterministic dense kernels.

Tensors are C-contiguous ``float32`` numpy arrays. Every kernel here is a
pure function: inputs are never modified and no module state is kept.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import numpy.typing as npt

Tensor = npt.NDArray[np.float32]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(x, ndim: Optional[int] = None, name: str = "tensor") -> Tensor:
    t = np.ascontiguousarray(x, dtype=np.float32)
    if ndim is not None and t.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-D, got shape {t.shape}")
    return t


def matmul(a, b) -> Tensor:
    """``a @ b`` with a fixed accumulation order.

    Each output element is built as ``((0 + a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...``
    in float32, i.e. exactly what a naive triple loop produces. The loop runs
    over the inner dimension and is vectorised over the output, so the
    result is bit-reproducible regardless of BLAS threading.
    """
    a = as_tensor(a, 2, "a")
    b = as_tensor(b, 2, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}: inner dimensions differ")
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float32)
    for p in range(k):
        out += a[:, p, None] * b[None, p, :]
    return out


def softmax_rows(m, mask=None) -> Tensor:
    """Row-wise softmax; ``mask[i, j] == True`` marks an allowed entry.

    Masked entries come out as exactly 0. A row with no allowed entry raises
    instead of producing NaN.
    """
    m = as_tensor(m, 2, "scores")
    if mask is None:
        logits = m
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != m.shape:
            raise DimensionError(f"mask shape {mask.shape} does not match scores shape {m.shape}")
        empty = ~mask.any(axis=1)
        if empty.any():
            rows = np.flatnonzero(empty)
            raise ValueError(f"softmax over fully masked row(s) {rows[:8].tolist()}")
        logits = np.where(mask, m, np.float32(-np.inf))
    if m.shape[1] == 0:
        raise ValueError("softmax over rows of length 0")
    row_max = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - row_max)
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32, copy=False)


def check_indices(idx: Sequence[int], length: int) -> npt.NDArray[np.int64]:
    """Validate a strictly ascending index list within ``[0, length)``."""
    arr = np.asarray(idx, dtype=np.int64).reshape(-1)
    if arr.size:
        if arr[0] < 0 or arr[-1] >= length:
            raise IndexError(f"index out of range for length {length}: {arr.min()}..{arr.max()}")
        if arr.size > 1 and not np.all(np.diff(arr) > 0):
            raise IndexError("indices must be strictly ascending (sorted, no duplicates)")
    return arr


def gather_rows(t, idx) -> Tensor:
    t = as_tensor(t, 2, "t")
    arr = check_indices(idx, t.shape[0])
    return t[arr]


def scatter_rows(tc, idx, length: int) -> Tensor:
    """Place ``tc[r]`` at row ``idx[r]`` of a zero ``length x d`` tensor."""
    tc = as_tensor(tc, 2, "tc")
    arr = check_indices(idx, length)
    if arr.size != tc.shape[0]:
        raise IndexError(f"{arr.size} indices for {tc.shape[0]} rows")
    out = np.zeros((length, tc.shape[1]), dtype=np.float32)
    out[arr] = tc
    return out


def avg_pool_1d(v, kernel: int) -> Tensor:
    """Same-length moving average with shrinking windows at the edges."""
    if isinstance(kernel, bool) or not isinstance(kernel, (int, np.integer)) or kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be an odd positive integer, got {kernel!r}")
    v = as_tensor(v, 1, "v")
    if kernel == 1 or v.size == 0:
        return v.copy()
    n = v.size
    r = kernel // 2
    total = np.zeros(n, dtype=np.float64)
    count = np.zeros(n, dtype=np.float64)
    src = v.astype(np.float64)
    for off in range(-r, r + 1):
        lo, hi = max(0, -off), min(n, n - off)
        if lo >= hi:
            continue
        total[lo:hi] += src[lo + off : hi + off]
        count[lo:hi] += 1.0
    return (total / count).astype(np.float32)
