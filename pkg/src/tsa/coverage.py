"""Dynamic token coverage: how many tokens to keep and which ones, per head.

Token importance comes from a proxy attention map built from the most recent
``last_q`` queries. Heads are aggregated into one layer distribution, the
least important tokens are dropped until their mass reaches ``tau``, and
every head then keeps its own top ``k_keep`` tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .attention import TokenSelection
from .tensor_core import Tensor, as_tensor, avg_pool_1d, matmul, softmax_rows

DEFAULT_LAST_Q = 64
DEFAULT_KERNEL = 7


@dataclass
class HeadScores:
    s: Tensor  # H x L, nonnegative
    last_q: int
    kernel: int

    @property
    def n_heads(self) -> int:
        return self.s.shape[0]

    @property
    def seq_len(self) -> int:
        return self.s.shape[1]


@dataclass
class LayerScores:
    s: Tensor  # L, sums to 1


def score_tokens(q, k, last_q: int = DEFAULT_LAST_Q, kernel: int = DEFAULT_KERNEL) -> HeadScores:
    """Per-head token importance from the trailing ``last_q`` queries.

    ``q`` is H x L x d and ``k`` is H_kv x L x d (query head ``h`` reads key
    head ``h // (H / H_kv)``). Within the trailing block a query only sees
    keys at or before its own position. The column sums of the proxy map
    are smoothed with ``avg_pool_1d``.
    """
    if last_q < 1:
        raise ValueError(f"last_q must be >= 1, got {last_q}")
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be an odd positive integer, got {kernel!r}")
    q = as_tensor(q, 3, "q")
    k = as_tensor(k, 3, "k")
    n_heads, length, d = q.shape
    group = n_heads // k.shape[0]
    lq = min(last_q, length)
    start = length - lq
    # query at absolute position start + r may see keys 0 .. start + r
    visible = np.arange(length)[None, :] <= (start + np.arange(lq))[:, None]
    scale = np.float32(1.0 / math.sqrt(d))
    s = np.zeros((n_heads, length), dtype=np.float32)
    for h in range(n_heads):
        kh = k[h // group]
        a_hat = softmax_rows(matmul(q[h, start:], np.ascontiguousarray(kh.T)) * scale, visible)
        s[h] = avg_pool_1d(a_hat.sum(axis=0, dtype=np.float32), kernel)
    return HeadScores(s=s, last_q=lq, kernel=kernel)


def aggregate_scores(hs: HeadScores) -> LayerScores:
    s = np.asarray(hs.s, dtype=np.float64)
    total = s.sum()
    if not total > 0:
        raise ValueError("cannot normalise token scores: all scores are zero")
    return LayerScores(s=(s.sum(axis=0) / total).astype(np.float32))


def ascending_order(values) -> np.ndarray:
    """Indices sorting ``values`` ascending, ties by lower index first."""
    return np.argsort(np.asarray(values), kind="stable")


def sparse_count(s_l: LayerScores, tau: float) -> int:
    """Smallest k whose k least important tokens carry mass >= tau.

    Prefix sums run left to right over the ascending order in float64. If
    even the full sequence falls short of ``tau`` (rounding at tau ~ 1) every
    token counts as droppable.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if tau <= 0.0:
        return 0
    s = np.asarray(s_l.s, dtype=np.float64)
    prefix = np.cumsum(s[ascending_order(s_l.s)])
    hit = np.flatnonzero(prefix >= tau)
    return int(hit[0]) + 1 if hit.size else int(s.size)


def coverage_budget(s_l: LayerScores, tau: float, min_keep: int = 1) -> int:
    length = int(np.asarray(s_l.s).size)
    return max(length - sparse_count(s_l, tau), min_keep)


def fixed_budget(length: int, s: float, min_keep: int = 1) -> int:
    """Keep a constant ``1 - s`` fraction of tokens (rounded half up)."""
    if not 0.0 <= s < 1.0:
        raise ValueError(f"fixed sparsity ratio must lie in [0, 1), got {s}")
    return max(int(math.floor((1.0 - s) * length + 0.5)), min_keep)


def forced_tokens(policy, length: int, last_q: int = DEFAULT_LAST_Q) -> tuple:
    """Resolve a forced-inclusion policy to an index tuple.

    ``"last"`` keeps the final token, ``"window"`` the trailing ``last_q``
    tokens, ``"none"`` nothing; an iterable of ints is taken literally.
    """
    if policy is None or policy == "none":
        return ()
    if policy == "last":
        return (length - 1,) if length else ()
    if policy == "window":
        return tuple(range(max(0, length - last_q), length))
    if isinstance(policy, str):
        raise ValueError(f"unknown forced policy {policy!r}")
    return tuple(sorted(set(int(i) for i in policy)))


def min_keep_for(forced: Iterable[int]) -> int:
    return max(1, len(tuple(forced)))


def select_tokens(
    hs: HeadScores, k_keep: int, forced: Iterable[int] = (), tau: Optional[float] = None
) -> TokenSelection:
    """Each head keeps ``forced`` plus its highest-scoring other tokens."""
    length = hs.seq_len
    forced = tuple(sorted(set(int(i) for i in forced)))
    if any(i < 0 or i >= length for i in forced):
        raise IndexError(f"forced index out of range for length {length}")
    if not len(forced) <= k_keep <= length or k_keep < 1:
        raise ValueError(f"k_keep={k_keep} outside [{max(1, len(forced))}, {length}]")
    free = np.ones(length, dtype=bool)
    free[list(forced)] = False
    candidates = np.flatnonzero(free)
    n_pick = k_keep - len(forced)
    per_head = []
    for h in range(hs.n_heads):
        scores = np.asarray(hs.s[h])[candidates]
        top = candidates[np.argsort(-scores, kind="stable")[:n_pick]]
        per_head.append(np.sort(np.concatenate([np.asarray(forced, dtype=np.int64), top])))
    return TokenSelection(k_keep=k_keep, per_head=per_head, forced=forced, tau=tau)


def dynamic_selection(
    q,
    k,
    tau: float,
    last_q: int = DEFAULT_LAST_Q,
    kernel: int = DEFAULT_KERNEL,
    forced="last",
) -> TokenSelection:
    """Scoring, budgeting and head-wise selection in one call."""
    hs = score_tokens(q, k, last_q, kernel)
    keep_idx = forced_tokens(forced, hs.seq_len, last_q)
    k_keep = coverage_budget(aggregate_scores(hs), tau, min_keep_for(keep_idx))
    return select_tokens(hs, k_keep, keep_idx, tau=tau)
