"""Per-head attention: dense causal, hard-masked reference, and token-sparse.

Token-sparse attention gathers the selected rows of Q, K and V for every
head, runs an ordinary causal attention on the compact tensors, and scatters
the result back into a zero tensor of the original length. Since every
index list is strictly ascending, the lower-triangular mask in compressed
coordinates is the original causal mask restricted to the selected tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor_core import (
    DimensionError,
    Tensor,
    as_tensor,
    check_indices,
    gather_rows,
    matmul,
    scatter_rows,
    softmax_rows,
)

AttentionBackend = Callable[[Tensor, Tensor, Tensor], Tensor]


@dataclass
class HeadTensors:
    """Post-rotary Q (H x L x d) and K, V (H_kv x L x d) for one layer."""

    q: Tensor
    k: Tensor
    v: Tensor

    def __post_init__(self):
        self.q = as_tensor(self.q, 3, "q")
        self.k = as_tensor(self.k, 3, "k")
        self.v = as_tensor(self.v, 3, "v")
        if self.k.shape != self.v.shape:
            raise DimensionError(f"k shape {self.k.shape} != v shape {self.v.shape}")
        h, length, d = self.q.shape
        h_kv = self.k.shape[0]
        if self.k.shape[1:] != (length, d):
            raise DimensionError(f"q shape {self.q.shape} incompatible with k shape {self.k.shape}")
        if h_kv == 0 or h % h_kv:
            raise DimensionError(f"{h} query heads not divisible by {h_kv} key/value heads")

    @property
    def n_heads(self) -> int:
        return self.q.shape[0]

    @property
    def n_kv_heads(self) -> int:
        return self.k.shape[0]

    @property
    def seq_len(self) -> int:
        return self.q.shape[1]

    @property
    def d_head(self) -> int:
        return self.q.shape[2]

    def kv_index(self, head: int) -> int:
        return head // (self.n_heads // self.n_kv_heads)


@dataclass
class TokenSelection:
    """Per-head retained token indices sharing a single budget ``k_keep``.

    ``tau`` is the coverage threshold that produced the budget, or ``None``
    for a fixed-ratio budget.
    """

    k_keep: int
    per_head: list
    forced: tuple = ()
    tau: Optional[float] = None

    def __post_init__(self):
        forced = np.asarray(sorted(set(int(i) for i in self.forced)), dtype=np.int64)
        self.forced = tuple(forced.tolist())
        if self.k_keep < max(1, len(self.forced)):
            raise ValueError(f"k_keep={self.k_keep} below minimum {max(1, len(self.forced))}")
        heads = []
        for h, s in enumerate(self.per_head):
            arr = np.asarray(s, dtype=np.int64).reshape(-1)
            if arr.size != self.k_keep:
                raise ValueError(f"head {h} keeps {arr.size} tokens, expected k_keep={self.k_keep}")
            if arr.size > 1 and not np.all(np.diff(arr) > 0):
                raise IndexError(f"head {h} indices are not strictly ascending")
            if forced.size and not np.isin(forced, arr).all():
                raise ValueError(f"head {h} is missing forced tokens")
            heads.append(arr)
        self.per_head = heads

    @property
    def n_heads(self) -> int:
        return len(self.per_head)

    def validate(self, n_heads: int, seq_len: int) -> None:
        if self.n_heads != n_heads:
            raise DimensionError(f"selection has {self.n_heads} heads, tensors have {n_heads}")
        for s in self.per_head:
            check_indices(s, seq_len)


@dataclass
class OpCounter:
    """Records the shape of every score matrix QK^T computed."""

    score_shapes: list = field(default_factory=list)

    @property
    def score_elements(self) -> int:
        return sum(m * n for m, n in self.score_shapes)


def _scores(q: Tensor, k: Tensor) -> Tensor:
    return matmul(q, np.ascontiguousarray(k.T)) * np.float32(1.0 / math.sqrt(q.shape[1]))


def dense_causal_attention(q, k, v, counter: Optional[OpCounter] = None) -> Tensor:
    """Exact causal attention for one head: ``softmax(QK^T/sqrt(d), j<=i) V``."""
    q = as_tensor(q, 2, "q")
    k = as_tensor(k, 2, "k")
    v = as_tensor(v, 2, "v")
    if q.shape != k.shape or k.shape[0] != v.shape[0]:
        raise DimensionError(f"incompatible head shapes q={q.shape} k={k.shape} v={v.shape}")
    n = q.shape[0]
    if n == 0:
        return np.zeros((0, v.shape[1]), dtype=np.float32)
    scores = _scores(q, k)
    if counter is not None:
        counter.score_shapes.append(scores.shape)
    causal = np.tri(n, dtype=bool)
    return matmul(softmax_rows(scores, causal), v)


def masked_sparse_oracle(q, k, v, selected: Sequence[int]) -> Tensor:
    """Full-length attention with unselected rows and columns hard-masked.

    Entry (i, j) is allowed iff both tokens are selected and ``j <= i``.
    Rows of unselected tokens are exactly zero.
    """
    q = as_tensor(q, 2, "q")
    k = as_tensor(k, 2, "k")
    v = as_tensor(v, 2, "v")
    n = q.shape[0]
    sel = check_indices(selected, n)
    keep = np.zeros(n, dtype=bool)
    keep[sel] = True
    allowed = np.tri(n, dtype=bool) & keep[:, None] & keep[None, :]
    scores = _scores(q, k)
    probs = np.zeros((n, n), dtype=np.float32)
    if sel.size:
        probs[keep] = softmax_rows(scores[keep], allowed[keep])
    return matmul(probs, v)


def token_sparse_attention(
    heads: HeadTensors,
    sel: TokenSelection,
    inner: AttentionBackend = dense_causal_attention,
    counter: Optional[OpCounter] = None,
) -> Tensor:
    """Compress, attend, decompress. Returns an H x L x d tensor.

    ``inner`` receives the gathered (k_keep x d) Q, K, V of one head and must
    return causal attention in those compressed coordinates. Grouped-query
    K/V are gathered from the shared group head with the query head's own
    index list.
    """
    length = heads.seq_len
    sel.validate(heads.n_heads, length)
    out = np.zeros((heads.n_heads, length, heads.v.shape[2]), dtype=np.float32)
    for h in range(heads.n_heads):
        idx = sel.per_head[h]
        g = heads.kv_index(h)
        qc = gather_rows(heads.q[h], idx)
        kc = gather_rows(heads.k[g], idx)
        vc = gather_rows(heads.v[g], idx)
        if counter is not None and inner is dense_causal_attention:
            oc = dense_causal_attention(qc, kc, vc, counter=counter)
        else:
            oc = inner(qc, kc, vc)
        out[h] = scatter_rows(oc, idx, length)
    return out


def dense_attention_heads(heads: HeadTensors, counter: Optional[OpCounter] = None) -> Tensor:
    """Dense causal attention for every query head (GQA-aware)."""
    out = np.zeros((heads.n_heads, heads.seq_len, heads.v.shape[2]), dtype=np.float32)
    for h in range(heads.n_heads):
        g = heads.kv_index(h)
        out[h] = dense_causal_attention(heads.q[h], heads.k[g], heads.v[g], counter=counter)
    return out
