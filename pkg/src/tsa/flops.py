"""Analytic attention cost model.

Costs are counted per query head. A dense head costs ``4 L^2 d`` (the QK^T
and AV multiply-adds); a compressed head costs ``4 k^2 d``. Sparse layers
also pay for proxy scoring, pooling plus sorting, and the gather/scatter
data movement.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence


def attention_flops(length: int, d_head: int) -> int:
    return 4 * length * length * d_head


def overhead_flops(length: int, d_head: int, k_keep: int, last_q: int, kernel: int) -> float:
    lq = min(last_q, length)
    scoring = 2 * lq * length * d_head
    indexing = length * (kernel + (math.log2(length) if length > 1 else 0.0))
    movement = 2 * k_keep * d_head * 3 + length * d_head
    return scoring + indexing + movement


@dataclass
class FlopReport:
    dense_flops: float
    sparse_flops: float
    overhead_flops: float
    est_speedup: float
    map_sparsity: list = field(default_factory=list)
    avg_map_sparsity: float = 0.0
    sparse_layer_ratio: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def map_sparsity(k_keep: int, length: int) -> float:
    return 1.0 - (k_keep / length) ** 2


def estimate_flops(
    length: int,
    d_head: int,
    n_heads: int,
    k_keep: Sequence[Optional[int]],
    last_q: int,
    kernel: int,
    include_overhead: bool = True,
) -> FlopReport:
    """Whole-model attention cost; ``k_keep[l] is None`` marks a dense layer.

    ``sparse_layer_ratio`` is the dense-to-compressed attention ratio over the
    sparse layers alone, with overhead left out.
    """
    if length < 1 or d_head < 1 or n_heads < 1:
        raise ValueError("length, d_head and n_heads must be positive")
    dense_layer = attention_flops(length, d_head) * n_heads
    dense = sparse = overhead = 0.0
    sparse_dense = sparse_only = 0.0
    sparsities = []
    for k in k_keep:
        dense += dense_layer
        if k is None:
            sparse += dense_layer
            continue
        if not 0 <= k <= length:
            raise ValueError(f"k_keep={k} outside [0, {length}]")
        cost = attention_flops(k, d_head) * n_heads
        sparse += cost
        sparse_dense += dense_layer
        sparse_only += cost
        if include_overhead:
            overhead += n_heads * overhead_flops(length, d_head, k, last_q, kernel)
        sparsities.append(map_sparsity(k, length))
    return FlopReport(
        dense_flops=dense,
        sparse_flops=sparse,
        overhead_flops=overhead,
        est_speedup=dense / (sparse + overhead) if sparse + overhead > 0 else math.inf,
        map_sparsity=sparsities,
        avg_map_sparsity=sum(sparsities) / len(sparsities) if sparsities else 0.0,
        sparse_layer_ratio=sparse_dense / sparse_only if sparse_only > 0 else None,
    )
