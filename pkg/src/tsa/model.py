"""Toy decoder-only transformer with per-layer token-sparse attention.

Pre-norm residual blocks with RMSNorm, rotary positions, grouped-query
attention, a SwiGLU feed-forward and bias-free projections. A
:class:`SparsePlan` decides which layers run token-sparse attention and how
their budgets are chosen.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .attention import (
    AttentionBackend,
    HeadTensors,
    OpCounter,
    TokenSelection,
    dense_attention_heads,
    dense_causal_attention,
    token_sparse_attention,
)
from .checkpoint import CheckpointError, read_container, write_container
from .coverage import (
    DEFAULT_KERNEL,
    DEFAULT_LAST_Q,
    aggregate_scores,
    coverage_budget,
    fixed_budget,
    forced_tokens,
    min_keep_for,
    score_tokens,
    select_tokens,
)
from .flops import FlopReport, attention_flops, estimate_flops, map_sparsity, overhead_flops
from .tensor_core import Tensor, as_tensor, matmul


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 8
    n_kv_heads: int = 2
    d_model: int = 128
    d_head: int = 16
    d_ff: int = 256
    vocab_size: int = 512
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        for f in ("n_layers", "n_heads", "n_kv_heads", "d_model", "d_head", "d_ff", "vocab_size"):
            v = getattr(self, f)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{f} must be a positive integer, got {v!r}")
        if self.rope_theta <= 0 or self.norm_eps <= 0:
            raise ConfigError("rope_theta and norm_eps must be positive")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(f"d_model={self.d_model} != n_heads*d_head={self.n_heads * self.d_head}")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError(f"n_heads={self.n_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if self.d_head % 2:
            raise ConfigError(f"rotary positions need an even d_head, got {self.d_head}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LayerWeights:
    attn_norm: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ffn_norm: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor


@dataclass
class ModelWeights:
    embed: Tensor
    layers: list
    final_norm: Tensor
    lm_head: Tensor


LAYER_TENSORS = [f.name for f in fields(LayerWeights)]


def expected_shapes(cfg: ModelConfig) -> dict:
    d, hd = cfg.d_model, cfg.d_head
    shapes = {"embed": (cfg.vocab_size, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update(
            {
                p + "attn_norm": (d,),
                p + "wq": (d, cfg.n_heads * hd),
                p + "wk": (d, cfg.n_kv_heads * hd),
                p + "wv": (d, cfg.n_kv_heads * hd),
                p + "wo": (cfg.n_heads * hd, d),
                p + "ffn_norm": (d,),
                p + "w_gate": (d, cfg.d_ff),
                p + "w_up": (d, cfg.d_ff),
                p + "w_down": (cfg.d_ff, d),
            }
        )
    shapes["final_norm"] = (d,)
    shapes["lm_head"] = (d, cfg.vocab_size)
    return shapes


def named_tensors(w: ModelWeights) -> list:
    out = [("embed", w.embed)]
    for i, layer in enumerate(w.layers):
        out.extend((f"layers.{i}.{n}", getattr(layer, n)) for n in LAYER_TENSORS)
    out.append(("final_norm", w.final_norm))
    out.append(("lm_head", w.lm_head))
    return out


def init_random(cfg: ModelConfig, seed: int = 0) -> ModelWeights:
    rng = np.random.default_rng(seed)

    def dense(rows, cols):
        return (rng.standard_normal((rows, cols)) / np.sqrt(rows)).astype(np.float32)

    d, hd = cfg.d_model, cfg.d_head
    layers = []
    for _ in range(cfg.n_layers):
        layers.append(
            LayerWeights(
                attn_norm=np.ones(d, dtype=np.float32),
                wq=dense(d, cfg.n_heads * hd),
                wk=dense(d, cfg.n_kv_heads * hd),
                wv=dense(d, cfg.n_kv_heads * hd),
                wo=dense(cfg.n_heads * hd, d),
                ffn_norm=np.ones(d, dtype=np.float32),
                w_gate=dense(d, cfg.d_ff),
                w_up=dense(d, cfg.d_ff),
                w_down=dense(cfg.d_ff, d),
            )
        )
    return ModelWeights(
        embed=rng.standard_normal((cfg.vocab_size, d)).astype(np.float32),
        layers=layers,
        final_norm=np.ones(d, dtype=np.float32),
        lm_head=dense(d, cfg.vocab_size),
    )


def save_checkpoint(path, cfg: ModelConfig, weights: ModelWeights) -> None:
    write_container(path, cfg.to_dict(), named_tensors(weights))


def load_checkpoint(path) -> tuple:
    raw_cfg, tensors = read_container(path)
    try:
        cfg = ModelConfig.from_dict(raw_cfg)
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid model config ({exc})") from exc
    for name, shape in expected_shapes(cfg).items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor '{name}'")
        if tensors[name].shape != shape:
            raise CheckpointError(
                f"{path}: tensor '{name}' has shape {tensors[name].shape}, expected {shape}"
            )
    layers = [
        LayerWeights(**{n: tensors[f"layers.{i}.{n}"] for n in LAYER_TENSORS})
        for i in range(cfg.n_layers)
    ]
    weights = ModelWeights(
        embed=tensors["embed"], layers=layers, final_norm=tensors["final_norm"], lm_head=tensors["lm_head"]
    )
    return cfg, weights


def apply_rope(x, positions, theta: float = 10000.0) -> Tensor:
    """Rotate consecutive pairs ``(x[2i], x[2i+1])`` by ``pos * theta**(-2i/d)``.

    ``x`` is ``(..., L, d)``; ``positions`` gives the original token
    position of each of the ``L`` rows.
    """
    x = as_tensor(x)
    d = x.shape[-1]
    if d % 2:
        raise ConfigError(f"rotary positions need an even head dimension, got {d}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1)
    if pos.size != x.shape[-2]:
        raise ValueError(f"{pos.size} positions for {x.shape[-2]} rows")
    inv_freq = theta ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    angle = pos[:, None] * inv_freq[None, :]
    cos = np.cos(angle).astype(np.float32)
    sin = np.sin(angle).astype(np.float32)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rms_norm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    ms = np.mean(x * x, axis=-1, keepdims=True, dtype=np.float32)
    return (x / np.sqrt(ms + np.float32(eps)) * gain).astype(np.float32)


def silu(x: Tensor) -> Tensor:
    return (x / (np.float32(1.0) + np.exp(-x))).astype(np.float32)


@dataclass
class SparsePlan:
    """Which layers go sparse and how their budgets are set.

    ``mode`` is ``"dense"`` (ignore ``sparse_layers``), ``"dynamic"``
    (coverage ``tau``) or ``"fixed"`` (constant sparsity ratio ``s_fixed``).
    """

    mode: str = "dense"
    sparse_layers: tuple = ()
    tau: float = 0.005
    s_fixed: float = 0.0
    last_q: int = DEFAULT_LAST_Q
    kernel: int = DEFAULT_KERNEL
    forced: object = "last"

    def __post_init__(self):
        if self.mode not in ("dense", "dynamic", "fixed"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        self.sparse_layers = tuple(sorted(set(int(i) for i in self.sparse_layers)))
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}")
        if not 0.0 <= self.s_fixed < 1.0:
            raise ConfigError(f"s_fixed must lie in [0, 1), got {self.s_fixed}")
        if self.last_q < 1:
            raise ConfigError(f"last_q must be >= 1, got {self.last_q}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and positive, got {self.kernel}")

    def is_sparse(self, layer: int) -> bool:
        return self.mode != "dense" and layer in self.sparse_layers

    def validate(self, n_layers: int) -> None:
        bad = [i for i in self.sparse_layers if not 0 <= i < n_layers]
        if bad:
            raise ConfigError(f"sparse layers {bad} outside [0, {n_layers})")

    def select(self, q: Tensor, k: Tensor) -> TokenSelection:
        hs = score_tokens(q, k, self.last_q, self.kernel)
        length = hs.seq_len
        forced = forced_tokens(self.forced, length, self.last_q)
        floor = min_keep_for(forced)
        if self.mode == "fixed":
            k_keep = fixed_budget(length, self.s_fixed, floor)
            return select_tokens(hs, k_keep, forced)
        k_keep = coverage_budget(aggregate_scores(hs), self.tau, floor)
        return select_tokens(hs, k_keep, forced, tau=self.tau)


DENSE = SparsePlan()


@dataclass
class LayerStats:
    layer: int
    sparse: bool
    seq_len: int
    k_keep: int
    map_sparsity: float
    dense_flops: float
    sparse_flops: float
    overhead_flops: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardResult:
    logits: Tensor
    hidden_trace: list  # input of every layer, then the final residual stream
    stats: list = field(default_factory=list)
    flops: Optional[FlopReport] = None


class Model:
    def __init__(self, config: ModelConfig, weights: ModelWeights):
        self.config = config
        self.weights = weights

    @classmethod
    def random(cls, config: Optional[ModelConfig] = None, seed: int = 0) -> "Model":
        config = config or ModelConfig()
        return cls(config, init_random(config, seed))

    @classmethod
    def load(cls, path) -> "Model":
        return cls(*load_checkpoint(path))

    def save(self, path) -> None:
        save_checkpoint(path, self.config, self.weights)

    def project_qkv(self, x: Tensor, layer: int) -> HeadTensors:
        """Post-rotary per-head Q, K, V of ``layer`` for residual input ``x``."""
        cfg = self.config
        w = self.weights.layers[layer]
        h = rms_norm(x, w.attn_norm, cfg.norm_eps)
        length = x.shape[0]
        pos = np.arange(length)

        def heads(proj, n):
            return np.ascontiguousarray(matmul(h, proj).reshape(length, n, cfg.d_head).transpose(1, 0, 2))

        q = apply_rope(heads(w.wq, cfg.n_heads), pos, cfg.rope_theta)
        k = apply_rope(heads(w.wk, cfg.n_kv_heads), pos, cfg.rope_theta)
        v = heads(w.wv, cfg.n_kv_heads)
        return HeadTensors(q, k, v)

    def output_projection(self, per_head: Tensor, layer: int) -> Tensor:
        """Concatenate H x L x d head outputs and apply W_O."""
        n_heads, length, d = per_head.shape
        concat = np.ascontiguousarray(per_head.transpose(1, 0, 2).reshape(length, n_heads * d))
        return matmul(concat, self.weights.layers[layer].wo)

    def ffn(self, x: Tensor, layer: int) -> Tensor:
        w = self.weights.layers[layer]
        h = rms_norm(x, w.ffn_norm, self.config.norm_eps)
        return matmul(silu(matmul(h, w.w_gate)) * matmul(h, w.w_up), w.w_down)

    def attention_block(
        self,
        x: Tensor,
        layer: int,
        plan: SparsePlan = DENSE,
        selection: Optional[TokenSelection] = None,
        inner: AttentionBackend = dense_causal_attention,
        counter: Optional[OpCounter] = None,
    ) -> tuple:
        """Attention branch output (before the residual add) and layer stats.

        An explicit ``selection`` forces the sparse path with those indices.
        """
        cfg = self.config
        heads = self.project_qkv(x, layer)
        length = x.shape[0]
        dense_cost = attention_flops(length, cfg.d_head) * cfg.n_heads
        if selection is None and plan.is_sparse(layer):
            selection = plan.select(heads.q, heads.k)
        if selection is None:
            out = dense_attention_heads(heads, counter=counter)
            stats = LayerStats(layer, False, length, length, 0.0, dense_cost, dense_cost, 0.0)
        else:
            out = token_sparse_attention(heads, selection, inner=inner, counter=counter)
            k = selection.k_keep
            overhead = cfg.n_heads * overhead_flops(length, cfg.d_head, k, plan.last_q, plan.kernel)
            stats = LayerStats(
                layer,
                True,
                length,
                k,
                map_sparsity(k, length),
                dense_cost,
                attention_flops(k, cfg.d_head) * cfg.n_heads,
                overhead,
            )
        return self.output_projection(out, layer), stats

    def layer_forward(self, x, layer: int, plan: SparsePlan = DENSE, **kwargs) -> tuple:
        """One pre-norm block; returns ``(output, LayerStats)``."""
        x = as_tensor(x, 2, "x")
        attn, stats = self.attention_block(x, layer, plan, **kwargs)
        h = x + attn
        return h + self.ffn(h, layer), stats

    def embed(self, tokens: Sequence[int]) -> Tensor:
        ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if ids.size == 0:
            raise ValueError("empty token sequence")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ValueError(f"token ids must lie in [0, {self.config.vocab_size})")
        return self.weights.embed[ids].copy()

    def forward(
        self,
        tokens: Sequence[int],
        plan: SparsePlan = DENSE,
        inner: AttentionBackend = dense_causal_attention,
    ) -> ForwardResult:
        """Full prefill. Budgets are recomputed from each sparse layer's own scores."""
        cfg = self.config
        plan.validate(cfg.n_layers)
        x = self.embed(tokens)
        trace = [x]
        stats = []
        for layer in range(cfg.n_layers):
            x, st = self.layer_forward(x, layer, plan, inner=inner)
            trace.append(x)
            stats.append(st)
        logits = matmul(rms_norm(x, self.weights.final_norm, cfg.norm_eps), self.weights.lm_head)
        report = estimate_flops(
            x.shape[0],
            cfg.d_head,
            cfg.n_heads,
            [s.k_keep if s.sparse else None for s in stats],
            plan.last_q,
            plan.kernel,
        )
        return ForwardResult(logits=logits, hidden_trace=trace, stats=stats, flops=report)
