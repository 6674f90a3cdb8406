"""Experiment commands behind the ``tsa`` CLI.

Every command takes a resolved :class:`RunConfig` and returns a
:class:`Report`; nothing here parses arguments or touches stdout. Reports
are deterministic given ``seed``: no timestamps, rows ordered by trial.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
from scipy.stats import spearmanr

from .attention import HeadTensors, masked_sparse_oracle, token_sparse_attention
from .checkpoint import CheckpointError
from .coverage import (
    aggregate_scores,
    coverage_budget,
    dynamic_selection,
    forced_tokens,
    min_keep_for,
    score_tokens,
)
from .drift import calibrate, compute_drift, select_sparse_layers
from .flops import estimate_flops
from .model import ConfigError, Model, ModelConfig, SparsePlan

log = logging.getLogger(__name__)

EQUIV_TOLERANCE = 1e-5
EQUIV_SEQ_LENS = (16, 64, 256)
EQUIV_HEADS = (1, 4, 8)
EQUIV_DIMS = (8, 16, 32)

# Measured attention-map sparsity reported for the method at 128K context.
PUBLISHED_SWEEP_128K = {"0.005": 0.5444, "0.010": 0.6736}
PUBLISHED_FIXED_VS_DYNAMIC = {
    "dynamic_tau_0.005": 0.5444,
    "dynamic_tau_0.010": 0.6736,
    "fixed_s_0.3": 0.5096,
    "fixed_s_0.5": 0.7495,
}

COMMANDS = ("equiv", "sweep", "fixed-vs-dynamic", "drift", "triplet", "flops")

COMMAND_DEFAULTS = {
    "equiv": {"tau": [0.0, 0.005, 0.1, 0.5, 0.99], "seq_len": list(EQUIV_SEQ_LENS)},
    "sweep": {"tau": [0.0, 0.005, 0.01, 0.05, 0.1], "seq_len": [128, 256, 512]},
    "fixed-vs-dynamic": {"tau": [0.005, 0.01], "s_fixed": [0.3, 0.5], "seq_len": [256]},
    "drift": {"seq_len": [128], "prompts": 4},
    "triplet": {"tau": [0.99], "seq_len": [128]},
    "flops": {"tau": [0.005], "seq_len": [256]},
}


@dataclass
class RunConfig:
    command: str = "equiv"
    mode: str = "dynamic"
    tau: list = field(default_factory=lambda: [0.005])
    delta: float = 0.5
    epsilon: float = 1e-6
    last_q: int = 64
    kernel: int = 7
    s_fixed: list = field(default_factory=lambda: [0.0])
    seq_len: list = field(default_factory=lambda: [256])
    seed: int = 0
    checkpoint: Optional[str] = None
    random_init: bool = True
    out: Optional[str] = None
    trials: int = 100
    runs: int = 200
    prompts: int = 1
    forced: str = "last"
    sparse_layers: Optional[list] = None
    k_keep: Optional[list] = None
    csv: Optional[str] = None

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.mode not in ("dense", "dynamic", "fixed"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if any(not 0.0 <= t <= 1.0 for t in self.tau):
            raise ConfigError(f"tau values must lie in [0, 1]: {self.tau}")
        if any(not 0.0 <= s < 1.0 for s in self.s_fixed):
            raise ConfigError(f"fixed sparsity values must lie in [0, 1): {self.s_fixed}")
        if not self.seq_len or any(int(n) < 1 for n in self.seq_len):
            raise ConfigError(f"sequence lengths must be positive: {self.seq_len}")
        if self.last_q < 1 or self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("last_q must be >= 1 and kernel odd and positive")
        if self.trials < 0 or self.runs < 0 or self.prompts < 1:
            raise ConfigError("trials/runs must be >= 0 and prompts >= 1")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.forced not in ("last", "window", "none"):
            raise ConfigError(f"forced policy must be last, window or none, got {self.forced!r}")

    def to_dict(self) -> dict:
        # output locations are not part of the experiment
        d = asdict(self)
        del d["out"], d["csv"]
        return d

    @classmethod
    def field_names(cls) -> set:
        return {f.name for f in fields(cls)}


@dataclass
class Report:
    command: str
    config: dict
    rows: list
    meta: dict = field(default_factory=dict)
    exit_code: int = 0

    def to_json(self) -> str:
        body = {"command": self.command, "config": self.config, "rows": self.rows}
        body.update(self.meta)
        return json.dumps(_plain(body), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.rows:
            writer = csv.DictWriter(buf, fieldnames=list(self.rows[0]), lineterminator="\n")
            writer.writeheader()
            for row in self.rows:
                writer.writerow(_plain(row))
        for key in sorted(self.meta):
            value = self.meta[key]
            if value is None or isinstance(value, (int, float, str, bool)):
                buf.write(f"# {key}={_plain(value)}\n")
        return buf.getvalue()


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def load_model(cfg: RunConfig) -> Model:
    if cfg.checkpoint:
        try:
            return Model.load(cfg.checkpoint)
        except CheckpointError as exc:
            raise ConfigError(str(exc)) from exc
    return Model.random(ModelConfig(), seed=cfg.seed)


def prompt_tokens(model: Model, length: int, seed: int, index: int = 0) -> np.ndarray:
    rng = np.random.default_rng([seed, length, index])
    return rng.integers(0, model.config.vocab_size, size=length)


def relative_deviation(a, b) -> float:
    ref = np.asarray(b, dtype=np.float64)
    diff = np.asarray(a, dtype=np.float64) - ref
    denom = np.linalg.norm(ref)
    return float(np.linalg.norm(diff) / denom) if denom > 0 else float(np.linalg.norm(diff))


def _sparse_layers(cfg: RunConfig, trace) -> list:
    if cfg.sparse_layers is not None:
        return sorted(int(i) for i in cfg.sparse_layers)
    return select_sparse_layers(compute_drift(trace, cfg.epsilon), cfg.delta, cfg.epsilon).sparse_layers


def _plan(cfg: RunConfig, mode: str, layers, tau: float = 0.0, s: float = 0.0) -> SparsePlan:
    return SparsePlan(
        mode=mode,
        sparse_layers=tuple(layers),
        tau=tau,
        s_fixed=s,
        last_q=cfg.last_q,
        kernel=cfg.kernel,
        forced=cfg.forced,
    )


def cmd_equiv(cfg: RunConfig) -> Report:
    """Randomised equivalence of the compressed path against the masked oracle."""
    rows = []
    if cfg.trials == 0:
        log.warning("equiv: --trials 0, nothing to check")
    for trial in range(cfg.trials):
        rng = np.random.default_rng([cfg.seed, trial])
        length = int(rng.choice(cfg.seq_len))
        n_heads = int(rng.choice(EQUIV_HEADS))
        d = int(rng.choice(EQUIV_DIMS))
        n_kv = int(rng.choice([g for g in range(1, n_heads + 1) if n_heads % g == 0]))
        tau = float(cfg.tau[trial % len(cfg.tau)])
        q = rng.standard_normal((n_heads, length, d)).astype(np.float32)
        k = rng.standard_normal((n_kv, length, d)).astype(np.float32)
        v = rng.standard_normal((n_kv, length, d)).astype(np.float32)
        heads = HeadTensors(q, k, v)
        sel = dynamic_selection(q, k, tau, cfg.last_q, cfg.kernel, cfg.forced)
        fast = token_sparse_attention(heads, sel)
        err = 0.0
        for h in range(n_heads):
            g = heads.kv_index(h)
            ref = masked_sparse_oracle(q[h], k[g], v[g], sel.per_head[h])
            err = max(err, float(np.max(np.abs(fast[h] - ref))))
        rows.append(
            {
                "trial": trial,
                "seq_len": length,
                "n_heads": n_heads,
                "n_kv_heads": n_kv,
                "d_head": d,
                "tau": tau,
                "k_keep": sel.k_keep,
                "max_abs_err": err,
            }
        )
    worst = max((r["max_abs_err"] for r in rows), default=0.0)
    passed = worst <= EQUIV_TOLERANCE
    meta = {"max_abs_err": worst, "tolerance": EQUIV_TOLERANCE, "passed": passed}
    return Report("equiv", cfg.to_dict(), rows, meta, exit_code=0 if passed else 2)


def cmd_sweep(cfg: RunConfig) -> Report:
    """Coverage sweep: realised budgets, map sparsity and modelled speedup.

    Each sparse layer is scored on its input from a dense pass, so all tau
    values see the same per-layer input and rows differ only by budget.
    """
    model = load_model(cfg)
    mc = model.config
    rows = []
    layers_by_len = {}
    for length in cfg.seq_len:
        length = int(length)
        tokens = prompt_tokens(model, length, cfg.seed)
        dense = model.forward(tokens)
        layers = _sparse_layers(cfg, dense.hidden_trace)
        layers_by_len[str(length)] = layers
        forced = forced_tokens(cfg.forced, length, cfg.last_q)
        floor = min_keep_for(forced)
        layer_scores = {}
        for layer in layers:
            heads = model.project_qkv(dense.hidden_trace[layer], layer)
            layer_scores[layer] = aggregate_scores(score_tokens(heads.q, heads.k, cfg.last_q, cfg.kernel))
        for tau in cfg.tau:
            budgets = {layer: coverage_budget(layer_scores[layer], tau, floor) for layer in layers}
            report = estimate_flops(
                length,
                mc.d_head,
                mc.n_heads,
                [budgets.get(layer) for layer in range(mc.n_layers)],
                cfg.last_q,
                cfg.kernel,
            )
            rows.append(
                {
                    "tau": float(tau),
                    "seq_len": length,
                    "avg_k_keep": float(np.mean(list(budgets.values()))) if budgets else float(length),
                    "map_sparsity": report.avg_map_sparsity,
                    "est_speedup": report.est_speedup,
                }
            )
    meta = {"sparse_layers": layers_by_len, "published_reference_128k": PUBLISHED_SWEEP_128K}
    return Report("sweep", cfg.to_dict(), rows, meta)


def _sparse_row(mode, tau, s, result, dense) -> dict:
    sparse = [st for st in result.stats if st.sparse]
    return {
        "mode": mode,
        "tau": tau,
        "s": s,
        "avg_k_keep": float(np.mean([st.k_keep for st in sparse])) if sparse else None,
        "map_sparsity": result.flops.avg_map_sparsity,
        "est_speedup": result.flops.est_speedup,
        "output_deviation": relative_deviation(result.hidden_trace[-1], dense.hidden_trace[-1]),
        "logit_max_abs_diff": float(np.max(np.abs(result.logits - dense.logits))),
    }


def cmd_fixed_vs_dynamic(cfg: RunConfig) -> Report:
    model = load_model(cfg)
    length = int(cfg.seq_len[0])
    tokens = prompt_tokens(model, length, cfg.seed)
    dense = model.forward(tokens)
    layers = _sparse_layers(cfg, dense.hidden_trace)
    rows = []
    for tau in cfg.tau:
        result = model.forward(tokens, _plan(cfg, "dynamic", layers, tau=float(tau)))
        rows.append(_sparse_row("dynamic", float(tau), None, result, dense))
    for s in cfg.s_fixed:
        result = model.forward(tokens, _plan(cfg, "fixed", layers, s=float(s)))
        rows.append(_sparse_row("fixed", None, float(s), result, dense))
    meta = {"seq_len": length, "sparse_layers": layers, "published_reference": PUBLISHED_FIXED_VS_DYNAMIC}
    return Report("fixed-vs-dynamic", cfg.to_dict(), rows, meta)


def cmd_drift(cfg: RunConfig) -> Report:
    """Calibrate drift over ``prompts`` random prompts of ``seq_len[0]`` tokens."""
    model = load_model(cfg)
    length = int(cfg.seq_len[0])
    prompts = [prompt_tokens(model, length, cfg.seed, i) for i in range(cfg.prompts)]
    profile = calibrate(model, prompts, cfg.epsilon, cfg.delta)
    rows = [
        {"layer": i, "R": r, "R_hat": rh, "sparse": i in profile.sparse_layers}
        for i, (r, rh) in enumerate(zip(profile.R, profile.R_hat))
    ]
    meta = profile.to_dict()
    return Report("drift", cfg.to_dict(), rows, meta)


def cmd_triplet(cfg: RunConfig) -> Report:
    """Random three-layer sparsification against mean normalised drift.

    Drift is normalised by its largest value. Deviation is the relative L2
    distance of the final residual stream from the dense pass; the control
    column repeats each run with tau = 0.
    """
    model = load_model(cfg)
    n_layers = model.config.n_layers
    if n_layers < 4:
        raise ConfigError(f"triplet needs a model with at least 4 layers, got {n_layers}")
    length = int(cfg.seq_len[0])
    tau = float(cfg.tau[0])
    tokens = prompt_tokens(model, length, cfg.seed)
    dense = model.forward(tokens)
    drift = compute_drift(dense.hidden_trace, cfg.epsilon)
    peak = float(drift.max())
    norm_drift = drift / peak if peak > 0 else np.zeros_like(drift)
    rng = np.random.default_rng([cfg.seed, 1])
    cache = {}

    def deviation(layers, t):
        key = (layers, t)
        if key not in cache:
            result = model.forward(tokens, _plan(cfg, "dynamic", layers, tau=t))
            cache[key] = relative_deviation(result.hidden_trace[-1], dense.hidden_trace[-1])
        return cache[key]

    rows = []
    for run in range(cfg.runs):
        layers = tuple(sorted(int(i) for i in rng.choice(n_layers, size=3, replace=False)))
        rows.append(
            {
                "run": run,
                "layers": "-".join(str(i) for i in layers),
                "mean_drift": float(np.mean(norm_drift[list(layers)])),
                "output_deviation": deviation(layers, tau),
                "control_deviation": deviation(layers, 0.0),
            }
        )
    rho = None
    if len(rows) >= 2:
        value = spearmanr([r["mean_drift"] for r in rows], [r["output_deviation"] for r in rows])[0]
        rho = None if math.isnan(value) else float(value)
    meta = {"spearman_rho": rho, "runs": len(rows), "tau": tau, "seq_len": length}
    return Report("triplet", cfg.to_dict(), rows, meta)


def cmd_flops(cfg: RunConfig) -> Report:
    """Per-layer cost breakdown, from explicit budgets or a real forward pass."""
    model = load_model(cfg)
    mc = model.config
    length = int(cfg.seq_len[0])
    if cfg.k_keep is not None:
        if len(cfg.k_keep) != mc.n_layers:
            raise ConfigError(f"--k-keep needs {mc.n_layers} entries, got {len(cfg.k_keep)}")
        budgets = [None if k is None else int(k) for k in cfg.k_keep]
    else:
        tokens = prompt_tokens(model, length, cfg.seed)
        dense = model.forward(tokens)
        layers = _sparse_layers(cfg, dense.hidden_trace)
        plan = _plan(cfg, cfg.mode, layers, tau=float(cfg.tau[0]), s=float(cfg.s_fixed[0]))
        result = model.forward(tokens, plan)
        budgets = [st.k_keep if st.sparse else None for st in result.stats]
    report = estimate_flops(length, mc.d_head, mc.n_heads, budgets, cfg.last_q, cfg.kernel)
    rows = []
    for layer, k in enumerate(budgets):
        single = estimate_flops(length, mc.d_head, mc.n_heads, [k], cfg.last_q, cfg.kernel)
        rows.append(
            {
                "layer": layer,
                "k_keep": length if k is None else k,
                "sparse": k is not None,
                "map_sparsity": single.avg_map_sparsity,
                "dense_flops": single.dense_flops,
                "sparse_flops": single.sparse_flops,
                "overhead_flops": single.overhead_flops,
            }
        )
    meta = report.to_dict()
    meta["seq_len"] = length
    return Report("flops", cfg.to_dict(), rows, meta)


RUNNERS = {
    "equiv": cmd_equiv,
    "sweep": cmd_sweep,
    "fixed-vs-dynamic": cmd_fixed_vs_dynamic,
    "drift": cmd_drift,
    "triplet": cmd_triplet,
    "flops": cmd_flops,
}


def run(cfg: RunConfig) -> Report:
    cfg.validate()
    return RUNNERS[cfg.command](cfg)
