"""Exit criteria for the package, one test per criterion.

Each test records a PASS/FAIL line that is printed in the
"acceptance criteria" section at the end of the pytest run.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest

from tsa import bench
from tsa.attention import HeadTensors, TokenSelection, masked_sparse_oracle, token_sparse_attention
from tsa.cli import main
from tsa.coverage import (
    HeadScores,
    LayerScores,
    aggregate_scores,
    coverage_budget,
    dynamic_selection,
    fixed_budget,
    select_tokens,
    sparse_count,
)
from tsa.drift import compute_drift, select_sparse_layers
from tsa.flops import estimate_flops
from tsa.model import Model, ModelConfig, SparsePlan

pytestmark = pytest.mark.acceptance


def test_oracle_equivalence(criterion):
    grid = list(itertools.product((16, 64, 256), (1, 4, 8), (8, 16, 32), (0.0, 0.005, 0.1, 0.5, 0.99)))
    worst = 0.0
    start = time.process_time()
    for i, (length, n_heads, d, tau) in enumerate(grid):
        rng = np.random.default_rng(1000 + i)
        q, k, v = (rng.standard_normal((n_heads, length, d)).astype(np.float32) for _ in range(3))
        heads = HeadTensors(q, k, v)
        sel = dynamic_selection(q, k, tau)
        out = token_sparse_attention(heads, sel)
        for h in range(n_heads):
            ref = masked_sparse_oracle(q[h], k[h], v[h], sel.per_head[h])
            worst = max(worst, float(np.max(np.abs(out[h] - ref))))
    elapsed = time.process_time() - start
    criterion(
        1,
        "token-sparse attention equals the masked oracle",
        len(grid) >= 100 and worst <= 1e-5 and elapsed < 60.0,
        f"{len(grid)} instances, max abs err {worst:.2e}, {elapsed:.1f}s CPU",
    )


def test_tau_zero_identity(criterion):
    worst = 0.0
    for seed in range(10):
        model = Model.random(ModelConfig(), seed=seed)
        tokens = np.random.default_rng(seed).integers(0, 512, 64)
        dense = model.forward(tokens).logits
        plan = SparsePlan("dynamic", tuple(range(model.config.n_layers)), tau=0.0)
        worst = max(worst, float(np.max(np.abs(model.forward(tokens, plan).logits - dense))))
    criterion(2, "dynamic mode at tau=0 reproduces dense logits", worst <= 1e-5, f"10 models, max abs diff {worst:.2e}")


def test_fixed_sparsity_arithmetic(criterion):
    cfg = bench.RunConfig(command="fixed-vs-dynamic", tau=[], s_fixed=[0.3, 0.5], seq_len=[256])
    rows = {r["s"]: r["map_sparsity"] for r in bench.run(cfg).rows}
    at_1000 = {s: 1 - (fixed_budget(1000, s) / 1000) ** 2 for s in (0.3, 0.5)}
    published = {0.3: 0.5096, 0.5: 0.7495}
    nominal = {0.3: 0.51, 0.5: 0.75}
    ok = all(
        abs(measured[s] - nominal[s]) <= 0.005 and abs(measured[s] - published[s]) <= 0.005
        for measured in (rows, at_1000)
        for s in (0.3, 0.5)
    )
    detail = ", ".join(f"s={s}: {rows[s]:.2%} (L=256), {at_1000[s]:.2%} (L=1000)" for s in (0.3, 0.5))
    criterion(3, "fixed-ratio map sparsity matches the reference table", ok, detail)


def test_budget_properties(criterion):
    rng = np.random.default_rng(42)
    failures = []
    for trial in range(1000):
        length = int(rng.integers(1, 200))
        raw = rng.exponential(size=length) ** rng.uniform(0.5, 4.0)
        s = LayerScores(s=(raw / raw.sum()).astype(np.float32))
        tau = float(rng.uniform(0.0, 1.0))
        order = np.argsort(s.s, kind="stable")
        prefix = np.cumsum(np.asarray(s.s, dtype=np.float64)[order])
        k_sparse = sparse_count(s, tau)
        if prefix[-1] >= tau:
            dropped = prefix[k_sparse - 1] if k_sparse else 0.0
            if dropped < tau:
                failures.append((trial, "dropped mass below tau"))
            if k_sparse >= 1 and (prefix[k_sparse - 2] if k_sparse >= 2 else 0.0) >= tau:
                failures.append((trial, "not minimal"))
        elif k_sparse != length:
            failures.append((trial, "unreachable tau must drop everything"))
        taus = np.sort(rng.uniform(0.0, 1.0, 5))
        budgets = [coverage_budget(s, t) for t in taus]
        if budgets != sorted(budgets, reverse=True):
            failures.append((trial, "budget not monotone in tau"))
        n_heads = int(rng.integers(1, 5))
        hs = HeadScores(rng.random((n_heads, length)).astype(np.float32), 1, 1)
        forced = set(rng.choice(length, size=int(rng.integers(0, min(length, 4) + 1)), replace=False).tolist())
        k_keep = int(rng.integers(max(1, len(forced)), length + 1))
        sel = select_tokens(hs, k_keep, forced)
        for idx in sel.per_head:
            if not (forced <= set(idx.tolist()) and np.all(np.diff(idx) > 0) and idx.size == k_keep):
                failures.append((trial, "selection invariant"))
    criterion(4, "coverage budget minimality/monotonicity and selection invariants", not failures, f"{len(failures)} failures in 1000 vectors")


def test_drift_correctness(criterion):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(10):
        hidden = [rng.standard_normal((16, 12)).astype(np.float32) for _ in range(5)]
        brute = []
        for cur, nxt in zip(hidden[:-1], hidden[1:]):
            per_token = [
                math.sqrt(sum((float(b) - float(a)) ** 2 for a, b in zip(cur[t], nxt[t])))
                / (math.sqrt(sum(float(a) ** 2 for a in cur[t])) + 1e-6)
                for t in range(cur.shape[0])
            ]
            brute.append(sum(per_token) / len(per_token))
        worst = max(worst, float(np.max(np.abs(compute_drift(hidden, 1e-6) - brute))))
    profile = select_sparse_layers([0.31, 0.12, 0.57, 0.44], 0.5)
    ok = worst <= 1e-6 and len(profile.sparse_layers) == 2 and profile.sparse_layers == [0, 1]
    criterion(5, "drift matches brute force; 4 distinct drifts select 2 layers", ok, f"max abs err {worst:.2e}")


def test_causality_and_zeroing(criterion):
    rng = np.random.default_rng(3)
    n_heads, length, d = 4, 48, 16
    q, k, v = (rng.standard_normal((n_heads, length, d)).astype(np.float32) for _ in range(3))
    sel = dynamic_selection(q, k, 0.3, last_q=16, kernel=3)
    base = token_sparse_attention(HeadTensors(q, k, v), sel)
    causal = True
    for t in (0, 10, 30, 46):
        k2, v2 = k.copy(), v.copy()
        k2[:, t + 1 :] += rng.standard_normal(k2[:, t + 1 :].shape).astype(np.float32) * 10
        v2[:, t + 1 :] += rng.standard_normal(v2[:, t + 1 :].shape).astype(np.float32) * 10
        pert = token_sparse_attention(HeadTensors(q, k2, v2), sel)
        causal &= base[:, : t + 1].tobytes() == pert[:, : t + 1].tobytes()
    zeroed = all(
        np.all(base[h][np.setdiff1d(np.arange(length), sel.per_head[h])].view(np.uint32) == 0) for h in range(n_heads)
    )

    model = Model.random(ModelConfig(), seed=11)
    tokens = rng.integers(0, 512, 40)
    x = model.embed(tokens)
    dropped = 17
    keep = [i for i in range(40) if i != dropped]
    per_head = [sorted(rng.choice(keep, size=25, replace=False).tolist()) for _ in range(model.config.n_heads)]
    attn, _ = model.attention_block(x, 1, selection=TokenSelection(k_keep=25, per_head=per_head))
    residual_err = float(np.max(np.abs((x + attn)[dropped] - x[dropped])))
    ok = causal and zeroed and residual_err <= 1e-6
    criterion(6, "causality, zeroed unselected rows, residual passthrough", ok, f"causal={causal} zeroed={zeroed} residual err {residual_err:.1e}")


def test_flop_model_consistency(criterion):
    ratio = estimate_flops(512, 16, 8, [256], 64, 7, include_overhead=False).sparse_layer_ratio
    cfg = bench.RunConfig(command="sweep", tau=[0.0, 0.001, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5], seq_len=[128, 256])
    rows = bench.run(cfg).rows
    monotone = True
    zero_ok = True
    for length in (128, 256):
        sub = [r for r in rows if r["seq_len"] == length]
        speeds = [r["est_speedup"] for r in sub]
        monotone &= speeds == sorted(speeds)
        zero_ok &= sub[0]["tau"] == 0.0 and sub[0]["est_speedup"] <= 1.0
    ok = ratio == 4.0 and monotone and zero_ok
    criterion(7, "FLOP ratio 4x at half budget; speedup monotone in tau; tau=0 <= 1", ok, f"ratio={ratio}, monotone={monotone}, tau0={zero_ok}")


def test_triplet_methodology(criterion):
    start = time.process_time()
    report = bench.run(bench.RunConfig(command="triplet", tau=[0.99], seq_len=[128], runs=200))
    elapsed = time.process_time() - start
    rho = report.meta["spearman_rho"]
    ok = (
        elapsed < 300
        and len(report.rows) == 200
        and rho is not None
        and -1.0 <= rho <= 1.0
        and all(r["control_deviation"] == 0.0 for r in report.rows)
    )
    criterion(8, "200-run random triplet experiment", ok, f"{len(report.rows)} rows, rho={rho}, {elapsed:.1f}s CPU")


def test_cli_determinism(criterion, tmp_path):
    commands = [
        ["equiv", "--trials", "30"],
        ["sweep", "--seq-len", "64", "128"],
        ["fixed-vs-dynamic", "--seq-len", "128"],
        ["drift", "--seq-len", "64", "--prompts", "2"],
        ["triplet", "--runs", "50", "--seq-len", "64"],
        ["flops", "--seq-len", "128"],
    ]
    mismatched = []
    for argv in commands:
        for ext in ("json", "csv"):
            outputs = []
            for run in range(2):
                path = tmp_path / f"{argv[0]}_{run}.{ext}"
                assert main(argv + ["--seed", "5", "--out", str(path)]) == 0
                outputs.append(path.read_bytes())
            if outputs[0] != outputs[1]:
                mismatched.append(f"{argv[0]}.{ext}")
        json.loads((tmp_path / f"{argv[0]}_0.json").read_text())
    criterion(9, "every CLI command is byte-identical across runs", not mismatched, f"mismatched: {mismatched or 'none'}")
