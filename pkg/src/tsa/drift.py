"""Inter-layer representation drift and sparse-layer selection.

Drift of layer ``l`` is the mean over tokens of
``||h[l+1, t] - h[l, t]|| / (||h[l, t]|| + eps)`` where ``h[l]`` is the
residual stream entering layer ``l``. Layers whose normalised drift rank is
at most ``delta`` are the ones token sparsity is applied to.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .tensor_core import DimensionError

DEFAULT_DELTA = 0.5
DEFAULT_EPSILON = 1e-6


@dataclass
class DriftProfile:
    R: list
    R_hat: list
    delta: float
    sparse_layers: list
    epsilon: float = DEFAULT_EPSILON

    def to_dict(self) -> dict:
        return {
            "R": [float(r) for r in self.R],
            "R_hat": [float(r) for r in self.R_hat],
            "delta": float(self.delta),
            "epsilon": float(self.epsilon),
            "sparse_layers": [int(i) for i in self.sparse_layers],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "DriftProfile":
        return cls(
            R=list(d["R"]),
            R_hat=list(d["R_hat"]),
            delta=float(d["delta"]),
            sparse_layers=list(d["sparse_layers"]),
            epsilon=float(d.get("epsilon", DEFAULT_EPSILON)),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DriftProfile":
        return cls.from_dict(json.loads(Path(path).read_text()))


def compute_drift(hidden: Sequence, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Drift for every consecutive pair in ``hidden`` (len(hidden) - 1 values)."""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if len(hidden) < 2:
        raise ValueError("need hidden states for at least two layer boundaries")
    states = [np.asarray(h, dtype=np.float64) for h in hidden]
    shape = states[0].shape
    for i, h in enumerate(states):
        if h.ndim != 2 or h.shape != shape:
            raise DimensionError(f"hidden state {i} has shape {h.shape}, expected {shape}")
    drift = np.empty(len(states) - 1)
    for layer in range(len(states) - 1):
        cur, nxt = states[layer], states[layer + 1]
        num = np.linalg.norm(nxt - cur, axis=1)
        den = np.linalg.norm(cur, axis=1) + epsilon
        drift[layer] = np.mean(num / den)
    return drift


def drift_ranks(drift) -> np.ndarray:
    """Fraction of layers whose drift is <= each layer's drift (ties share a rank)."""
    r = np.asarray(drift, dtype=np.float64)
    return (r[None, :] <= r[:, None]).sum(axis=1) / r.size


def select_sparse_layers(drift, delta: float = DEFAULT_DELTA, epsilon: float = DEFAULT_EPSILON) -> DriftProfile:
    r = np.asarray(drift, dtype=np.float64)
    if r.size == 0:
        raise ValueError("drift vector is empty")
    ranks = drift_ranks(r)
    return DriftProfile(
        R=r.tolist(),
        R_hat=ranks.tolist(),
        delta=float(delta),
        sparse_layers=np.flatnonzero(ranks <= delta).tolist(),
        epsilon=float(epsilon),
    )


def calibrate(
    model,
    prompts: Sequence,
    epsilon: float = DEFAULT_EPSILON,
    delta: float = DEFAULT_DELTA,
    path: Optional[str] = None,
) -> DriftProfile:
    """One-off preprocessing: dense passes over ``prompts``, drift averaged per layer."""
    if len(prompts) == 0:
        raise ValueError("calibration needs at least one prompt")
    total = None
    for tokens in prompts:
        trace = model.forward(tokens).hidden_trace
        d = compute_drift(trace, epsilon)
        total = d if total is None else total + d
    profile = select_sparse_layers(total / len(prompts), delta, epsilon)
    if path is not None:
        profile.save(path)
    return profile
