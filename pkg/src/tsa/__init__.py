"""Token-sparse attention on a small numpy transformer."""

from .attention import (
    HeadTensors,
    TokenSelection,
    dense_causal_attention,
    masked_sparse_oracle,
    token_sparse_attention,
)
from .coverage import (
    HeadScores,
    LayerScores,
    aggregate_scores,
    coverage_budget,
    fixed_budget,
    score_tokens,
    select_tokens,
)
from .drift import DriftProfile, calibrate, compute_drift, select_sparse_layers
from .flops import FlopReport, estimate_flops
from .model import Model, ModelConfig, SparsePlan, load_checkpoint

__version__ = "0.1.0"
