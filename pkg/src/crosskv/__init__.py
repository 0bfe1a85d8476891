"""Cross-model KV-cache reuse toolkit.

Library plus CLI for reusing one model's per-layer KV caches on a related
model: selective layer recomputation with transition-layer E-cache seeding,
offline critical-layer profiling with a Pareto frontier, transfer/recompute
pipelining, and a multi-replica serving simulator with SLO-adaptive
configuration choice.
"""

from .model import (
    Agreement,
    ECache,
    LayerKV,
    ModelConfig,
    ModelWeights,
    PerturbationSpec,
    RecomputeConfig,
    agreement_score,
    build_model,
    decode_greedy,
    full_prefill,
    make_synthetic_dataset,
    partial_prefill,
    token_selective_prefill,
)

__version__ = "0.1.0"

__all__ = [
    "Agreement",
    "ECache",
    "LayerKV",
    "ModelConfig",
    "ModelWeights",
    "PerturbationSpec",
    "RecomputeConfig",
    "agreement_score",
    "build_model",
    "decode_greedy",
    "full_prefill",
    "make_synthetic_dataset",
    "partial_prefill",
    "token_selective_prefill",
    "__version__",
]
