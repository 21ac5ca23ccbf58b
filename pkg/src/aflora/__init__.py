"""Desk-scale simulator for federated LoRA fine-tuning with diagonal-gated
dynamic ranks, decoupled A/B training, and zero-padding rank-aware aggregation."""

from .adapter import DecoupledAdapter, LoraHyper, delta_weight, merged_upload, truncate_a
from .client import ClientState, ClientUpdate, ddr_prune, local_round
from .harness import ExperimentConfig, RoundMetrics, run_experiment
from .server import GlobalState, aggregate_b, harmonize, rank_aware_weights

__all__ = [
    "ClientState", "ClientUpdate", "DecoupledAdapter", "ExperimentConfig", "GlobalState",
    "LoraHyper", "RoundMetrics", "aggregate_b", "ddr_prune", "delta_weight", "harmonize",
    "local_round", "merged_upload", "rank_aware_weights", "run_experiment", "truncate_a",
]
