"""Mixture-of-prompts instruction tuning at desk scale.

A small frozen decoder-only transformer, mid-layer injection of expert prompt
groups weighted by a learned gate, magnitude-pruning / int8 compression
proxies, and a FedAvg training simulator. Everything is float64, seeded and
bit-reproducible.
"""

from .config import ModelConfig
from .errors import ConfigError, InputError, PromptmixError, TrainingDiverged
from .compression import (
    CompressionSpec,
    compress,
    prune_structured,
    prune_unstructured,
    quantize_int8,
    sparsity,
)
from .data import Sample, TaskCorpus, TaskSpec, default_task_specs, generate_corpus, load_corpus, save_corpus
from .federated import (
    ClientPartition,
    FederationConfig,
    derive_local_seed,
    fedavg,
    partition_skewed,
    train_federated,
)
from .gating import GatingParams, forward_mop, gate, group_mass, scale_prompt_columns
from .model import (
    Backbone,
    ForwardTrace,
    build_extended_mask,
    forward_plain,
    forward_prompted,
    init_backbone,
    load_backbone,
    save_backbone,
)
from .training import (
    LossReport,
    RunMetrics,
    TrainableState,
    evaluate,
    init_trainable_state,
    loss,
    per_task_gate_means,
    pretrain_backbone,
    pretrain_gating,
    pretrain_input_prompts,
    train_centralized,
)

__version__ = "0.1.0"

__all__ = [
    "Backbone",
    "ClientPartition",
    "CompressionSpec",
    "ConfigError",
    "FederationConfig",
    "ForwardTrace",
    "GatingParams",
    "InputError",
    "LossReport",
    "ModelConfig",
    "PromptmixError",
    "RunMetrics",
    "Sample",
    "TaskCorpus",
    "TaskSpec",
    "TrainableState",
    "TrainingDiverged",
    "build_extended_mask",
    "compress",
    "default_task_specs",
    "derive_local_seed",
    "evaluate",
    "fedavg",
    "forward_mop",
    "forward_plain",
    "forward_prompted",
    "gate",
    "generate_corpus",
    "group_mass",
    "init_backbone",
    "init_trainable_state",
    "load_backbone",
    "load_corpus",
    "loss",
    "partition_skewed",
    "per_task_gate_means",
    "pretrain_backbone",
    "pretrain_gating",
    "pretrain_input_prompts",
    "prune_structured",
    "prune_unstructured",
    "quantize_int8",
    "save_backbone",
    "save_corpus",
    "scale_prompt_columns",
    "sparsity",
    "train_centralized",
    "train_federated",
]
