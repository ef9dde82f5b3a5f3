"""Few-shot classification with a prototype GNN and an instance GNN.

Subpackages are plain modules: ``diffcore`` (autodiff and optimizers),
``graph`` (graph layers), ``models`` (the networks and losses),
``episodes`` (feature pools and task sampling), ``trainer`` (training,
evaluation, ablation, diagnostics), ``checkpoint`` and ``cli``.
"""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .episodes import (Episode, FeatureStore, Split, SyntheticConfig, generate_synthetic_pool,
                       load_feature_file, sample_episode, save_feature_file, split_meta,
                       task_episode)
from .graph import AdjacencyKind, MaskMode
from .models import Consistency, HGNNModel, ModelConfig, Variant
from .trainer import (EvalReport, TrainConfig, ablate, diagnostics_fig4, evaluate, train)

__version__ = "0.1.0"

__all__ = [
    "AdjacencyKind", "CheckpointError", "Consistency", "Episode", "EvalReport", "FeatureStore",
    "HGNNModel", "MaskMode", "ModelConfig", "Split", "SyntheticConfig", "TrainConfig", "Variant",
    "ablate", "diagnostics_fig4", "evaluate", "generate_synthetic_pool", "load_checkpoint",
    "load_feature_file", "sample_episode", "save_checkpoint", "save_feature_file", "split_meta",
    "task_episode", "train",
]
