"""Attention-based ensembles for deep metric learning, desk scale.

A from-scratch float64 autodiff core, five ensemble architectures over a toy
convolutional backbone, contrastive and divergence losses, pair sampling,
synthetic part-compositional data, Recall@K evaluation, and an experiment CLI.
"""

from .config import ExperimentConfig, load_config
from .data import Dataset, SyntheticSpec, generate, load_dataset, save_dataset, split_disjoint_classes
from .errors import ConfigError, DataError, NumericalAbort, ShapeError
from .evaluation import (
    EmbeddingSet,
    MetricsRecord,
    best_checkpoint_selection,
    cosine_pair_stats,
    embed_dataset,
    ensemble_distance_matrix,
    recall_at_k,
)
from .losses import LossConfig, contrastive_loss, divergence_loss, total_loss
from .model import BackboneConfig, EnsembleModel, TrunkLayer, Variant, init_parameters
from .sampler import LabeledDatasetView, PairBatch, build_batch, label_indicator
from .tensor import OptimizerState, Tensor, backward, no_grad, sgd_momentum_step
from .train import run_training

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "ConfigError",
    "DataError",
    "Dataset",
    "EmbeddingSet",
    "EnsembleModel",
    "ExperimentConfig",
    "LabeledDatasetView",
    "LossConfig",
    "MetricsRecord",
    "NumericalAbort",
    "OptimizerState",
    "PairBatch",
    "ShapeError",
    "SyntheticSpec",
    "Tensor",
    "TrunkLayer",
    "Variant",
    "backward",
    "best_checkpoint_selection",
    "build_batch",
    "contrastive_loss",
    "cosine_pair_stats",
    "divergence_loss",
    "embed_dataset",
    "ensemble_distance_matrix",
    "generate",
    "init_parameters",
    "label_indicator",
    "load_config",
    "load_dataset",
    "no_grad",
    "recall_at_k",
    "run_training",
    "save_dataset",
    "sgd_momentum_step",
    "split_disjoint_classes",
    "total_loss",
]
