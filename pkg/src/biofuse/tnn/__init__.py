"""Twin-network recognition: branches, triplet loss, mining, training, model IO."""

from .arch import (
    ArchKind,
    ArchSpec,
    ConvSpec,
    DenseSpec,
    PoolSpec,
    default_branch,
    fusion_arch,
    single_modality_arch,
)
from .io import load_model, save_model
from .loss import Triplet, backward, mine_triplets, pairwise_sq_dists, triplet_loss
from .network import EmbeddingModel, embed_parts, forward_batch, stack_inputs
from .train import TrainConfig, make_batches, train

__all__ = [
    "ArchKind",
    "ArchSpec",
    "ConvSpec",
    "DenseSpec",
    "PoolSpec",
    "EmbeddingModel",
    "TrainConfig",
    "Triplet",
    "backward",
    "default_branch",
    "embed_parts",
    "forward_batch",
    "fusion_arch",
    "load_model",
    "make_batches",
    "mine_triplets",
    "pairwise_sq_dists",
    "save_model",
    "single_modality_arch",
    "stack_inputs",
    "train",
    "triplet_loss",
]
