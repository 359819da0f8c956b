"""Semi-supervised bidirectional GAN with a triplet term on the encoder."""

from .datasets import DatasetSplit, LabeledIndex, load_dataset, make_validation_split, select_labeled_subset, synthetic_shapes
from .evaluation import EmbeddingSet, EvalReport, embed, knn_classify, retrieval_map
from .losses import LossReport
from .models import ArchitectureConfig, LatentCode, build_models
from .sampler import TripletBatch, sample_hard_negative_batch, sample_triplet_batch
from .trainer import TrainConfig, TrainState, fit, resume, train_step

__version__ = "0.1.0"

__all__ = [
    "ArchitectureConfig",
    "DatasetSplit",
    "EmbeddingSet",
    "EvalReport",
    "LabeledIndex",
    "LatentCode",
    "LossReport",
    "TrainConfig",
    "TrainState",
    "TripletBatch",
    "build_models",
    "embed",
    "fit",
    "knn_classify",
    "load_dataset",
    "make_validation_split",
    "resume",
    "retrieval_map",
    "sample_hard_negative_batch",
    "sample_triplet_batch",
    "select_labeled_subset",
    "synthetic_shapes",
    "train_step",
    "__version__",
]
