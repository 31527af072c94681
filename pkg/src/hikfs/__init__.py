"""Coarse-to-fine hierarchical classification with a memory-augmented KNN head."""

from .autodiff import Tensor, no_grad
from .data import (
    Dataset,
    gen_synthetic,
    load_dataset,
    load_split_manifest,
    mcfs_split,
    save_dataset,
    save_split_manifest,
    split_validation,
)
from .estimators import CoarseToFineClassifier, EpisodicFewShotClassifier
from .hierarchy import (
    ClassHierarchy,
    conditional_fine_probs,
    coarse_probs,
    marginal_fine_probs,
    hierarchical_nll,
)
from .memory import MemoryBank
from .model import EncoderConfig, ModelParams, forward_full, head_plan
from .training import (
    TrainConfig,
    evaluate_episodes,
    evaluate_supervised,
    finetune_supervised,
    pretrain_supervised,
    train_meta,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "no_grad",
    "ClassHierarchy",
    "conditional_fine_probs",
    "coarse_probs",
    "marginal_fine_probs",
    "hierarchical_nll",
    "Dataset",
    "gen_synthetic",
    "mcfs_split",
    "split_validation",
    "save_dataset",
    "load_dataset",
    "save_split_manifest",
    "load_split_manifest",
    "MemoryBank",
    "EncoderConfig",
    "ModelParams",
    "forward_full",
    "head_plan",
    "TrainConfig",
    "pretrain_supervised",
    "finetune_supervised",
    "train_meta",
    "evaluate_episodes",
    "evaluate_supervised",
    "CoarseToFineClassifier",
    "EpisodicFewShotClassifier",
    "__version__",
]
