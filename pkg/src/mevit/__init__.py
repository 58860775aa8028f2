"""Multi-exit Vision Transformer toolkit.

A ViT backbone augmentable with seven early-exit branch architectures,
trainable classifier-wise, end-to-end or layer-wise, profiled by exact
FLOP accounting, and served through an anytime runtime that answers a
compute budget or an interrupt with the deepest completed exit.
"""

from .anytime import AnytimeResult, BudgetPolicy, NoExitCompletedError, run_anytime, select_exit
from .branches import ARCHITECTURES, make_branch, to_grid
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    LabeledImageSet,
    gen_count_regression,
    gen_two_class_images,
    load_fashion_mnist,
    load_idx,
)
from .flops import branch_flops, cumulative_flops, final_exit_flops, flops_of
from .multi_exit import (
    MultiExitModel,
    TrainConfig,
    combined_loss,
    train_backbone,
    train_classifier_wise,
    train_end_to_end,
    train_layer_wise,
)
from .optim import Adam, PlateauScheduler
from .profiling import ExitProfile, mark_practical, profile_all_exits
from .tensor import Tensor, no_grad
from .vit import ViTBackbone, ViTConfig

__version__ = "0.1.0"

__all__ = [
    "ARCHITECTURES",
    "Adam",
    "AnytimeResult",
    "BudgetPolicy",
    "ExitProfile",
    "LabeledImageSet",
    "MultiExitModel",
    "NoExitCompletedError",
    "PlateauScheduler",
    "Tensor",
    "TrainConfig",
    "ViTBackbone",
    "ViTConfig",
    "branch_flops",
    "combined_loss",
    "cumulative_flops",
    "final_exit_flops",
    "flops_of",
    "gen_count_regression",
    "gen_two_class_images",
    "load_checkpoint",
    "load_fashion_mnist",
    "load_idx",
    "make_branch",
    "mark_practical",
    "no_grad",
    "profile_all_exits",
    "run_anytime",
    "save_checkpoint",
    "select_exit",
    "to_grid",
    "train_backbone",
    "train_classifier_wise",
    "train_end_to_end",
    "train_layer_wise",
]
