"""Saccade attention pipeline.

A teacher vision transformer marks the patches it attends to (via attention
rollout), a small CNN learns to predict those patches from pixels, and a
student transformer classifies images while attending only to the k
selected patches, shrinking every attention map from S x S to (k+1) x
(k+1). An analytic cost model accounts for the parameter and FLOP budgets.
"""

from .autodiff import Tensor, no_grad
from .cost import CostReport, attention_comparisons, count_flops, count_params, model_cost
from .data import (
    ImageRecord,
    SaccadeRecord,
    build_saccade_targets,
    gen_shapes,
    hflip,
    random_resized_crop,
    read_cifar100,
    read_saccade_file,
    train_val_split,
    write_saccade_file,
)
from .estimators import AttentionRollout, PatchSelector, SaccadeViTClassifier, ViTClassifier
from .optim import AdamState, adam_init, adam_step
from .rng import Rng
from .rollout import HeatMap, attention_rollout, cls_heat, fuse_heads, topk_indices
from .selector import (
    SelectorConfig,
    SelectorMetrics,
    predict_topk,
    selection_metrics,
    selector_forward,
    selector_loss,
)
from .student import SanVitConfig, gather_patches, resolve_indices, sanvit_forward
from .training import (
    ExperimentConfig,
    PreparedData,
    TrainResult,
    compare,
    evaluate,
    prepare_data,
    train,
)
from .vit import AttentionStack, ViTConfig, init_vit_params, patchify, sinusoidal_pe, vit_forward

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AttentionRollout",
    "AttentionStack",
    "CostReport",
    "ExperimentConfig",
    "HeatMap",
    "ImageRecord",
    "PatchSelector",
    "PreparedData",
    "Rng",
    "SaccadeRecord",
    "SaccadeViTClassifier",
    "SanVitConfig",
    "SelectorConfig",
    "SelectorMetrics",
    "Tensor",
    "TrainResult",
    "ViTClassifier",
    "ViTConfig",
    "adam_init",
    "adam_step",
    "attention_comparisons",
    "attention_rollout",
    "build_saccade_targets",
    "cls_heat",
    "compare",
    "count_flops",
    "count_params",
    "evaluate",
    "fuse_heads",
    "gather_patches",
    "gen_shapes",
    "hflip",
    "init_vit_params",
    "model_cost",
    "no_grad",
    "patchify",
    "predict_topk",
    "prepare_data",
    "random_resized_crop",
    "read_cifar100",
    "read_saccade_file",
    "resolve_indices",
    "sanvit_forward",
    "selection_metrics",
    "selector_forward",
    "selector_loss",
    "sinusoidal_pe",
    "topk_indices",
    "train",
    "train_val_split",
    "vit_forward",
    "write_saccade_file",
]
