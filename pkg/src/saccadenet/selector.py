"""Per-patch attendance prediction with a small residual CNN.

The selector looks at a whole image and emits one logit per patch saying
whether the teacher's rollout would attend there. Training is multi-label
BCE against the stored top-k indices; at inference the k largest logits
become the student's patch selection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import Rng
from .rollout import topk_indices


@dataclass
class SelectorConfig:
    stages: tuple = ((32, 2), (64, 2), (128, 2))
    input_size: int = 64
    n_outputs: int = 64  # one logit per student patch
    k: int = 8

    def __post_init__(self):
        self.stages = tuple((int(c), int(b)) for c, b in self.stages)
        if not 1 <= self.k <= self.n_outputs:
            raise ValueError(f"k must be in [1, {self.n_outputs}], got {self.k}")


@dataclass
class SelectorMetrics:
    """Threshold-0.5 confusion metrics plus top-k overlap, all in [0, 1].

    ``sensitivity``/``specificity`` are None when the ground truth has no
    positives/negatives to measure them on.
    """

    per_patch_accuracy: float
    sensitivity: float | None
    specificity: float | None
    overlap_at_k: float


def init_selector_params(config: SelectorConfig, rng: Rng, dtype=np.float32) -> dict[str, Tensor]:
    """He-initialized convs; the second conv of every residual block starts
    at zero so each block begins as an identity-plus-shortcut.

    Downsampling convolutions (the stem and each stage transition) use even
    4x4 kernels so the stride-2 output size divides exactly; projections on
    strided shortcuts use 2x2 kernels for the same reason.
    """

    def he(shape):
        fan_in = shape[1] * shape[2] * shape[3]
        return Tensor(rng.normal(shape, std=np.sqrt(2.0 / fan_in), dtype=dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    params: dict[str, Tensor] = {}
    first = config.stages[0][0]
    params["stem.w"] = he((first, 3, 4, 4))
    params["stem.b"] = zeros((first,))
    in_ch = first
    for s, (ch, blocks) in enumerate(config.stages):
        for b in range(blocks):
            prefix = f"stages.{s}.blocks.{b}"
            stride2 = s > 0 and b == 0
            params[f"{prefix}.conv1.w"] = he((ch, in_ch, 4, 4) if stride2 else (ch, in_ch, 3, 3))
            params[f"{prefix}.conv1.b"] = zeros((ch,))
            params[f"{prefix}.conv2.w"] = zeros((ch, ch, 3, 3))
            params[f"{prefix}.conv2.b"] = zeros((ch,))
            if stride2 or in_ch != ch:
                kp = 2 if stride2 else 1
                params[f"{prefix}.proj.w"] = he((ch, in_ch, kp, kp))
                params[f"{prefix}.proj.b"] = zeros((ch,))
            in_ch = ch
    params["head.w"] = Tensor(rng.normal((in_ch, config.n_outputs), std=0.02, dtype=dtype),
                              requires_grad=True)
    params["head.b"] = zeros((config.n_outputs,))
    return params


def _bias(t: Tensor) -> Tensor:
    return t.reshape(1, t.shape[0], 1, 1)


def selector_forward(image, params: dict[str, Tensor], config: SelectorConfig) -> Tensor:
    """Residual CNN -> global average pool -> N raw logits (no sigmoid).

    Accepts one (3, s, s) image (returns (N,)) or a (B, 3, s, s) batch
    (returns (B, N)).
    """
    x = np.asarray(image.data if isinstance(image, Tensor) else image)
    single = x.ndim == 3
    if x.shape[-1] != config.input_size or x.shape[-2] != config.input_size:
        raise ValueError(f"image shape {x.shape} does not match input_size {config.input_size}")
    dtype = params["stem.w"].data.dtype
    h = Tensor((x[None] if single else x).astype(dtype, copy=False))

    h = ad.relu(ad.conv2d(h, params["stem.w"], stride=2, padding=1) + _bias(params["stem.b"]))
    for s, (ch, blocks) in enumerate(config.stages):
        for b in range(blocks):
            prefix = f"stages.{s}.blocks.{b}"
            stride = 2 if (s > 0 and b == 0) else 1
            mid = ad.relu(
                ad.conv2d(h, params[f"{prefix}.conv1.w"], stride=stride, padding=1)
                + _bias(params[f"{prefix}.conv1.b"])
            )
            res = ad.conv2d(mid, params[f"{prefix}.conv2.w"], stride=1, padding=1) + _bias(
                params[f"{prefix}.conv2.b"]
            )
            if f"{prefix}.proj.w" in params:
                shortcut = ad.conv2d(h, params[f"{prefix}.proj.w"], stride=stride, padding=0) + _bias(
                    params[f"{prefix}.proj.b"]
                )
            else:
                shortcut = h
            h = ad.relu(res + shortcut)
    pooled = h.mean(axis=(2, 3))  # (B, C)
    logits = pooled @ params["head.w"] + params["head.b"]
    return logits[0] if single else logits


def selector_loss(logits: Tensor, multi_hot) -> Tensor:
    """Mean BCE over every patch position, positives and negatives alike."""
    target = np.asarray(multi_hot.data if isinstance(multi_hot, Tensor) else multi_hot)
    if target.shape != logits.shape:
        raise ValueError(f"multi_hot shape {target.shape} != logits shape {logits.shape}")
    return ad.bce_with_logits(logits, target)


def predict_topk(logits, k: int) -> list[int]:
    """Top-k patch indices from raw logits (sigmoid is monotone, so logits
    rank identically); same ascending/tie rules as rollout selection."""
    arr = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    return topk_indices(arr, k)


def selection_metrics(pred_logits, gt_multi_hot, k: int) -> SelectorMetrics:
    """Confusion metrics at probability threshold 0.5 plus mean top-k overlap.

    Accepts single (N,) vectors or batched (B, N) arrays; batched inputs
    aggregate confusion counts over every position and average overlap over
    rows.
    """
    logits = np.atleast_2d(np.asarray(pred_logits.data if isinstance(pred_logits, Tensor) else pred_logits))
    gt = np.atleast_2d(np.asarray(gt_multi_hot.data if isinstance(gt_multi_hot, Tensor) else gt_multi_hot))
    if logits.shape != gt.shape:
        raise ValueError(f"shape mismatch: logits {logits.shape}, ground truth {gt.shape}")
    pred_pos = logits > 0.0  # sigmoid(x) > 0.5 iff x > 0
    gt_pos = gt > 0.5
    tp = int(np.sum(pred_pos & gt_pos))
    tn = int(np.sum(~pred_pos & ~gt_pos))
    fp = int(np.sum(pred_pos & ~gt_pos))
    fn = int(np.sum(~pred_pos & gt_pos))
    total = logits.size
    accuracy = (tp + tn) / total
    sensitivity = tp / (tp + fn) if (tp + fn) > 0 else None
    specificity = tn / (tn + fp) if (tn + fp) > 0 else None
    overlaps = []
    for row_logits, row_gt in zip(logits, gt_pos):
        chosen = set(predict_topk(row_logits, k))
        truth = set(np.flatnonzero(row_gt).tolist())
        overlaps.append(len(chosen & truth) / k)
    return SelectorMetrics(per_patch_accuracy=accuracy, sensitivity=sensitivity,
                           specificity=specificity, overlap_at_k=float(np.mean(overlaps)))
