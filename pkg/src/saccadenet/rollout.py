"""Attention rollout, CLS heat extraction, and top-k patch selection.

Rollout composes the per-layer attention maps into a single source
attribution matrix: each layer's map is mixed with the identity (residual
paths carry attention forward too), row-normalized, and multiplied onto the
running product with later layers on the left. Slicing the CLS row of the
result gives the per-patch heat used to pick saccade targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .vit import AttentionStack

HEAD_FUSIONS = ("mean", "max", "min")


@dataclass
class HeatMap:
    """Per-patch mass from the CLS row; ``grid`` is the (g, g) spatial view."""

    heat: np.ndarray
    grid_size: int

    def __post_init__(self):
        self.heat = np.asarray(self.heat)
        if self.heat.ndim != 1 or self.heat.size != self.grid_size**2:
            raise ValueError(
                f"heat must be a flat vector of {self.grid_size}^2 values, got shape {self.heat.shape}"
            )
        if self.heat.min() < 0:
            raise ValueError("heat values must be nonnegative")

    @property
    def grid(self) -> np.ndarray:
        return self.heat.reshape(self.grid_size, self.grid_size)


def fuse_heads(attn: AttentionStack | np.ndarray, mode: str = "mean") -> np.ndarray:
    """Reduce (L, H, S, S) head maps to (L, S, S).

    Mean fusion keeps rows stochastic; max/min do not (rollout re-normalizes
    either way).
    """
    probs = attn.probs if isinstance(attn, AttentionStack) else np.asarray(attn)
    if probs.ndim != 4:
        raise ValueError(f"expected (L, H, S, S) attention, got shape {probs.shape}")
    if mode == "mean":
        return probs.mean(axis=1)
    if mode == "max":
        return probs.max(axis=1)
    if mode == "min":
        return probs.min(axis=1)
    raise ValueError(f"head fusion must be one of {HEAD_FUSIONS}, got {mode!r}")


def attention_rollout(fused: np.ndarray) -> np.ndarray:
    """Compose (L, S, S) fused maps into one (S, S) row-stochastic matrix.

    Per layer the map is mixed with the identity and row-normalized
    (0.5*A + 0.5*I when A is already stochastic); layer l multiplies the
    running product on the left, so the result propagates the output CLS
    back onto input tokens. Computed in float64.
    """
    fused = np.asarray(fused, dtype=np.float64)
    if fused.ndim != 3 or fused.shape[1] != fused.shape[2]:
        raise ValueError(f"expected (L, S, S) fused attention, got shape {fused.shape}")
    s = fused.shape[1]
    eye = np.eye(s, dtype=np.float64)
    result = eye.copy()
    for layer, a in enumerate(fused):
        mixed = a + eye
        row_sums = mixed.sum(axis=1, keepdims=True)
        if np.any(row_sums <= 0.0):
            bad = int(np.argmax(row_sums[:, 0] <= 0.0))
            raise ValueError(f"layer {layer} row {bad} sums to zero and cannot be normalized")
        result = (mixed / row_sums) @ result
    return result


def cls_heat(rolled: np.ndarray) -> HeatMap:
    """Slice the CLS row (dropping the CLS column) into a (g, g) heat map."""
    rolled = np.asarray(rolled)
    if rolled.ndim != 2 or rolled.shape[0] != rolled.shape[1]:
        raise ValueError(f"expected a square rollout matrix, got shape {rolled.shape}")
    n = rolled.shape[0] - 1
    g = math.isqrt(n)
    if g * g != n:
        raise ValueError(f"patch count {n} is not a perfect square")
    return HeatMap(heat=rolled[0, 1:].copy(), grid_size=g)


def topk_indices(heat: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest values, ascending; ties go to lower indices."""
    heat = np.asarray(heat)
    if heat.ndim != 1:
        raise ValueError(f"expected a flat score vector, got shape {heat.shape}")
    n = heat.size
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    order = np.argsort(-heat, kind="stable")[:k]
    return sorted(int(i) for i in order)
