"""Reduced-attention student classifier.

The student embeds every patch of the image, gathers only the k selected
ones (gradients flow through the gathered embeddings; the discrete index
choice itself is not differentiated), and runs the shared transformer stack
over the short CLS+k sequence, shrinking each attention map from S x S to
(k+1) x (k+1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SaccadeRecord
from .rng import Rng
from .selector import SelectorConfig, predict_topk, selector_forward
from .vit import ViTConfig, init_vit_params, sinusoidal_pe, transformer_encode

PE_VARIANTS = ("sin_full_preslice", "learned_postslice", "none")
INDEX_SOURCES = ("san", "ground_truth")


@dataclass
class SanVitConfig:
    base: ViTConfig
    k: int = 8
    pe_variant: str = "sin_full_preslice"
    index_source: str = "san"

    def __post_init__(self):
        if not 1 <= self.k <= self.base.n_patches:
            raise ValueError(f"k must be in [1, {self.base.n_patches}], got {self.k}")
        if self.pe_variant not in PE_VARIANTS:
            raise ValueError(f"pe_variant must be one of {PE_VARIANTS}, got {self.pe_variant!r}")
        if self.index_source not in INDEX_SOURCES:
            raise ValueError(f"index_source must be one of {INDEX_SOURCES}, got {self.index_source!r}")


def init_sanvit_params(config: SanVitConfig, rng: Rng, dtype=np.float32) -> dict[str, Tensor]:
    """Student weights: a full ViT parameter set (the table-based preslice
    variant has no PE parameters) plus a learned (k+1)-slot table when the
    post-slice variant is configured."""
    base = config.base
    if base.pe_mode == "learned":
        # the full-grid learned table is never used after slicing
        base = ViTConfig(**{**base.__dict__, "pe_mode": "sinusoidal"})
    params = init_vit_params(base, rng, dtype=dtype)
    if config.pe_variant == "learned_postslice":
        params["pos_slots"] = Tensor(rng.normal((config.k + 1, base.dim), std=0.02, dtype=dtype),
                                     requires_grad=True)
    return params


def gather_patches(embedded: Tensor, indices) -> Tensor:
    """Pick the selected patch embeddings, keeping the given order.

    ``embedded`` is (N, D) with (k,) indices or (B, N, D) with (B, k).
    Duplicate or out-of-range indices are rejected; the backward pass
    scatters gradients to exactly the selected rows and leaves every other
    row at zero.
    """
    return ad.gather_rows(embedded, np.asarray(indices, dtype=np.intp))


def sanvit_forward(image, indices, params: dict[str, Tensor], config: SanVitConfig,
                   training: bool = False, rng=None, return_attention: bool = False):
    """Classify from the k selected patches.

    A (3, s, s) image with (k,) indices returns (C,) logits; a batched
    (B, 3, s, s) input takes (B, k) indices and returns (B, C). With
    ``return_attention`` the recorded (B, L, H, k+1, k+1) probabilities are
    returned alongside.
    """
    from .vit import patchify  # local import to keep module load cheap

    base = config.base
    image = np.asarray(image.data if isinstance(image, Tensor) else image)
    single = image.ndim == 3
    idx = np.asarray(indices, dtype=np.intp)
    if single:
        if idx.ndim != 1:
            raise ValueError(f"single image needs flat indices, got shape {idx.shape}")
    elif idx.ndim != 2 or idx.shape[0] != image.shape[0]:
        raise ValueError(f"batch of {image.shape[0]} needs (B, k) indices, got {idx.shape}")
    if idx.shape[-1] != config.k:
        raise ValueError(f"expected {config.k} indices per image, got {idx.shape[-1]}")

    patches = patchify(image[None] if single else image, base.patch_size)
    dtype = params["patch_embed.w"].data.dtype
    x = Tensor(patches.astype(dtype, copy=False))
    b = x.shape[0]
    d = base.dim

    h = x @ params["patch_embed.w"] + params["patch_embed.b"]  # (B, N, D)
    cls = params["cls"].reshape(1, 1, d)
    if config.pe_variant == "sin_full_preslice":
        pe = sinusoidal_pe(base.seq_len, d, dtype=dtype)
        h = h + Tensor(pe[1:])  # full-grid table added before slicing
        cls = cls + Tensor(pe[0].reshape(1, 1, d))

    h = gather_patches(h, idx[None] if single else idx)  # (B, k, D)
    h = ad.concat([ad.broadcast_to(cls, (b, 1, d)), h], axis=1)  # (B, k+1, D)
    if config.pe_variant == "learned_postslice":
        h = h + params["pos_slots"]

    h, probs = transformer_encode(h, params, base, training=training, rng=rng)
    logits = h[:, 0] @ params["head.w"] + params["head.b"]
    logits = logits[0] if single else logits
    if return_attention:
        return logits, probs[0] if single else probs
    return logits


def resolve_indices(image, config: SanVitConfig,
                    san_params: dict[str, Tensor] | None = None,
                    selector_config: SelectorConfig | None = None,
                    saccade_record: SaccadeRecord | None = None) -> list[int]:
    """Produce the k patch indices for one image from the configured source."""
    if config.index_source == "san":
        if san_params is None or selector_config is None:
            raise ValueError("index_source 'san' requires selector parameters and config")
        with ad.no_grad():
            logits = selector_forward(image, san_params, selector_config)
        return predict_topk(logits, config.k)
    if saccade_record is None:
        raise ValueError("index_source 'ground_truth' requires a saccade record")
    return list(saccade_record.indices)
