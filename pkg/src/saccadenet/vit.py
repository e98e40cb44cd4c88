"""Vision transformer with exposed per-layer attention probabilities.

The same configurable encoder serves as the desk-scale teacher and as the
full-attention baseline classifier. ``transformer_encode`` is shared with
the reduced-attention student so that the two produce bit-identical math
when given identical weights and sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import Rng

PE_MODES = ("sinusoidal", "learned", "none")


@dataclass
class ViTConfig:
    image_size: int = 64
    patch_size: int = 8
    dim: int = 64
    depth: int = 2
    heads: int = 2
    mlp_ratio: int = 4
    num_classes: int = 3
    pe_mode: str = "sinusoidal"
    dropout: float = 0.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.pe_mode not in PE_MODES:
            raise ValueError(f"pe_mode must be one of {PE_MODES}, got {self.pe_mode!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def seq_len(self) -> int:
        return self.n_patches + 1  # CLS prepended

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size


@dataclass
class AttentionStack:
    """Post-softmax attention probabilities of one forward pass, (L, H, S, S)."""

    probs: np.ndarray

    def __post_init__(self):
        if self.probs.ndim != 4:
            raise ValueError(f"expected (L, H, S, S) probabilities, got shape {self.probs.shape}")
        row_sums = self.probs.sum(axis=-1)
        if not np.allclose(row_sums, 1.0, atol=1e-5):
            worst = float(np.abs(row_sums - 1.0).max())
            raise ValueError(f"attention rows must sum to 1 within 1e-5 (worst deviation {worst:.2e})")
        if self.probs.min() < 0.0 or self.probs.max() > 1.0 + 1e-6:
            raise ValueError("attention probabilities must lie in [0, 1]")

    @property
    def layers(self) -> int:
        return self.probs.shape[0]

    @property
    def heads(self) -> int:
        return self.probs.shape[1]

    @property
    def seq_len(self) -> int:
        return self.probs.shape[2]


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Cut (3, s, s) pixels into (N, 3*P*P) row-major grid patches.

    Patch i covers grid cell (i // g, i % g); within a patch the layout is
    channel-major. A batched (B, 3, s, s) input yields (B, N, 3*P*P).
    """
    squeeze = image.ndim == 3
    x = image[None] if squeeze else image
    b, c, h, w = x.shape
    if c != 3:
        raise ValueError(f"expected 3 channels, got {c}")
    if h != w:
        raise ValueError(f"expected a square image, got {h}x{w}")
    if h % patch_size:
        raise ValueError(f"image size {h} is not divisible by patch size {patch_size}")
    g = h // patch_size
    p = patch_size
    out = (
        x.reshape(b, c, g, p, g, p)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(b, g * g, c * p * p)
    )
    return out[0] if squeeze else out


def sinusoidal_pe(seq_len: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed sin/cos position table, position 0 assigned to the CLS slot."""
    if dim % 2:
        raise ValueError(f"sinusoidal table needs an even dim, got {dim}")
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    i2 = np.arange(0, dim, 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, i2 / dim)
    pe = np.empty((seq_len, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe.astype(dtype)


def init_vit_params(config: ViTConfig, rng: Rng, dtype=np.float32) -> dict[str, Tensor]:
    """Fresh parameter dict.

    CLS, patch embedding, a learned position table, and the class head draw
    from N(0, 0.02^2); encoder-block weights use Xavier scaling (the 0.02
    init leaves attention and MLP paths too quiet to train quickly at desk
    scale). Biases start at zero, layer-norm affines at identity.
    """

    def w02(shape):
        return Tensor(rng.normal(shape, std=0.02, dtype=dtype), requires_grad=True)

    def xavier(shape):
        std = math.sqrt(2.0 / (shape[0] + shape[1]))
        return Tensor(rng.normal(shape, std=std, dtype=dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    d = config.dim
    params: dict[str, Tensor] = {
        "patch_embed.w": w02((config.patch_dim, d)),
        "patch_embed.b": zeros((d,)),
        "cls": w02((d,)),
    }
    if config.pe_mode == "learned":
        params["pos_embed"] = w02((config.seq_len, d))
    hidden = config.mlp_ratio * d
    for i in range(config.depth):
        prefix = f"blocks.{i}"
        params[f"{prefix}.ln1.gamma"] = ones((d,))
        params[f"{prefix}.ln1.beta"] = zeros((d,))
        for name in ("wq", "wk", "wv", "wo"):
            params[f"{prefix}.attn.{name}"] = xavier((d, d))
        for name in ("bq", "bk", "bv", "bo"):
            params[f"{prefix}.attn.{name}"] = zeros((d,))
        params[f"{prefix}.ln2.gamma"] = ones((d,))
        params[f"{prefix}.ln2.beta"] = zeros((d,))
        params[f"{prefix}.mlp.w1"] = xavier((d, hidden))
        params[f"{prefix}.mlp.b1"] = zeros((hidden,))
        params[f"{prefix}.mlp.w2"] = xavier((hidden, d))
        params[f"{prefix}.mlp.b2"] = zeros((d,))
    params["norm.gamma"] = ones((d,))
    params["norm.beta"] = zeros((d,))
    params["head.w"] = w02((d, config.num_classes))
    params["head.b"] = zeros((config.num_classes,))
    return params


def _attention(h: Tensor, params, prefix: str, config: ViTConfig,
               training: bool, rng) -> tuple[Tensor, np.ndarray]:
    b, s, d = h.shape
    heads = config.heads
    dh = d // heads
    q = h @ params[f"{prefix}.wq"] + params[f"{prefix}.bq"]
    k = h @ params[f"{prefix}.wk"] + params[f"{prefix}.bk"]
    v = h @ params[f"{prefix}.wv"] + params[f"{prefix}.bv"]
    q = q.reshape(b, s, heads, dh).transpose(0, 2, 1, 3)
    k = k.reshape(b, s, heads, dh).transpose(0, 2, 1, 3)
    v = v.reshape(b, s, heads, dh).transpose(0, 2, 1, 3)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    probs = ad.softmax(scores)
    recorded = probs.data  # (B, H, S, S), detached view for rollout
    if training and config.dropout > 0.0:
        probs = ad.dropout(probs, config.dropout, rng)
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b, s, d)
    out = ctx @ params[f"{prefix}.wo"] + params[f"{prefix}.bo"]
    return out, recorded


def transformer_encode(h: Tensor, params, config: ViTConfig,
                       training: bool = False, rng=None) -> tuple[Tensor, np.ndarray]:
    """Pre-norm encoder stack over (B, S, D); returns hidden states and the
    recorded attention probabilities of shape (B, L, H, S, S)."""
    recorded = []
    for i in range(config.depth):
        prefix = f"blocks.{i}"
        normed = ad.layer_norm(h, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"])
        attn_out, probs = _attention(normed, params, f"{prefix}.attn", config, training, rng)
        if training and config.dropout > 0.0:
            attn_out = ad.dropout(attn_out, config.dropout, rng)
        h = h + attn_out
        normed = ad.layer_norm(h, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"])
        mid = ad.gelu(normed @ params[f"{prefix}.mlp.w1"] + params[f"{prefix}.mlp.b1"])
        mlp_out = mid @ params[f"{prefix}.mlp.w2"] + params[f"{prefix}.mlp.b2"]
        if training and config.dropout > 0.0:
            mlp_out = ad.dropout(mlp_out, config.dropout, rng)
        h = h + mlp_out
        recorded.append(probs)
    h = ad.layer_norm(h, params["norm.gamma"], params["norm.beta"])
    return h, np.stack(recorded, axis=1)


def vit_forward(image, params: dict[str, Tensor], config: ViTConfig,
                training: bool = False, rng=None):
    """Run the full classifier.

    A single (3, s, s) image returns ``(logits (C,), AttentionStack)``;
    a (B, 3, s, s) batch returns ``(logits (B, C), list[AttentionStack])``.
    """
    image = np.asarray(image.data if isinstance(image, Tensor) else image)
    single = image.ndim == 3
    if image.shape[-1] != config.image_size or image.shape[-2] != config.image_size:
        raise ValueError(
            f"image of shape {image.shape} does not match configured size {config.image_size}"
        )
    patches = patchify(image[None] if single else image, config.patch_size)
    dtype = params["patch_embed.w"].data.dtype
    x = Tensor(patches.astype(dtype, copy=False))
    b = x.shape[0]
    d = config.dim

    h = x @ params["patch_embed.w"] + params["patch_embed.b"]  # (B, N, D)
    cls = ad.broadcast_to(params["cls"].reshape(1, 1, d), (b, 1, d))
    h = ad.concat([cls, h], axis=1)  # (B, S, D)
    if config.pe_mode == "sinusoidal":
        h = h + Tensor(sinusoidal_pe(config.seq_len, d, dtype=dtype))
    elif config.pe_mode == "learned":
        h = h + params["pos_embed"]

    h, probs = transformer_encode(h, params, config, training=training, rng=rng)
    logits = h[:, 0] @ params["head.w"] + params["head.b"]

    if single:
        return logits[0], AttentionStack(probs[0])
    return logits, [AttentionStack(probs[i]) for i in range(b)]


def param_items(params: dict[str, Tensor]) -> list[tuple[str, Tensor]]:
    return list(params.items())


def cast_params(params: dict[str, Tensor], dtype) -> dict[str, Tensor]:
    """Copy a parameter dict at a different float precision (for 64-bit checks)."""
    return {
        name: Tensor(p.data.astype(dtype), requires_grad=p.requires_grad)
        for name, p in params.items()
    }
