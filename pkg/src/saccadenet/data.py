"""Dataset ingestion, augmentation, and the saccade-target dataset.

Two image sources are supported: the CIFAR-100 binary distribution and a
procedurally generated shapes dataset small enough to train every model in
the pipeline on a laptop CPU. Saccade targets (the teacher's top-k attended
patch indices per image) are computed on un-augmented images and persisted
in a compact binary format.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import FileFormatError
from .rng import Rng
from .rollout import attention_rollout, cls_heat, fuse_heads, topk_indices
from .vit import ViTConfig, vit_forward

CIFAR_RECORD_BYTES = 3074  # 1 coarse label + 1 fine label + 3072 pixels
SACCADE_MAGIC = b"SACT"
SACCADE_VERSION = 1
_SPLIT_SEED = 7151  # fixed train/validation partition seed


@dataclass
class ImageRecord:
    """One image: (3, H, W) float32 pixels in [0, 1], class label, stable id.

    ``mask`` optionally carries a ground-truth occupancy map (shapes data
    keeps one for selector evaluation); it is not part of any file format.
    """

    pixels: np.ndarray
    label: int
    id: int
    mask: np.ndarray | None = None


@dataclass
class SaccadeRecord:
    """One saccade-target example: image id, class label, and the k attended
    patch indices with their multi-hot expansion over N patches."""

    image_id: int
    label: int
    indices: tuple[int, ...]
    n_patches: int
    multi_hot: np.ndarray = field(init=False)

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"indices must be strictly ascending, got {idx}")
        if idx and (idx[0] < 0 or idx[-1] >= self.n_patches):
            raise ValueError(f"indices out of range [0, {self.n_patches}): {idx}")
        self.indices = idx
        mh = np.zeros(self.n_patches, dtype=np.float32)
        mh[list(idx)] = 1.0
        self.multi_hot = mh


# -- CIFAR-100 binary ---------------------------------------------------------


def read_cifar100(path: str, split: str) -> list[ImageRecord]:
    """Parse the CIFAR-100 binary distribution.

    ``path`` is either the directory holding ``train.bin``/``test.bin`` or a
    direct file path. Records are 3074 bytes: coarse label (discarded), fine
    label, then 3072 pixel bytes as three 1024-byte planes (R, G, B),
    row-major 32x32, scaled by 1/255. All records of the file are returned;
    use :func:`train_val_split` for the fixed 90/10 validation partition.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    file_path = path
    if os.path.isdir(path):
        file_path = os.path.join(path, f"{split}.bin")
    raw = np.fromfile(file_path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD_BYTES:
        raise FileFormatError(
            f"{file_path}: size {raw.size} is not a multiple of {CIFAR_RECORD_BYTES} "
            f"(trailing {raw.size % CIFAR_RECORD_BYTES} bytes at offset "
            f"{raw.size - raw.size % CIFAR_RECORD_BYTES})"
        )
    n = raw.size // CIFAR_RECORD_BYTES
    rows = raw.reshape(n, CIFAR_RECORD_BYTES)
    labels = rows[:, 1]
    pixels = rows[:, 2:].reshape(n, 3, 32, 32).astype(np.float32) / 255.0
    return [
        ImageRecord(pixels=pixels[i], label=int(labels[i]), id=i)
        for i in range(n)
    ]


def train_val_split(records: list[ImageRecord], val_fraction: float = 0.1,
                    seed: int = _SPLIT_SEED) -> tuple[list[ImageRecord], list[ImageRecord]]:
    """Deterministic validation split keyed on record ids."""
    ids = sorted(r.id for r in records)
    perm = Rng(seed).permutation(len(ids))
    n_val = int(round(len(ids) * val_fraction))
    val_ids = {ids[i] for i in perm[:n_val]}
    train = [r for r in records if r.id not in val_ids]
    val = [r for r in records if r.id in val_ids]
    return train, val


# -- synthetic shapes ---------------------------------------------------------

SHAPE_CLASSES = ("circle", "square", "triangle")


def gen_shapes(n: int, seed: int, image_size: int = 64) -> list[ImageRecord]:
    """Deterministic bright-shape-on-noise dataset with occupancy masks.

    Each sample is one circle, square, or triangle (size 12-28 px at the
    default 64 px canvas, scaled proportionally for other sizes; every RGB
    channel >= 0.6) placed on a dark uniform-noise background (amplitude
    0.1). The rasterized occupancy mask rides along on each record.
    """
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    rng = Rng(seed).gen
    lo, hi = 12.0 * image_size / 64.0, 28.0 * image_size / 64.0
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    records = []
    for i in range(n):
        label = int(rng.integers(0, 3))
        size = float(rng.uniform(lo, hi))
        half = size / 2.0
        cx = float(rng.uniform(half + 1, image_size - half - 1))
        cy = float(rng.uniform(half + 1, image_size - half - 1))
        color = rng.uniform(0.6, 1.0, 3)
        if label == 0:  # circle
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= half**2
        elif label == 1:  # square
            mask = (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
        else:  # upward triangle spanning the size box
            t = (yy - (cy - half)) / size  # 0 at apex row, 1 at base row
            mask = (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= half * t)
        bg = rng.uniform(0.0, 0.1, (3, image_size, image_size))
        pixels = np.where(mask[None], color[:, None, None], bg).astype(np.float32)
        records.append(ImageRecord(pixels=pixels, label=label, id=i, mask=mask))
    return records


# -- augmentation -------------------------------------------------------------


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resize of (C, H, W); exact on constants and
    the identity when sizes match."""
    c, h, w = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(img.dtype)[None, :, None]
    wx = (xs - x0).astype(img.dtype)[None, None, :]
    v00 = img[:, y0[:, None], x0[None, :]]
    v01 = img[:, y0[:, None], x1[None, :]]
    v10 = img[:, y1[:, None], x0[None, :]]
    v11 = img[:, y1[:, None], x1[None, :]]
    top = v00 + wx * (v01 - v00)
    bot = v10 + wx * (v11 - v10)
    return top + wy * (bot - top)


def random_resized_crop(img: ImageRecord, rng: Rng, scale=(0.5, 1.0),
                        ratio=(3 / 4, 4 / 3), out_size: int | None = None) -> ImageRecord:
    """Crop a random area/aspect window and resize it to ``out_size``.

    Area fraction is uniform in ``scale``; aspect is log-uniform in
    ``ratio``. After 10 failed sampling attempts a center crop is used.
    """
    c, h, w = img.pixels.shape
    out_size = out_size if out_size is not None else h
    gen = rng.gen if isinstance(rng, Rng) else rng
    area = h * w
    top = left = None
    ch = cw = None
    for _ in range(10):
        target = area * gen.uniform(scale[0], scale[1])
        aspect = float(np.exp(gen.uniform(np.log(ratio[0]), np.log(ratio[1]))))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(gen.integers(0, h - ch + 1))
            left = int(gen.integers(0, w - cw + 1))
            break
    if top is None:
        ch = cw = min(h, w)
        top = (h - ch) // 2
        left = (w - cw) // 2
    crop = img.pixels[:, top : top + ch, left : left + cw]
    resized = _resize_bilinear(crop, out_size, out_size).astype(np.float32)
    mask = None
    if img.mask is not None:
        mcrop = img.mask[top : top + ch, left : left + cw].astype(np.float32)
        mask = _resize_bilinear(mcrop[None], out_size, out_size)[0] > 0.5
    return ImageRecord(pixels=resized, label=img.label, id=img.id, mask=mask)


def hflip(img: ImageRecord, rng: Rng, p: float = 0.5) -> ImageRecord:
    """Mirror across the vertical axis with probability p."""
    gen = rng.gen if isinstance(rng, Rng) else rng
    if p > 0 and gen.random() < p:
        mask = img.mask[:, ::-1].copy() if img.mask is not None else None
        return ImageRecord(pixels=img.pixels[:, :, ::-1].copy(), label=img.label,
                           id=img.id, mask=mask)
    return img


# -- saccade-target construction ----------------------------------------------


def build_saccade_targets(teacher_params, teacher_config: ViTConfig,
                          dataset: list[ImageRecord], k: int,
                          head_fusion: str = "mean",
                          batch_size: int = 64) -> list[SaccadeRecord]:
    """Run the teacher over un-augmented images and record top-k rollout
    indices per image, preserving dataset order."""
    n_patches = teacher_config.n_patches
    if not 1 <= k <= n_patches:
        raise ValueError(f"k must be in [1, {n_patches}], got {k}")
    records: list[SaccadeRecord] = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start : start + batch_size]
        images = np.stack([r.pixels for r in chunk])
        with ad.no_grad():
            _, stacks = vit_forward(images, teacher_params, teacher_config)
        for rec, stack in zip(chunk, stacks):
            try:
                fused = fuse_heads(stack, head_fusion)
                heat = cls_heat(attention_rollout(fused))
                idx = topk_indices(heat.heat, k)
            except ValueError as exc:
                raise ValueError(f"target extraction failed for image id {rec.id}: {exc}") from exc
            records.append(SaccadeRecord(image_id=rec.id, label=rec.label,
                                         indices=tuple(idx), n_patches=n_patches))
    return records


# -- saccade-target file format -------------------------------------------------
#
# Header (little-endian): magic "SACT", u16 version, u16 reserved, u32 N,
# u32 k, u32 record count. Per record: u32 image_id, u16 label, k x u16
# ascending patch indices. The multi-hot vector is reconstructed on read.

_HEADER = struct.Struct("<4sHHIII")


def write_saccade_file(path: str, records: list[SaccadeRecord], n_patches: int | None = None,
                       k: int | None = None) -> None:
    """Persist records; N and k must be supplied for an empty list."""
    if records:
        n_patches = records[0].n_patches if n_patches is None else n_patches
        k = len(records[0].indices) if k is None else k
    if n_patches is None or k is None:
        raise ValueError("writing an empty file requires explicit n_patches and k")
    for i, rec in enumerate(records):
        if rec.n_patches != n_patches:
            raise ValueError(f"record {i} has N={rec.n_patches}, expected {n_patches}")
        if len(rec.indices) != k:
            raise ValueError(f"record {i} has {len(rec.indices)} indices, expected k={k}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SACCADE_MAGIC, SACCADE_VERSION, 0, n_patches, k, len(records)))
        body = struct.Struct(f"<IH{k}H")
        for rec in records:
            fh.write(body.pack(rec.image_id, rec.label, *rec.indices))


def read_saccade_file(path: str) -> list[SaccadeRecord]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FileFormatError(f"{path}: truncated header ({len(blob)} bytes, need {_HEADER.size})")
    magic, version, _, n_patches, k, count = _HEADER.unpack_from(blob, 0)
    if magic != SACCADE_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != SACCADE_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version} at offset 4")
    body = struct.Struct(f"<IH{k}H")
    expected = _HEADER.size + count * body.size
    if len(blob) != expected:
        bad_record = (len(blob) - _HEADER.size) // body.size
        raise FileFormatError(
            f"{path}: size {len(blob)} != {expected} for {count} records; "
            f"file ends inside record {bad_record}"
        )
    records = []
    for i in range(count):
        fields = body.unpack_from(blob, _HEADER.size + i * body.size)
        image_id, label, idx = fields[0], fields[1], fields[2:]
        try:
            records.append(SaccadeRecord(image_id=image_id, label=label,
                                         indices=idx, n_patches=n_patches))
        except ValueError as exc:
            raise FileFormatError(f"{path}: record {i} invalid: {exc}") from exc
    return records
