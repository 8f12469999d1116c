"""Datasets, triggers and augmentation.

Images are numpy arrays of shape (height, width, 3) with float64 values in
[0, 1]; datasets stack them along a leading axis. The binary on-disk format
is the classic CIFAR-10 layout: 3073-byte records, one label byte followed
by 3072 pixel bytes stored channel-planar (all R, all G, all B), row-major
32x32.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import cv2
import numpy as np

RECORD_BYTES = 3073
CIFAR_SIDE = 32
CIFAR_CLASSES = 10


class MalformedFileError(ValueError):
    """Raised when a binary dataset file is not a whole number of records."""


class CorruptRecordError(ValueError):
    """Raised when a record carries an out-of-range label byte."""


def _check_images(images: np.ndarray) -> None:
    if images.ndim != 4 or images.shape[3] != 3:
        raise ValueError(f"expected images of shape (n, h, w, 3), got {images.shape}")
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")


@dataclass
class LabeledDataset:
    """Images with integer class ids in [0, num_classes)."""

    images: np.ndarray  # (n, h, w, 3) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        _check_images(self.images)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels must have equal length")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.images[indices], self.labels[indices], self.num_classes)


@dataclass
class ShadowDataset:
    """Unlabeled image collection used during backdoor injection."""

    images: np.ndarray  # (n, h, w, 3) float64 in [0, 1]

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        _check_images(self.images)
        if len(self.images) == 0:
            raise ValueError("shadow dataset must be non-empty")

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class Trigger:
    """Full-image patch: where mask is 1 the pattern replaces the input pixel."""

    mask: np.ndarray     # (h, w) values in {0, 1}
    pattern: np.ndarray  # (h, w, 3) in [0, 1]
    name: str = "trigger"

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.pattern = np.asarray(self.pattern, dtype=np.float64)
        if self.mask.ndim != 2:
            raise ValueError("mask must be 2-D")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError("mask values must be 0 or 1")
        if self.pattern.shape != self.mask.shape + (3,):
            raise ValueError("pattern must have shape mask.shape + (3,)")
        if self.pattern.min() < 0.0 or self.pattern.max() > 1.0:
            raise ValueError("pattern values must lie in [0, 1]")


CORNERS = ("bottom-right", "upper-left", "center")


def square_trigger(
    image_size: int,
    size: int = 10,
    corner: str = "bottom-right",
    color: tuple[float, float, float] = (1.0, 1.0, 1.0),
    name: str | None = None,
) -> Trigger:
    """Build a solid square trigger at one of three standard positions."""
    if not 1 <= size <= image_size:
        raise ValueError("trigger size must lie in [1, image_size]")
    if corner not in CORNERS:
        raise ValueError(f"corner must be one of {CORNERS}")
    if corner == "bottom-right":
        r0 = c0 = image_size - size
    elif corner == "upper-left":
        r0 = c0 = 0
    else:
        r0 = c0 = (image_size - size) // 2
    mask = np.zeros((image_size, image_size))
    mask[r0:r0 + size, c0:c0 + size] = 1.0
    pattern = np.zeros((image_size, image_size, 3))
    pattern[r0:r0 + size, c0:c0 + size] = np.clip(color, 0.0, 1.0)
    if name is None:
        name = f"{corner}-{size}px"
    return Trigger(mask=mask, pattern=pattern, name=name)


def save_trigger(trigger: Trigger, path: str | os.PathLike) -> None:
    """Store a trigger as an .npz archive with mask and pattern arrays."""
    np.savez(os.fspath(path), mask=trigger.mask, pattern=trigger.pattern,
             name=np.array(trigger.name))


def load_trigger(path: str | os.PathLike) -> Trigger:
    with np.load(os.fspath(path)) as payload:
        return Trigger(
            mask=payload["mask"],
            pattern=payload["pattern"],
            name=str(payload["name"]) if "name" in payload else "trigger",
        )


def embed_trigger(x: np.ndarray, trigger: Trigger) -> np.ndarray:
    """Overlay the trigger onto one image (or a batch); the input is not mutated."""
    x = np.asarray(x, dtype=np.float64)
    spatial = x.shape[-3:-1]
    if spatial != trigger.mask.shape:
        raise ValueError(
            f"image spatial dims {spatial} do not match trigger dims {trigger.mask.shape}"
        )
    on = trigger.mask[..., None] == 1.0
    return np.where(on, trigger.pattern, x)


@dataclass
class AugmentationConfig:
    """Reduced contrastive-learning augmentation pipeline.

    Steps, applied in order with an rng seeded per call:
      1. random crop: area fraction drawn from crop_scale_range, side length
         round(side * sqrt(fraction)); the crop is resized back to the input
         size with bilinear interpolation (skipped when it is the full image).
      2. horizontal flip with probability flip_probability.
      3. color jitter of strength j (skipped when j == 0): brightness,
         contrast and saturation factors each drawn from
         U[max(0, 1-j), 1+j]; brightness multiplies pixels, contrast blends
         with the global mean, saturation blends with per-pixel luminance
         (0.299 R + 0.587 G + 0.114 B).
      4. Gaussian blur with probability blur_probability, sigma drawn from
         U[0.1, 1.0].
    The result is clipped to [0, 1]. With crop range (1, 1) and all
    probabilities/strengths zero the pipeline is the identity map.
    """

    crop_scale_range: tuple[float, float] = (0.6, 1.0)
    flip_probability: float = 0.5
    color_jitter_strength: float = 0.4
    blur_probability: float = 0.0

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError("crop_scale_range must satisfy 0 < lo <= hi <= 1")
        for p in (self.flip_probability, self.blur_probability):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if self.color_jitter_strength < 0.0:
            raise ValueError("color_jitter_strength must be non-negative")


def augment(x: np.ndarray, cfg: AugmentationConfig, seed: int) -> np.ndarray:
    """Apply the augmentation pipeline to one image, deterministically per seed."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError("augment expects a single (h, w, 3) image")
    h, w = x.shape[:2]
    rng = np.random.default_rng(seed)
    out = x

    lo, hi = cfg.crop_scale_range
    frac = rng.uniform(lo, hi)
    side_h = min(h, max(1, round(h * np.sqrt(frac))))
    side_w = min(w, max(1, round(w * np.sqrt(frac))))
    if (side_h, side_w) != (h, w):
        top = int(rng.integers(0, h - side_h + 1))
        left = int(rng.integers(0, w - side_w + 1))
        crop = out[top:top + side_h, left:left + side_w]
        out = cv2.resize(crop, (w, h), interpolation=cv2.INTER_LINEAR)

    if rng.random() < cfg.flip_probability:
        out = out[:, ::-1, :]

    j = cfg.color_jitter_strength
    if j > 0.0:
        brightness = rng.uniform(max(0.0, 1.0 - j), 1.0 + j)
        contrast = rng.uniform(max(0.0, 1.0 - j), 1.0 + j)
        saturation = rng.uniform(max(0.0, 1.0 - j), 1.0 + j)
        out = out * brightness
        mean = out.mean()
        out = mean + (out - mean) * contrast
        gray = out @ np.array([0.299, 0.587, 0.114])
        out = gray[..., None] + (out - gray[..., None]) * saturation

    if cfg.blur_probability > 0.0 and rng.random() < cfg.blur_probability:
        sigma = rng.uniform(0.1, 1.0)
        out = cv2.GaussianBlur(out, (0, 0), sigmaX=sigma)

    return np.clip(out, 0.0, 1.0)


IDENTITY_AUGMENTATION = AugmentationConfig(
    crop_scale_range=(1.0, 1.0),
    flip_probability=0.0,
    color_jitter_strength=0.0,
    blur_probability=0.0,
)


def load_cifar10_binary(path: str | os.PathLike) -> LabeledDataset:
    """Load 3073-byte-record binary files into a dataset scaled to [0, 1].

    `path` may be a single file or a directory; for a directory all
    data_batch_*.bin files are read in sorted name order (falling back to
    every *.bin file when none match). Record order is preserved.
    """
    path = os.fspath(path)
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if n.startswith("data_batch") and n.endswith(".bin"))
        if not names:
            names = sorted(n for n in os.listdir(path) if n.endswith(".bin"))
        if not names:
            raise MalformedFileError(f"no .bin files found under {path}")
        files = [os.path.join(path, n) for n in names]
    else:
        files = [path]

    images, labels = [], []
    for f in files:
        raw = np.fromfile(f, dtype=np.uint8)
        if raw.size == 0 or raw.size % RECORD_BYTES != 0:
            raise MalformedFileError(
                f"{f}: size {raw.size} is not a positive multiple of {RECORD_BYTES}"
            )
        records = raw.reshape(-1, RECORD_BYTES)
        lab = records[:, 0]
        bad = np.nonzero(lab >= CIFAR_CLASSES)[0]
        if bad.size:
            raise CorruptRecordError(f"{f}: record {bad[0]} has label byte {lab[bad[0]]}")
        pix = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
        images.append(pix.transpose(0, 2, 3, 1).astype(np.float64) / 255.0)
        labels.append(lab.astype(np.int64))

    return LabeledDataset(
        images=np.concatenate(images),
        labels=np.concatenate(labels),
        num_classes=CIFAR_CLASSES,
    )


def save_cifar10_binary(dataset: LabeledDataset, path: str | os.PathLike) -> None:
    """Serialize a 32x32 dataset to the binary record format (nearest-byte pixels)."""
    if dataset.images.shape[1:3] != (CIFAR_SIDE, CIFAR_SIDE):
        raise ValueError("binary format requires 32x32 images")
    if dataset.num_classes > CIFAR_CLASSES:
        raise ValueError("binary format supports at most 10 classes")
    pix = np.rint(dataset.images * 255.0).astype(np.uint8)
    planar = pix.transpose(0, 3, 1, 2).reshape(len(dataset), -1)
    records = np.concatenate([dataset.labels.astype(np.uint8)[:, None], planar], axis=1)
    records.tofile(os.fspath(path))


# Class appearance lattice for synthetic data: two base colors cycle fastest
# so that nearby class ids share shape but not color. Keeping the color
# alphabet small forces a raw-pixel classifier to pick up shape as well,
# which leaves headroom for learned features to beat it; the shape order
# alternates large- and small-area shapes so the shape cue has a weak
# linear trace (total colored mass) without being trivial.
_PALETTE = np.array(
    [
        (0.90, 0.12, 0.12),  # red
        (0.12, 0.75, 0.20),  # green
        (0.15, 0.25, 0.90),  # blue
        (0.92, 0.85, 0.12),  # yellow
        (0.85, 0.15, 0.82),  # magenta
        (0.12, 0.80, 0.85),  # cyan
    ]
)
_N_SHAPES = 6
_SHAPE_ORDER = (0, 2, 1, 4, 3, 5)  # square, cross, disk, ring, triangle, diamond
_N_COLORS_CYCLE = 2


def _shape_mask(shape_id: int, side: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side]
    c = (side - 1) / 2.0
    r = side / 2.0
    shape_id %= _N_SHAPES
    if shape_id == 0:  # square
        return np.ones((side, side), dtype=bool)
    if shape_id == 1:  # disk
        return (yy - c) ** 2 + (xx - c) ** 2 <= r**2
    if shape_id == 2:  # cross
        bar = max(1, side // 4)
        return (np.abs(yy - c) <= bar / 1.5) | (np.abs(xx - c) <= bar / 1.5)
    if shape_id == 3:  # triangle
        return np.abs(xx - c) <= (yy + 1) / 2.0
    if shape_id == 4:  # ring
        d2 = (yy - c) ** 2 + (xx - c) ** 2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    # diamond
    return np.abs(yy - c) + np.abs(xx - c) <= r


def synthetic_class_style(class_id: int) -> tuple[int, int, int]:
    """Return (color index, shape index, size tier) for a synthetic class."""
    color = class_id % _N_COLORS_CYCLE
    shape = _SHAPE_ORDER[(class_id // _N_COLORS_CYCLE) % _N_SHAPES]
    tier = class_id // (_N_COLORS_CYCLE * _N_SHAPES)
    return color, shape, tier


def make_synthetic_dataset(
    num_classes: int, per_class: int, image_size: int, seed: int
) -> LabeledDataset:
    """Generate a deterministic dataset of colored shapes on noise backgrounds.

    Each class is a (color, shape, size-tier) combination drawn at a random
    position over a muted uniform-noise background, so classes are visually
    separable while raw pixels carry only a weak linear signal.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    if per_class < 1:
        raise ValueError("per_class must be at least 1")
    if image_size < 8:
        raise ValueError("image_size must be at least 8")

    rng = np.random.default_rng(seed)
    n = num_classes * per_class
    images = np.empty((n, image_size, image_size, 3))
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)

    size_tiers = ((0.30, 0.42), (0.48, 0.60), (0.66, 0.78))
    for k in range(n):
        cls = labels[k]
        color_id, shape_id, tier = synthetic_class_style(cls)
        lo, hi = size_tiers[tier % len(size_tiers)]
        img = 0.15 + 0.70 * rng.random((image_size, image_size, 3))
        side = int(rng.integers(max(4, round(lo * image_size)), max(5, round(hi * image_size)) + 1))
        side = min(side, image_size)
        top = int(rng.integers(0, image_size - side + 1))
        left = int(rng.integers(0, image_size - side + 1))
        color = _PALETTE[color_id % len(_PALETTE)] + rng.uniform(-0.06, 0.06, size=3)
        mask = _shape_mask(shape_id, side)
        patch = img[top:top + side, left:left + side]
        fill = color + rng.normal(0.0, 0.02, size=patch.shape)
        patch[mask] = fill[mask]
        images[k] = np.clip(img, 0.0, 1.0)

    order = rng.permutation(n)
    return LabeledDataset(images=images[order], labels=labels[order], num_classes=num_classes)


def sample_shadow(
    dataset: LabeledDataset | ShadowDataset, n: int, seed: int
) -> ShadowDataset:
    """Sample n images uniformly without replacement; labels are dropped."""
    total = len(dataset)
    if not 1 <= n <= total:
        raise ValueError(f"n must lie in [1, {total}], got {n}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(total, size=n, replace=False)
    return ShadowDataset(images=dataset.images[idx].copy())
