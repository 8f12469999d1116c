"""Image encoders: architectures, inference, and the checkpoint container.

An Encoder bundles a torch module with the metadata needed to rebuild it
(architecture id, constructor kwargs, feature_dim, expected image size).
Checkpoints are torch-serialized dicts with a stable set of keys:
format_version, architecture, arch_kwargs, feature_dim, image_size,
tensors (the module state dict) and train_config (free-form, may be None).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .seeding import derive_seed

CHECKPOINT_VERSION = 1


class ConvEncoder(nn.Module):
    """Small conv net: 3x3 conv blocks with batch norm, pooled to a feature vector."""

    def __init__(self, feature_dim: int = 128, widths: tuple[int, ...] = (16, 32, 64)):
        super().__init__()
        layers: list[nn.Module] = []
        c_in = 3
        for w in widths:
            layers += [
                nn.Conv2d(c_in, w, kernel_size=3, padding=1),
                nn.BatchNorm2d(w),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            c_in = w
        self.blocks = nn.Sequential(*layers)
        self.fc = nn.Linear(c_in, feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.blocks(x).mean(dim=(2, 3))
        return self.fc(h)


class MLPEncoder(nn.Module):
    """Tiny fully connected encoder; small enough for finite-difference checks."""

    def __init__(self, image_size: int = 4, hidden: int = 8, feature_dim: int = 8):
        super().__init__()
        self.fc1 = nn.Linear(3 * image_size * image_size, hidden)
        self.fc2 = nn.Linear(hidden, feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.tanh(self.fc1(x.flatten(1)))
        return self.fc2(h)


def _build_conv3(image_size: int, feature_dim: int, **kw) -> nn.Module:
    return ConvEncoder(feature_dim=feature_dim, **kw)


def _build_toy_mlp(image_size: int, feature_dim: int, **kw) -> nn.Module:
    return MLPEncoder(image_size=image_size, feature_dim=feature_dim, **kw)


ARCHITECTURES: dict[str, Callable[..., nn.Module]] = {
    "conv3": _build_conv3,
    "toy-mlp": _build_toy_mlp,
}


@dataclass
class Encoder:
    """A feature extractor plus the metadata required to rebuild it."""

    architecture: str
    feature_dim: int
    image_size: int
    module: nn.Module
    arch_kwargs: dict = field(default_factory=dict)

    def clone(self) -> "Encoder":
        return Encoder(
            architecture=self.architecture,
            feature_dim=self.feature_dim,
            image_size=self.image_size,
            module=copy.deepcopy(self.module),
            arch_kwargs=dict(self.arch_kwargs),
        )


def build_encoder(
    architecture: str = "conv3",
    image_size: int = 32,
    feature_dim: int = 128,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
    **arch_kwargs,
) -> Encoder:
    """Construct a seeded, randomly initialized encoder."""
    if architecture not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {architecture!r}; known: {sorted(ARCHITECTURES)}")
    torch.manual_seed(derive_seed(seed, "encoder-init", architecture))
    module = ARCHITECTURES[architecture](image_size, feature_dim, **arch_kwargs).to(dtype)
    return Encoder(architecture, feature_dim, image_size, module, dict(arch_kwargs))


def images_to_tensor(images: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(n, h, w, 3) numpy in [0,1] -> (n, 3, h, w) torch tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ValueError(f"expected (n, h, w, 3) images, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def module_dtype(module: nn.Module) -> torch.dtype:
    for p in module.parameters():
        return p.dtype
    return torch.get_default_dtype()


def encode(encoder: Encoder, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Extract feature vectors in inference mode; rows follow input order."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.shape[1] != encoder.image_size or arr.shape[2] != encoder.image_size:
        raise ValueError(
            f"encoder expects {encoder.image_size}x{encoder.image_size} images, "
            f"got {arr.shape[1]}x{arr.shape[2]}"
        )
    dtype = module_dtype(encoder.module)
    encoder.module.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(arr), batch_size):
            batch = images_to_tensor(arr[start:start + batch_size], dtype)
            chunks.append(encoder.module(batch).cpu().numpy())
    feats = np.concatenate(chunks) if chunks else np.zeros((0, encoder.feature_dim))
    if not np.isfinite(feats).all():
        raise ValueError("encoder produced non-finite features")
    return feats


def save_encoder(encoder: Encoder, path, train_config: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "encoder",
        "architecture": encoder.architecture,
        "arch_kwargs": encoder.arch_kwargs,
        "feature_dim": encoder.feature_dim,
        "image_size": encoder.image_size,
        "tensors": encoder.module.state_dict(),
        "train_config": train_config,
    }
    torch.save(payload, path)


def load_encoder(path) -> Encoder:
    payload = torch.load(path, weights_only=False)
    if payload.get("kind") != "encoder":
        raise ValueError(f"{path} is not an encoder checkpoint")
    enc = build_encoder(
        architecture=payload["architecture"],
        image_size=payload["image_size"],
        feature_dim=payload["feature_dim"],
        **payload["arch_kwargs"],
    )
    enc.module.load_state_dict(payload["tensors"])
    first = next(iter(payload["tensors"].values()))
    enc.module.to(first.dtype)
    return enc


def load_train_config(path) -> dict | None:
    return torch.load(path, weights_only=False).get("train_config")
