"""Contrastive pre-training: similarity primitives, the paired-view loss,
and the training loop that produces a clean encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .data import AugmentationConfig, LabeledDataset, ShadowDataset, augment
from .encoder import Encoder, build_encoder, images_to_tensor, module_dtype
from .seeding import derive_seed

NORM_FLOOR = 1e-12


class DegenerateFeatureError(ValueError):
    """Raised when a vector with (near-)zero norm enters a cosine similarity."""


class DivergenceError(RuntimeError):
    """Raised when a training loss becomes non-finite."""

    def __init__(self, message: str, epoch: int | None = None, step: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


def unit_rows(t: torch.Tensor) -> torch.Tensor:
    """Normalize rows to unit length, rejecting zero-norm rows."""
    norms = t.norm(dim=-1, keepdim=True)
    if bool((norms < NORM_FLOOR).any()):
        raise DegenerateFeatureError("zero-norm feature vector")
    return t / norms


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1]."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError("vectors must have equal length")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < NORM_FLOOR or nv < NORM_FLOOR:
        raise DegenerateFeatureError("cosine similarity of a zero-norm vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _check_pairing(pairing: np.ndarray, n: int) -> np.ndarray:
    pairing = np.asarray(pairing, dtype=np.int64)
    if pairing.shape != (n,):
        raise ValueError(f"pairing must have length {n}")
    if np.any(pairing < 0) or np.any(pairing >= n):
        raise ValueError("pairing indices out of range")
    if np.any(pairing == np.arange(n)) or np.any(pairing[pairing] != np.arange(n)):
        raise ValueError("pairing must be a perfect matching (fixed-point-free involution)")
    return pairing


def nt_xent_loss(latents: torch.Tensor, pairing: np.ndarray, temperature: float) -> torch.Tensor:
    """Paired-view contrastive loss over 2N latent vectors.

    Returns the sum over all ordered positive pairs (i, pairing[i]) of
    -log( exp(cos(z_i, z_j)/t) / sum_{k != i} exp(cos(z_i, z_k)/t) ).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if latents.ndim != 2 or latents.shape[0] % 2 != 0 or latents.shape[0] < 2:
        raise ValueError("latents must be a (2N, d) matrix with N >= 1")
    n = latents.shape[0]
    pairing = _check_pairing(pairing, n)

    z = unit_rows(latents)
    sim = (z @ z.T) / temperature
    eye = torch.eye(n, dtype=torch.bool, device=sim.device)
    sim = sim.masked_fill(eye, float("-inf"))
    log_denom = torch.logsumexp(sim, dim=1)
    pos = sim[torch.arange(n), torch.from_numpy(pairing)]
    return (log_denom - pos).sum()


@dataclass
class SimCLRConfig:
    """Hyperparameters for contrastive pre-training."""

    temperature: float = 0.5
    batch_size: int = 64
    epochs: int = 100
    learning_rate: float = 1e-3
    seed: int = 0
    architecture: str = "conv3"
    feature_dim: int = 128
    latent_dim: int = 64

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


class ProjectionHead(nn.Module):
    """Two-layer perceptron mapping features to the latent space used by the loss."""

    def __init__(self, feature_dim: int, latent_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(feature_dim, feature_dim)
        self.fc2 = nn.Linear(feature_dim, latent_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(x)))


def pretrain_simclr(
    data: ShadowDataset | LabeledDataset,
    cfg: SimCLRConfig,
    aug: AugmentationConfig,
) -> tuple[Encoder, ProjectionHead, list[float]]:
    """Train an encoder + projection head on two augmented views per image.

    Returns the encoder, the head (used only by the contrastive loss), and
    the mean per-pair loss of every epoch. Deterministic for a fixed seed.
    """
    images = data.images
    n = len(images)
    if n < cfg.batch_size:
        raise ValueError(f"need at least batch_size={cfg.batch_size} images, got {n}")

    encoder = build_encoder(
        architecture=cfg.architecture,
        image_size=images.shape[1],
        feature_dim=cfg.feature_dim,
        seed=cfg.seed,
    )
    torch.manual_seed(derive_seed(cfg.seed, "head-init"))
    head = ProjectionHead(cfg.feature_dim, cfg.latent_dim)
    dtype = module_dtype(encoder.module)
    head.to(dtype)

    params = list(encoder.module.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)

    steps = n // cfg.batch_size
    pairing = np.concatenate([np.arange(cfg.batch_size) + cfg.batch_size, np.arange(cfg.batch_size)])
    history: list[float] = []

    for epoch in range(cfg.epochs):
        order_rng = np.random.default_rng(derive_seed(cfg.seed, "order", epoch))
        order = order_rng.permutation(n)
        aug_rng = np.random.default_rng(derive_seed(cfg.seed, "aug", epoch))
        encoder.module.train()
        head.train()
        epoch_loss = 0.0

        for step in range(steps):
            idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            seeds = aug_rng.integers(0, 2**63 - 1, size=2 * len(idx))
            views = [augment(images[i], aug, int(seeds[2 * k])) for k, i in enumerate(idx)]
            views += [augment(images[i], aug, int(seeds[2 * k + 1])) for k, i in enumerate(idx)]
            batch = images_to_tensor(np.stack(views), dtype)

            latents = head(encoder.module(batch))
            loss = nt_xent_loss(latents, pairing, cfg.temperature) / latents.shape[0]
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"non-finite contrastive loss at epoch {epoch}", epoch=epoch, step=step
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item()

        history.append(epoch_loss / steps)

    encoder.module.eval()
    head.eval()
    return encoder, head, history
