"""Backdoor injection by fine-tuning a clean encoder.

The objective combines three averaged-cosine terms over a shadow dataset:
an alignment term pulling trigger-embedded inputs toward the reference
inputs' features, an anchor term keeping reference features close to the
clean encoder's, and a utility term keeping clean-input features close to
the clean encoder's. Each term lies in [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch.nn.modules.batchnorm import _BatchNorm

from .data import AugmentationConfig, ShadowDataset, Trigger, augment, embed_trigger
from .encoder import Encoder, images_to_tensor, module_dtype
from .pretrain import DivergenceError, unit_rows
from .seeding import derive_seed


@dataclass
class ReferenceSet:
    """Target-class images whose features anchor the attack."""

    images: np.ndarray  # (r, h, w, 3)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4 or len(self.images) < 1:
            raise ValueError("reference set must contain at least one (h, w, 3) image")

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class TargetPair:
    """One (downstream task, target class) attack goal with its trigger."""

    task_id: str
    target_class: int
    trigger: Trigger
    references: ReferenceSet


@dataclass
class AttackSpec:
    pairs: list[TargetPair]
    shadow: ShadowDataset

    def __post_init__(self):
        if len(self.pairs) < 1:
            raise ValueError("need at least one target pair")
        h, w = self.shadow.images.shape[1:3]
        for p in self.pairs:
            if p.trigger.mask.shape != (h, w):
                raise ValueError(
                    f"trigger {p.trigger.name!r} dims {p.trigger.mask.shape} "
                    f"do not match shadow image dims {(h, w)}"
                )

    @property
    def total_references(self) -> int:
        return sum(len(p.references) for p in self.pairs)


@dataclass
class AttackConfig:
    """Fine-tuning hyperparameters.

    optimizer "sgd" applies the plain update theta' <- theta' - lr * grad;
    "adam" is offered for faster desk-scale convergence. When
    freeze_batchnorm is set, normalization layers run in inference mode and
    their affine parameters receive no updates. include_trigger_term exists
    for ablations that drop the alignment term entirely (the anchor and
    utility terms are dropped by zeroing their weights).
    """

    lambda1: float = 1.0
    lambda2: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epoch: int = 50
    optimizer: str = "sgd"
    freeze_batchnorm: bool = True
    augment_references: bool = True
    include_trigger_term: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        # learning_rate 0 is allowed as an explicit no-op fine-tune
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.max_epoch < 0:
            raise ValueError("max_epoch must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")


@dataclass(frozen=True)
class LossBreakdown:
    """Values of the three loss terms and the optimized total for one step/epoch."""

    align: float    # trigger-embedded inputs vs reference features
    anchor: float   # reference features vs clean encoder
    utility: float  # clean inputs vs clean encoder
    total: float


def _make_breakdown(align: float, anchor: float, utility: float, cfg: AttackConfig) -> LossBreakdown:
    total = cfg.lambda1 * anchor + cfg.lambda2 * utility
    if cfg.include_trigger_term:
        total += align
    return LossBreakdown(align=align, anchor=anchor, utility=utility, total=total)


def _check_compatible(f_prime: Encoder, f_clean: Encoder) -> None:
    if (
        f_prime.architecture != f_clean.architecture
        or f_prime.feature_dim != f_clean.feature_dim
        or f_prime.image_size != f_clean.image_size
    ):
        raise ValueError("encoders must share architecture, feature_dim and image size")


def _clean_features(f_clean: Encoder, images: np.ndarray, batch_size: int = 256) -> torch.Tensor:
    """Unit-norm clean-encoder features, detached from any graph."""
    dtype = module_dtype(f_clean.module)
    f_clean.module.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            batch = images_to_tensor(images[start:start + batch_size], dtype)
            outs.append(unit_rows(f_clean.module(batch)))
    return torch.cat(outs)


def _alignment_term(
    module: torch.nn.Module,
    batch_images: np.ndarray,
    pairs: list[TargetPair],
    dtype: torch.dtype,
) -> torch.Tensor:
    total_refs = sum(len(p.references) for p in pairs)
    acc = None
    for pair in pairs:
        triggered = embed_trigger(batch_images, pair.trigger)
        feats_trig = unit_rows(module(images_to_tensor(triggered, dtype)))
        feats_ref = unit_rows(module(images_to_tensor(pair.references.images, dtype)))
        s = (feats_trig @ feats_ref.T).sum()
        acc = s if acc is None else acc + s
    return -acc / (len(batch_images) * total_refs)


def trigger_alignment_loss(
    f_prime: Encoder, shadow_batch: np.ndarray, spec: AttackSpec
) -> torch.Tensor:
    """Mean negative cosine between triggered-input and reference features."""
    shadow_batch = np.asarray(shadow_batch, dtype=np.float64)
    if len(shadow_batch) == 0:
        raise ValueError("shadow batch must be non-empty")
    return _alignment_term(
        f_prime.module, shadow_batch, spec.pairs, module_dtype(f_prime.module)
    )


def _reference_views(
    spec: AttackSpec, augmentation: AugmentationConfig | None, seed: int
) -> list[np.ndarray]:
    views = []
    for i, pair in enumerate(spec.pairs):
        imgs = pair.references.images
        if augmentation is None:
            views.append(imgs)
        else:
            views.append(
                np.stack(
                    [augment(img, augmentation, derive_seed(seed, i, j)) for j, img in enumerate(imgs)]
                )
            )
    return views


def _anchor_term(
    module: torch.nn.Module,
    ref_views: list[np.ndarray],
    clean_ref_feats: list[torch.Tensor],
    dtype: torch.dtype,
) -> torch.Tensor:
    total_refs = sum(len(v) for v in ref_views)
    acc = None
    for view, clean in zip(ref_views, clean_ref_feats):
        feats = unit_rows(module(images_to_tensor(view, dtype)))
        s = (feats * clean).sum()
        acc = s if acc is None else acc + s
    return -acc / total_refs


def reference_anchor_loss(
    f_prime: Encoder,
    f_clean: Encoder,
    spec: AttackSpec,
    augmentation: AugmentationConfig | None = None,
    seed: int = 0,
) -> torch.Tensor:
    """Mean negative cosine between new and clean features of the references.

    When an augmentation config is given, the new encoder sees a randomly
    augmented view of each reference; the clean side always sees the
    original.
    """
    _check_compatible(f_prime, f_clean)
    clean_ref_feats = [_clean_features(f_clean, p.references.images) for p in spec.pairs]
    views = _reference_views(spec, augmentation, seed)
    return _anchor_term(f_prime.module, views, clean_ref_feats, module_dtype(f_prime.module))


def _utility_term(
    module: torch.nn.Module,
    batch_images: np.ndarray,
    clean_feats: torch.Tensor,
    dtype: torch.dtype,
) -> torch.Tensor:
    feats = unit_rows(module(images_to_tensor(batch_images, dtype)))
    return -(feats * clean_feats).sum() / len(batch_images)


def utility_loss(f_prime: Encoder, f_clean: Encoder, shadow_batch: np.ndarray) -> torch.Tensor:
    """Mean negative cosine between new and clean features of clean inputs."""
    _check_compatible(f_prime, f_clean)
    shadow_batch = np.asarray(shadow_batch, dtype=np.float64)
    if len(shadow_batch) == 0:
        raise ValueError("shadow batch must be non-empty")
    clean_feats = _clean_features(f_clean, shadow_batch)
    return _utility_term(f_prime.module, shadow_batch, clean_feats, module_dtype(f_prime.module))


def combined_loss(
    f_prime: Encoder,
    f_clean: Encoder,
    shadow_batch: np.ndarray,
    spec: AttackSpec,
    cfg: AttackConfig,
    augmentation: AugmentationConfig | None = None,
    seed: int = 0,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Weighted sum of the three terms; returns the graph tensor and values."""
    l0 = trigger_alignment_loss(f_prime, shadow_batch, spec)
    l1 = reference_anchor_loss(f_prime, f_clean, spec, augmentation=augmentation, seed=seed)
    l2 = utility_loss(f_prime, f_clean, shadow_batch)
    total = cfg.lambda1 * l1 + cfg.lambda2 * l2
    if cfg.include_trigger_term:
        total = total + l0
    breakdown = _make_breakdown(l0.item(), l1.item(), l2.item(), cfg)
    return total, breakdown


def _freeze_normalization(module: torch.nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, _BatchNorm):
            m.eval()
            for p in m.parameters(recurse=False):
                p.requires_grad_(False)


def inject_backdoor(
    clean: Encoder,
    spec: AttackSpec,
    cfg: AttackConfig,
    augmentation: AugmentationConfig | None = None,
) -> tuple[Encoder, list[LossBreakdown]]:
    """Fine-tune a copy of the clean encoder against the combined objective.

    The new encoder starts from the clean parameters; each epoch takes
    floor(|shadow| / batch_size) gradient steps over a reshuffled shadow
    dataset. Reference views are resampled per step when augmentation is
    enabled. Returns the fine-tuned encoder and a per-epoch log of term
    means; the clean encoder is never modified.
    """
    shadow = spec.shadow.images
    if cfg.batch_size > len(shadow):
        raise ValueError(
            f"batch_size {cfg.batch_size} exceeds shadow dataset size {len(shadow)}"
        )

    f_prime = clean.clone()
    if cfg.max_epoch == 0:
        return f_prime, []

    dtype = module_dtype(f_prime.module)
    f_prime.module.train()
    if cfg.freeze_batchnorm:
        _freeze_normalization(f_prime.module)

    # The clean side never changes, so its features are computed once.
    clean_shadow_feats = _clean_features(clean, shadow)
    clean_ref_feats = [_clean_features(clean, p.references.images) for p in spec.pairs]

    trainable = [p for p in f_prime.module.parameters() if p.requires_grad]
    if cfg.optimizer == "sgd":
        opt = torch.optim.SGD(trainable, lr=cfg.learning_rate)
    else:
        opt = torch.optim.Adam(trainable, lr=cfg.learning_rate)

    steps = len(shadow) // cfg.batch_size
    ref_aug = augmentation if cfg.augment_references else None
    log: list[LossBreakdown] = []

    for epoch in range(cfg.max_epoch):
        order = np.random.default_rng(derive_seed(cfg.seed, "batch-order", epoch)).permutation(len(shadow))
        sums = np.zeros(3)
        for step in range(steps):
            idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            batch = shadow[idx]

            l0 = _alignment_term(f_prime.module, batch, spec.pairs, dtype)
            views = _reference_views(spec, ref_aug, derive_seed(cfg.seed, "ref-aug", epoch, step))
            l1 = _anchor_term(f_prime.module, views, clean_ref_feats, dtype)
            l2 = _utility_term(f_prime.module, batch, clean_shadow_feats[idx], dtype)

            total = cfg.lambda1 * l1 + cfg.lambda2 * l2
            if cfg.include_trigger_term:
                total = total + l0
            if not torch.isfinite(total):
                raise DivergenceError(
                    f"non-finite attack loss at epoch {epoch} step {step}",
                    epoch=epoch,
                    step=step,
                )
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += (l0.item(), l1.item(), l2.item())

        means = sums / steps
        log.append(_make_breakdown(float(means[0]), float(means[1]), float(means[2]), cfg))

    f_prime.module.eval()
    return f_prime, log


LOSS_LOG_HEADER = "epoch\talign\tanchor\tutility\ttotal"


def write_loss_log(path, log: list[LossBreakdown]) -> None:
    """Write the per-epoch loss log as tab-separated text."""
    lines = [LOSS_LOG_HEADER]
    for epoch, b in enumerate(log):
        lines.append(f"{epoch}\t{b.align!r}\t{b.anchor!r}\t{b.utility!r}\t{b.total!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_loss_log(path) -> list[LossBreakdown]:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines or lines[0] != LOSS_LOG_HEADER:
        raise ValueError(f"{path} is not a loss log")
    out = []
    for ln in lines[1:]:
        _, a, b, c, d = ln.split("\t")
        out.append(LossBreakdown(align=float(a), anchor=float(b), utility=float(c), total=float(d)))
    return out
