"""Detectability evaluations.

Two detectors operate on "model handles": torch callables mapping an image
batch tensor (B, 3, H, W) to an output batch (logits or features). The
trigger reverse-engineering detector searches for a small input patch that
forces a target class and flags classes whose recovered patch is an
outlier by median-absolute-deviation; the meta-classifier detector trains
a binary head (with jointly optimized query inputs) to separate clean from
backdoored shadow models by their concatenated outputs on the queries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import LabeledDataset, embed_trigger, square_trigger
from .downstream import Classifier, extract_features, load_classifier, train_multishot
from .encoder import Encoder, images_to_tensor, load_encoder
from .pretrain import DivergenceError
from .seeding import derive_seed

ModelHandle = Callable[[torch.Tensor], torch.Tensor]


class ClassifierPipeline(nn.Module):
    """Encoder + head as one differentiable image->logits module."""

    def __init__(self, enc: Encoder, clf: Classifier):
        super().__init__()
        self.encoder = enc.module
        self.head = clf.module

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(x))


def make_handle(clf: Classifier | nn.Module, enc: Encoder | None = None) -> ModelHandle:
    """Build an image->output handle from toolkit objects or a raw module."""
    if enc is not None:
        if not isinstance(clf, Classifier):
            raise ValueError("an encoder can only be combined with a Classifier head")
        pipeline = ClassifierPipeline(enc, clf)
        pipeline.eval()
        return pipeline
    if isinstance(clf, Classifier):
        raise ValueError("a bare Classifier head needs an encoder to accept images")
    if isinstance(clf, nn.Module):
        clf.eval()
    return clf


def load_model_handle(path, encoder_path=None) -> ModelHandle:
    """Turn any checkpoint written by this toolkit into a model handle.

    Encoder checkpoints load directly (outputs are feature vectors);
    classifier checkpoints need the encoder checkpoint they were trained
    on to accept images (outputs are logits).
    """
    payload = torch.load(path, weights_only=False)
    kind = payload.get("kind")
    if kind == "encoder":
        enc = load_encoder(path)
        enc.module.eval()
        return enc.module
    if kind == "classifier":
        if encoder_path is None:
            raise ValueError("a classifier checkpoint needs encoder_path to accept images")
        return make_handle(load_classifier(path), load_encoder(encoder_path))
    raise ValueError(f"{path} is not a checkpoint produced by this toolkit")


@dataclass
class ReversedTrigger:
    """Result of trigger reverse engineering for one candidate class."""

    mask: np.ndarray     # (h, w) reals in [0, 1]
    pattern: np.ndarray  # (h, w, 3) in [0, 1]
    l1_norm: float       # sum of the mask
    target_class: int


def reverse_engineer_trigger(
    clf: Classifier | nn.Module,
    enc: Encoder | None,
    target_class: int,
    clean_data: LabeledDataset | np.ndarray,
    steps: int,
    sparsity_weight: float,
    learning_rate: float = 0.1,
    batch_size: int = 32,
    seed: int = 0,
) -> ReversedTrigger:
    """Optimize a mask+pattern that flips clean inputs to the target class.

    Minimizes cross-entropy toward the target plus sparsity_weight times the
    mask's L1 norm over the clean data; mask and pattern are kept in [0, 1]
    by a sigmoid reparameterization.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    handle = make_handle(clf, enc)
    images = clean_data.images if isinstance(clean_data, LabeledDataset) else np.asarray(clean_data)
    if len(images) == 0:
        raise ValueError("clean data must be non-empty")
    h, w = images.shape[1:3]

    torch.manual_seed(derive_seed(seed, "trigger-reverse", target_class))
    raw_mask = torch.zeros(h, w, requires_grad=True)
    raw_pattern = torch.zeros(h, w, 3, requires_grad=True)
    opt = torch.optim.Adam([raw_mask, raw_pattern], lr=learning_rate)
    ce = nn.CrossEntropyLoss()

    order = np.random.default_rng(derive_seed(seed, "trigger-batches", target_class)).permutation(
        len(images)
    )
    x_all = images_to_tensor(images)
    target = torch.full((batch_size,), target_class, dtype=torch.long)

    for step in range(steps):
        idx = order[(step * batch_size + np.arange(batch_size)) % len(images)]
        x = x_all[idx]
        mask = torch.sigmoid(raw_mask)
        pattern = torch.sigmoid(raw_pattern)
        m = mask[None, None, :, :]
        p = pattern.permute(2, 0, 1)[None]
        x_adv = (1.0 - m) * x + m * p
        logits = handle(x_adv)
        loss = ce(logits, target[: len(x)]) + sparsity_weight * mask.sum()
        if not torch.isfinite(loss):
            raise DivergenceError(f"trigger reverse engineering diverged at step {step}", step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()

    with torch.no_grad():
        mask = torch.sigmoid(raw_mask).numpy().astype(np.float64)
        pattern = torch.sigmoid(raw_pattern).numpy().astype(np.float64)
    return ReversedTrigger(
        mask=mask, pattern=pattern, l1_norm=float(mask.sum()), target_class=target_class
    )


class AnomalyIndex(NamedTuple):
    value: float
    degenerate: bool  # True when the norms' MAD is zero


MAD_CONSISTENCY = 1.4826


def anomaly_index(l1_norms: Sequence[float]) -> AnomalyIndex:
    """MAD-normalized deviation of the smallest per-class trigger norm.

    |min - median| / (1.4826 * MAD); an index above 2 is the conventional
    backdoor flag. A zero MAD yields an infinite value with the degenerate
    flag set.
    """
    norms = np.asarray(list(l1_norms), dtype=np.float64)
    if norms.size < 3:
        raise ValueError("anomaly index needs at least 3 per-class norms")
    median = float(np.median(norms))
    mad = float(np.median(np.abs(norms - median)))
    if mad == 0.0:
        return AnomalyIndex(value=math.inf, degenerate=True)
    value = float(abs(norms.min() - median)) / (MAD_CONSISTENCY * mad)
    return AnomalyIndex(value=value, degenerate=False)


@dataclass
class MetaClassifier:
    """Optimized query inputs plus a linear head over concatenated outputs."""

    queries: np.ndarray      # (k, h, w, 3) in [0, 1]
    head_weight: np.ndarray  # (k * out_dim,)
    head_bias: float
    out_dim: int


def _query_outputs(handle: ModelHandle, queries: torch.Tensor) -> torch.Tensor:
    out = handle(queries)
    if out.ndim != 2:
        raise ValueError("model handle must return a (batch, out_dim) tensor")
    return out.reshape(-1)


def mntd_train(
    shadow_clean: Sequence[ModelHandle],
    shadow_backdoored: Sequence[ModelHandle],
    query_count: int,
    epochs: int,
    seed: int,
    image_size: int = 32,
    learning_rate: float = 1e-2,
) -> MetaClassifier:
    """Jointly optimize query inputs and a binary head separating the two
    shadow populations. Deterministic per seed."""
    if len(shadow_clean) < 2 or len(shadow_backdoored) < 2:
        raise ValueError("need at least 2 shadow models per class")
    if query_count < 1:
        raise ValueError("query_count must be positive")

    torch.manual_seed(derive_seed(seed, "mntd-init"))
    raw_queries = torch.randn(query_count, 3, image_size, image_size) * 0.5
    raw_queries.requires_grad_(True)

    with torch.no_grad():
        probe = shadow_clean[0](torch.sigmoid(raw_queries))
    out_dim = probe.shape[1]
    for handle in list(shadow_clean) + list(shadow_backdoored):
        with torch.no_grad():
            o = handle(torch.sigmoid(raw_queries))
        if o.shape != (query_count, out_dim):
            raise ValueError("all shadow models must share the same output dimension")

    head = nn.Linear(query_count * out_dim, 1)
    trainables = [raw_queries, head.weight, head.bias]
    opt = torch.optim.Adam(trainables, lr=learning_rate)
    bce = nn.BCEWithLogitsLoss()

    handles = list(shadow_clean) + list(shadow_backdoored)
    labels = torch.cat(
        [torch.zeros(len(shadow_clean)), torch.ones(len(shadow_backdoored))]
    )

    for _ in range(epochs):
        queries = torch.sigmoid(raw_queries)
        reps = torch.stack([_query_outputs(h, queries) for h in handles])
        logits = head(reps).squeeze(1)
        loss = bce(logits, labels)
        # Shadow-model parameters stay fixed: gradients flow only to the
        # queries and the head, and the models' .grad fields stay untouched.
        # allow_unused covers models whose output ignores the queries.
        grads = torch.autograd.grad(loss, trainables, allow_unused=True)
        opt.zero_grad()
        for p, g in zip(trainables, grads):
            p.grad = torch.zeros_like(p) if g is None else g
        opt.step()

    with torch.no_grad():
        queries = torch.sigmoid(raw_queries).permute(0, 2, 3, 1).numpy().astype(np.float64)
        weight = head.weight.squeeze(0).numpy().astype(np.float64)
        bias = float(head.bias.item())
    return MetaClassifier(queries=queries, head_weight=weight, head_bias=bias, out_dim=out_dim)


def mntd_score(meta: MetaClassifier, handle: ModelHandle) -> float:
    """Backdoor probability in [0, 1]; 0.5 is the binary decision threshold."""
    queries = images_to_tensor(meta.queries)
    with torch.no_grad():
        rep = _query_outputs(handle, queries).numpy().astype(np.float64)
    if rep.shape != meta.head_weight.shape:
        raise ValueError(
            f"model output size {rep.size} does not match meta-classifier input "
            f"{meta.head_weight.size}"
        )
    logit = float(rep @ meta.head_weight + meta.head_bias)
    return 1.0 / (1.0 + math.exp(-logit))


def jumbo_classifier_population(
    enc: Encoder,
    train_data: LabeledDataset,
    count: int,
    backdoored: bool,
    seed: int,
    epochs: int = 30,
    learning_rate: float = 1e-3,
    hidden: tuple[int, int] = (64, 32),
    poison_fraction: float = 0.2,
) -> list[ModelHandle]:
    """Train shadow downstream classifiers on a frozen encoder.

    The backdoored population poisons a fraction of the training images with
    a randomly sized and placed square trigger relabeled to a random target
    class, mirroring how a trigger-agnostic detector builds its training
    models at reduced scale.
    """
    if count < 2:
        raise ValueError("need at least 2 shadow models per population")
    handles: list[ModelHandle] = []
    size = train_data.image_size
    for k in range(count):
        rng = np.random.default_rng(derive_seed(seed, "jumbo", int(backdoored), k))
        images = train_data.images
        labels = train_data.labels.copy()
        if backdoored:
            tr = square_trigger(
                size,
                size=int(rng.integers(2, 11)),
                corner=("bottom-right", "upper-left", "center")[int(rng.integers(0, 3))],
                color=tuple(rng.random(3)),
            )
            target = int(rng.integers(0, train_data.num_classes))
            n_poison = max(1, int(poison_fraction * len(images)))
            idx = rng.choice(len(images), size=n_poison, replace=False)
            images = images.copy()
            images[idx] = embed_trigger(images[idx], tr)
            labels[idx] = target
        feats, _ = extract_features(enc, LabeledDataset(images, labels, train_data.num_classes))
        clf, _ = train_multishot(
            feats,
            labels,
            epochs=epochs,
            lr=learning_rate,
            seed=derive_seed(seed, "jumbo-head", int(backdoored), k),
            num_classes=train_data.num_classes,
            hidden=hidden,
        )
        handles.append(make_handle(clf, enc))
    return handles
