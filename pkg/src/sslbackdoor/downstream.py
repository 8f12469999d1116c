"""Downstream classifiers on a frozen encoder: a trained fully connected
head, and a prototype table emulating zero-shot classification with fixed
class anchors plus a cosine argmax."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .data import LabeledDataset
from .encoder import CHECKPOINT_VERSION, Encoder, encode
from .pretrain import NORM_FLOOR, DegenerateFeatureError
from .seeding import derive_seed


class ClassifierHead(nn.Module):
    """Fully connected net feature_dim -> hidden sizes -> num_classes."""

    def __init__(self, feature_dim: int, num_classes: int, hidden: tuple[int, int] = (512, 256)):
        super().__init__()
        h1, h2 = hidden
        self.net = nn.Sequential(
            nn.Linear(feature_dim, h1),
            nn.ReLU(inplace=True),
            nn.Linear(h1, h2),
            nn.ReLU(inplace=True),
            nn.Linear(h2, num_classes),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


@dataclass
class Classifier:
    feature_dim: int
    num_classes: int
    hidden_sizes: tuple[int, int]
    module: ClassifierHead


def extract_features(enc: Encoder, dataset: LabeledDataset) -> tuple[np.ndarray, np.ndarray]:
    """Encode every image; row k corresponds to image k."""
    return encode(enc, dataset.images), dataset.labels.copy()


def train_multishot(
    features: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    lr: float,
    seed: int,
    num_classes: int | None = None,
    hidden: tuple[int, int] = (512, 256),
    batch_size: int = 64,
) -> tuple[Classifier, list[float]]:
    """Train a head on frozen features with cross-entropy and adaptive moments.

    Deterministic per seed. Returns the classifier and per-epoch training
    accuracy. Every class in [0, num_classes) must be present.
    """
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or len(features) != len(labels):
        raise ValueError("features must be (n, d) with one label per row")
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    present = set(np.unique(labels).tolist())
    missing = sorted(set(range(num_classes)) - present)
    if missing:
        raise ValueError(f"classes with no training examples: {missing}")

    torch.manual_seed(derive_seed(seed, "head-init"))
    head = ClassifierHead(features.shape[1], num_classes, hidden)
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    ce = nn.CrossEntropyLoss()
    x_all = torch.from_numpy(features)
    y_all = torch.from_numpy(labels)

    history: list[float] = []
    n = len(features)
    for epoch in range(epochs):
        order = np.random.default_rng(derive_seed(seed, "order", epoch)).permutation(n)
        head.train()
        correct = 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb, yb = x_all[idx], y_all[idx]
            logits = head(xb)
            loss = ce(logits, yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            correct += int((logits.argmax(dim=1) == yb).sum())
        history.append(correct / n)

    head.eval()
    return Classifier(features.shape[1], num_classes, tuple(hidden), head), history


def _logits(clf: Classifier, feats: np.ndarray) -> np.ndarray:
    clf.module.eval()
    with torch.no_grad():
        return clf.module(torch.from_numpy(np.asarray(feats, dtype=np.float32))).numpy()


def predict_batch(clf: Classifier, enc: Encoder, images: np.ndarray) -> np.ndarray:
    """Predicted class ids for a batch; ties resolve to the smallest id."""
    feats = encode(enc, images)
    return np.argmax(_logits(clf, feats), axis=1)


def predict(clf: Classifier, enc: Encoder, x: np.ndarray) -> int:
    return int(predict_batch(clf, enc, np.asarray(x)[None])[0])


@dataclass
class PrototypeTable:
    """Per-class unit feature vectors serving as fixed classification anchors."""

    prototypes: np.ndarray  # (num_classes, feature_dim), unit rows
    class_names: list[str]

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.prototypes.ndim != 2 or len(self.prototypes) != len(self.class_names):
            raise ValueError("one prototype per class name required")
        norms = np.linalg.norm(self.prototypes, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("prototypes must be unit vectors")


def build_class_prototypes(
    enc: Encoder, exemplars: LabeledDataset, class_names: list[str] | None = None
) -> PrototypeTable:
    """Prototype for class c = normalized mean feature of its exemplars."""
    feats, labels = extract_features(enc, exemplars)
    protos = np.zeros((exemplars.num_classes, feats.shape[1]))
    for c in range(exemplars.num_classes):
        rows = feats[labels == c]
        if len(rows) == 0:
            raise ValueError(f"no exemplars for class {c}")
        mean = rows.mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < NORM_FLOOR:
            raise DegenerateFeatureError(f"class {c} mean feature has zero norm")
        protos[c] = mean / norm
    if class_names is None:
        class_names = [str(c) for c in range(exemplars.num_classes)]
    return PrototypeTable(prototypes=protos, class_names=list(class_names))


def zero_shot_predict_batch(
    enc: Encoder, protos: PrototypeTable, images: np.ndarray
) -> np.ndarray:
    """Argmax over cosine similarity to the prototypes; ties to smallest id."""
    feats = encode(enc, images).astype(np.float64)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    if (norms < NORM_FLOOR).any():
        raise DegenerateFeatureError("zero-norm feature in zero-shot prediction")
    sims = (feats / norms) @ protos.prototypes.T
    return np.argmax(sims, axis=1)


def zero_shot_predict(enc: Encoder, protos: PrototypeTable, x: np.ndarray) -> int:
    return int(zero_shot_predict_batch(enc, protos, np.asarray(x)[None])[0])


def save_classifier(clf: Classifier, path, train_config: dict | None = None) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "kind": "classifier",
            "feature_dim": clf.feature_dim,
            "num_classes": clf.num_classes,
            "hidden_sizes": tuple(clf.hidden_sizes),
            "tensors": clf.module.state_dict(),
            "train_config": train_config,
        },
        path,
    )


def load_classifier(path) -> Classifier:
    payload = torch.load(path, weights_only=False)
    if payload.get("kind") != "classifier":
        raise ValueError(f"{path} is not a classifier checkpoint")
    head = ClassifierHead(
        payload["feature_dim"], payload["num_classes"], tuple(payload["hidden_sizes"])
    )
    head.load_state_dict(payload["tensors"])
    head.eval()
    return Classifier(
        payload["feature_dim"], payload["num_classes"], tuple(payload["hidden_sizes"]), head
    )


def save_prototypes(table: PrototypeTable, path) -> None:
    """Serialize prototypes as a labeled vector list (JSON)."""
    payload = {
        "class_names": table.class_names,
        "prototypes": [[float(v) for v in row] for row in table.prototypes],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def load_prototypes(path) -> PrototypeTable:
    with open(path) as fh:
        payload = json.load(fh)
    return PrototypeTable(
        prototypes=np.array(payload["prototypes"]), class_names=payload["class_names"]
    )
