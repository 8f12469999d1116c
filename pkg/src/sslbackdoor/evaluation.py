"""Attack metrics: clean/backdoored accuracy, attack success rates, and
feature-similarity diagnostics. Rates are exact hit counts divided once."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .data import LabeledDataset, Trigger, embed_trigger
from .downstream import Classifier, predict_batch
from .encoder import Encoder, encode
from .pretrain import NORM_FLOOR, DegenerateFeatureError


class ReportIntegrityError(ValueError):
    """Raised when report fields are missing or internally inconsistent."""


def accuracy_counts(clf: Classifier, enc: Encoder, test: LabeledDataset) -> tuple[int, int]:
    if len(test) == 0:
        raise ValueError("test set must be non-empty")
    preds = predict_batch(clf, enc, test.images)
    return int((preds == test.labels).sum()), len(test)


def accuracy(clf: Classifier, enc: Encoder, test: LabeledDataset) -> float:
    """Fraction of clean test images predicted correctly."""
    hits, n = accuracy_counts(clf, enc, test)
    return hits / n


def attack_success_counts(
    clf: Classifier, enc: Encoder, test: LabeledDataset, trigger: Trigger, y_target: int
) -> tuple[int, int]:
    if len(test) == 0:
        raise ValueError("test set must be non-empty")
    triggered = embed_trigger(test.images, trigger)
    preds = predict_batch(clf, enc, triggered)
    return int((preds == y_target).sum()), len(test)


def attack_success_rate(
    clf: Classifier, enc: Encoder, test: LabeledDataset, trigger: Trigger, y_target: int
) -> float:
    """Fraction of trigger-embedded test images predicted as the target class.

    Every test image counts, including those whose true label already is the
    target class; reports flag this convention so external comparisons can
    adjust.
    """
    hits, n = attack_success_counts(clf, enc, test, trigger, y_target)
    return hits / n


def similarity_cdf(
    enc: Encoder, reference: np.ndarray, test: LabeledDataset, trigger: Trigger
) -> np.ndarray:
    """Sorted cosine similarities between the reference feature and every
    trigger-embedded test image's feature."""
    if len(test) == 0:
        raise ValueError("test set must be non-empty")
    ref_feat = encode(enc, np.asarray(reference)[None])[0].astype(np.float64)
    feats = encode(enc, embed_trigger(test.images, trigger)).astype(np.float64)
    ref_norm = np.linalg.norm(ref_feat)
    norms = np.linalg.norm(feats, axis=1)
    if ref_norm < NORM_FLOOR or (norms < NORM_FLOOR).any():
        raise DegenerateFeatureError("zero-norm feature in similarity computation")
    sims = feats @ ref_feat / (norms * ref_norm)
    return np.sort(np.clip(sims, -1.0, 1.0))


@dataclass(frozen=True)
class MetricsReport:
    """CA/BA/ASR/ASR-B for one (encoder, downstream task) experiment."""

    experiment_id: str
    config_digest: str
    ca: float
    ba: float
    asr: float
    asr_b: float
    counts: dict  # metric -> [hits, test_size]
    asr_includes_target_class: bool = True

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "MetricsReport":
        return MetricsReport(**json.loads(text))


_METRICS = ("ca", "ba", "asr", "asr_b")


def compile_report(
    experiment_id: str,
    config_digest: str,
    ca: tuple[int, int],
    ba: tuple[int, int],
    asr: tuple[int, int],
    asr_b: tuple[int, int],
) -> MetricsReport:
    """Assemble a report from (hits, test_size) pairs, checking consistency."""
    parts = {"ca": ca, "ba": ba, "asr": asr, "asr_b": asr_b}
    counts = {}
    rates = {}
    for name in _METRICS:
        pair = parts[name]
        if pair is None:
            raise ReportIntegrityError(f"missing metric {name!r}")
        hits, n = int(pair[0]), int(pair[1])
        if n <= 0 or not 0 <= hits <= n:
            raise ReportIntegrityError(f"inconsistent counts for {name!r}: {hits}/{n}")
        counts[name] = [hits, n]
        rates[name] = hits / n
    return MetricsReport(
        experiment_id=experiment_id,
        config_digest=config_digest,
        ca=rates["ca"],
        ba=rates["ba"],
        asr=rates["asr"],
        asr_b=rates["asr_b"],
        counts=counts,
    )


def validate_report(report: MetricsReport) -> None:
    """Check that each stored rate equals its hits / test_size exactly."""
    for name in _METRICS:
        if name not in report.counts:
            raise ReportIntegrityError(f"missing counts for {name!r}")
        hits, n = report.counts[name]
        if getattr(report, name) != hits / n:
            raise ReportIntegrityError(f"rate {name!r} does not equal {hits}/{n}")
