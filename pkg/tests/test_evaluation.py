import json

import numpy as np
import pytest

from sslbackdoor.data import make_synthetic_dataset, square_trigger
from sslbackdoor.downstream import extract_features, train_multishot
from sslbackdoor.encoder import build_encoder
from sslbackdoor.evaluation import (
    MetricsReport,
    ReportIntegrityError,
    accuracy,
    accuracy_counts,
    attack_success_rate,
    compile_report,
    similarity_cdf,
    validate_report,
)
from test_attack import constant_encoder
from test_downstream import fixed_logit_classifier


@pytest.fixture(scope="module")
def enc():
    return build_encoder(feature_dim=16, seed=21)


@pytest.fixture(scope="module")
def balanced_ten():
    return make_synthetic_dataset(10, 10, 32, seed=17)


class TestAccuracy:
    def test_constant_classifier_on_balanced_set(self, enc, balanced_ten):
        clf = fixed_logit_classifier(16, [9.0] + [0.0] * 9)
        assert accuracy(clf, enc, balanced_ten) == 0.1

    def test_perfect_classifier(self, enc):
        from sslbackdoor.data import LabeledDataset
        from sslbackdoor.downstream import predict_batch

        ds = make_synthetic_dataset(2, 30, 32, seed=3)
        feats, labels = extract_features(enc, ds)
        clf, _ = train_multishot(feats, labels, epochs=200, lr=5e-3, seed=0)
        # relabel to the classifier's own (mixed) predictions: a classifier
        # that is right on every image must score exactly 1.0
        preds = predict_batch(clf, enc, ds.images)
        assert len(np.unique(preds)) > 1
        relabeled = LabeledDataset(ds.images, preds, ds.num_classes)
        assert accuracy(clf, enc, relabeled) == 1.0

    def test_counts_are_exact(self, enc, balanced_ten):
        clf = fixed_logit_classifier(16, [9.0] + [0.0] * 9)
        hits, n = accuracy_counts(clf, enc, balanced_ten)
        assert (hits, n) == (10, 100)

    def test_empty_set_rejected(self, enc, balanced_ten):
        clf = fixed_logit_classifier(16, [1.0, 0.0])
        empty = balanced_ten.subset(np.array([], dtype=int))
        with pytest.raises(ValueError):
            accuracy(clf, enc, empty)


class TestAttackSuccessRate:
    def test_constant_target_classifier(self, enc, balanced_ten):
        trig = square_trigger(32, size=10)
        clf = fixed_logit_classifier(16, [0.0, 0.0, 0.0, 7.0])
        assert attack_success_rate(clf, enc, balanced_ten, trig, y_target=3) == 1.0

    def test_never_target_classifier(self, enc, balanced_ten):
        trig = square_trigger(32, size=10)
        clf = fixed_logit_classifier(16, [7.0, 0.0, 0.0, 0.0])
        assert attack_success_rate(clf, enc, balanced_ten, trig, y_target=3) == 0.0

    def test_target_class_images_included(self, enc, balanced_ten):
        # the denominator is the whole test set, target-class rows included
        trig = square_trigger(32, size=10)
        clf = fixed_logit_classifier(16, [7.0] + [0.0] * 9)
        only_target = balanced_ten.subset(np.nonzero(balanced_ten.labels == 0)[0])
        assert attack_success_rate(clf, enc, only_target, trig, y_target=0) == 1.0


class TestSimilarityCdf:
    def test_constant_encoder_gives_all_ones(self, balanced_ten):
        enc = constant_encoder([0.5, -0.5, 0.25], image_size=32)
        ds = balanced_ten.subset(np.arange(8))
        values = similarity_cdf(enc, ds.images[0], ds, square_trigger(32, 4))
        assert np.allclose(values, 1.0, atol=1e-12)

    def test_sorted_and_sized(self, enc, balanced_ten):
        ds = balanced_ten.subset(np.arange(25))
        values = similarity_cdf(enc, ds.images[0], ds, square_trigger(32, 10))
        assert len(values) == 25
        assert np.all(np.diff(values) >= 0.0)
        assert values.min() >= -1.0 and values.max() <= 1.0


class TestCompileReport:
    def test_rates_from_counts(self):
        report = compile_report("exp", "d" * 16, ca=(5, 10), ba=(6, 10), asr=(9, 10), asr_b=(1, 10))
        assert report.ca == 0.5 and report.ba == 0.6
        assert report.asr == 0.9 and report.asr_b == 0.1
        validate_report(report)

    def test_missing_metric_rejected(self):
        with pytest.raises(ReportIntegrityError):
            compile_report("exp", "d", ca=(5, 10), ba=(6, 10), asr=(9, 10), asr_b=None)

    def test_inconsistent_counts_rejected(self):
        with pytest.raises(ReportIntegrityError):
            compile_report("exp", "d", ca=(11, 10), ba=(6, 10), asr=(9, 10), asr_b=(0, 10))

    def test_json_round_trip(self):
        report = compile_report("exp", "d" * 16, ca=(5, 10), ba=(6, 10), asr=(9, 10), asr_b=(1, 10))
        again = MetricsReport.from_json(report.to_json())
        assert again == report

    def test_tampered_rate_detected(self):
        report = compile_report("exp", "d", ca=(5, 10), ba=(6, 10), asr=(9, 10), asr_b=(1, 10))
        payload = json.loads(report.to_json())
        payload["ca"] = 0.51
        with pytest.raises(ReportIntegrityError):
            validate_report(MetricsReport(**payload))
