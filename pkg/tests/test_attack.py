import copy

import numpy as np
import pytest
import torch
import torch.nn as nn

from sslbackdoor.attack import (
    AttackConfig,
    AttackSpec,
    LossBreakdown,
    ReferenceSet,
    TargetPair,
    combined_loss,
    inject_backdoor,
    read_loss_log,
    reference_anchor_loss,
    trigger_alignment_loss,
    utility_loss,
    write_loss_log,
)
from sslbackdoor.data import (
    AugmentationConfig,
    ShadowDataset,
    augment,
    make_synthetic_dataset,
    square_trigger,
)
from sslbackdoor.encoder import Encoder, build_encoder
from sslbackdoor.pretrain import DegenerateFeatureError, DivergenceError
from sslbackdoor.seeding import derive_seed
from conftest import toy_attack_spec, toy_encoder, toy_images
from gradcheck import analytic_gradient, max_relative_error, numeric_gradient
from oracles import (
    alignment_scalar,
    anchor_scalar,
    combined_scalar,
    mlp_feature_fn,
    utility_scalar,
)


def constant_encoder(vector, image_size=4):
    """Toy encoder emitting the same feature vector for every input."""
    enc = toy_encoder(seed=0, image_size=image_size, feature_dim=len(vector))
    with torch.no_grad():
        enc.module.fc1.weight.zero_()
        enc.module.fc1.bias.zero_()
        enc.module.fc2.weight.zero_()
        enc.module.fc2.bias.copy_(torch.tensor(vector, dtype=torch.float64))
    return enc


def negated_encoder(enc):
    out = enc.clone()
    with torch.no_grad():
        out.module.fc2.weight.mul_(-1.0)
        out.module.fc2.bias.mul_(-1.0)
    return out


class TestFixedPoints:
    def test_anchor_loss_is_minus_one_when_unchanged(self):
        enc = toy_encoder(seed=1)
        spec = toy_attack_spec(pairs=2, refs=(1, 2))
        loss = reference_anchor_loss(enc, enc, spec, augmentation=None)
        assert loss.item() == pytest.approx(-1.0, abs=1e-9)

    def test_utility_loss_is_minus_one_when_unchanged(self):
        enc = toy_encoder(seed=2)
        batch = toy_images(4, seed=3)
        assert utility_loss(enc, enc, batch).item() == pytest.approx(-1.0, abs=1e-9)

    def test_utility_loss_is_plus_one_when_negated(self):
        enc = toy_encoder(seed=2)
        batch = toy_images(4, seed=3)
        loss = utility_loss(negated_encoder(enc), enc, batch)
        assert loss.item() == pytest.approx(1.0, abs=1e-9)

    def test_alignment_loss_constant_encoder(self):
        spec = toy_attack_spec()
        enc = constant_encoder([0.3, -0.7, 0.2])
        loss = trigger_alignment_loss(enc, spec.shadow.images[:3], spec)
        assert loss.item() == pytest.approx(-1.0, abs=1e-12)

    def test_alignment_loss_orthogonal_features(self):
        # Features depend only on the bottom-right pixel: triggered inputs
        # map to [1, 0], the (corner-dark) references map to [0, 1].
        class CornerProbe(nn.Module):
            def forward(self, x):
                s = x[:, 0, -1, -1]
                return torch.stack([s, 1.0 - s], dim=1)

        rng = np.random.default_rng(0)
        shadow_imgs = rng.random((4, 4, 4, 3)) * 0.8
        refs = rng.random((2, 4, 4, 3)) * 0.8
        refs[:, -1, -1, :] = 0.0
        trigger = square_trigger(4, size=2, corner="bottom-right")
        spec = AttackSpec(
            pairs=[TargetPair("t", 0, trigger, ReferenceSet(refs))],
            shadow=ShadowDataset(shadow_imgs),
        )
        enc = Encoder("probe", 2, 4, CornerProbe().double())
        loss = trigger_alignment_loss(enc, shadow_imgs, spec)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_zero_feature_rejected(self):
        spec = toy_attack_spec()
        enc = constant_encoder([0.0, 0.0, 0.0])
        with pytest.raises(DegenerateFeatureError):
            trigger_alignment_loss(enc, spec.shadow.images[:2], spec)


class TestScalarOracleEquivalence:
    """Each loss matches a term-by-term scalar evaluation to 1e-9."""

    def test_alignment(self):
        spec = toy_attack_spec(pairs=1, refs=(1,))
        enc = toy_encoder(seed=4)
        batch = spec.shadow.images[:3]
        value = trigger_alignment_loss(enc, batch, spec).item()
        feat = mlp_feature_fn(enc.module.state_dict())
        pairs = [
            (lambda x, t=p.trigger: np.where(t.mask[..., None] == 1.0, t.pattern, x),
             list(p.references.images))
            for p in spec.pairs
        ]
        assert value == pytest.approx(alignment_scalar(feat, list(batch), pairs), abs=1e-9)

    def test_alignment_two_pairs(self):
        spec = toy_attack_spec(pairs=2, refs=(2, 1))
        enc = toy_encoder(seed=5)
        batch = spec.shadow.images[:4]
        value = trigger_alignment_loss(enc, batch, spec).item()
        feat = mlp_feature_fn(enc.module.state_dict())
        pairs = [
            (lambda x, t=p.trigger: np.where(t.mask[..., None] == 1.0, t.pattern, x),
             list(p.references.images))
            for p in spec.pairs
        ]
        assert value == pytest.approx(alignment_scalar(feat, list(batch), pairs), abs=1e-9)

    def test_anchor_with_unequal_reference_counts(self):
        spec = toy_attack_spec(pairs=2, refs=(1, 2))
        assert spec.total_references == 3
        f_prime = toy_encoder(seed=6)
        f_clean = toy_encoder(seed=7)
        value = reference_anchor_loss(f_prime, f_clean, spec, augmentation=None).item()
        feat_new = mlp_feature_fn(f_prime.module.state_dict())
        feat_clean = mlp_feature_fn(f_clean.module.state_dict())
        ref_sets = [list(p.references.images) for p in spec.pairs]
        assert value == pytest.approx(anchor_scalar(feat_new, feat_clean, ref_sets), abs=1e-9)

    def test_anchor_with_augmented_views(self):
        spec = toy_attack_spec(pairs=1, refs=(2,))
        f_prime = toy_encoder(seed=8)
        f_clean = toy_encoder(seed=9)
        aug = AugmentationConfig(crop_scale_range=(0.7, 1.0), flip_probability=0.5,
                                 color_jitter_strength=0.3, blur_probability=0.0)
        seed = 123
        value = reference_anchor_loss(f_prime, f_clean, spec, augmentation=aug, seed=seed).item()
        # reproduce the views, then hand them to the scalar oracle
        views = [
            [augment(img, aug, derive_seed(seed, i, j)) for j, img in enumerate(p.references.images)]
            for i, p in enumerate(spec.pairs)
        ]
        feat_new = mlp_feature_fn(f_prime.module.state_dict())
        feat_clean = mlp_feature_fn(f_clean.module.state_dict())
        ref_sets = [list(p.references.images) for p in spec.pairs]
        expected = anchor_scalar(feat_new, feat_clean, ref_sets, views=views)
        assert value == pytest.approx(expected, abs=1e-9)

    def test_utility(self):
        f_prime = toy_encoder(seed=10)
        f_clean = toy_encoder(seed=11)
        batch = toy_images(4, seed=12)
        value = utility_loss(f_prime, f_clean, batch).item()
        feat_new = mlp_feature_fn(f_prime.module.state_dict())
        feat_clean = mlp_feature_fn(f_clean.module.state_dict())
        assert value == pytest.approx(utility_scalar(feat_new, feat_clean, list(batch)), abs=1e-9)

    def test_combined_matches_components(self):
        spec = toy_attack_spec(pairs=2, refs=(1, 2))
        f_prime = toy_encoder(seed=13)
        f_clean = toy_encoder(seed=14)
        batch = spec.shadow.images[:3]
        cfg = AttackConfig(lambda1=0.5, lambda2=2.0, seed=0)
        total, breakdown = combined_loss(f_prime, f_clean, batch, spec, cfg, augmentation=None)
        l0 = trigger_alignment_loss(f_prime, batch, spec).item()
        l1 = reference_anchor_loss(f_prime, f_clean, spec, augmentation=None).item()
        l2 = utility_loss(f_prime, f_clean, batch).item()
        assert breakdown.align == pytest.approx(l0, abs=1e-12)
        assert breakdown.anchor == pytest.approx(l1, abs=1e-12)
        assert breakdown.utility == pytest.approx(l2, abs=1e-12)
        assert total.item() == pytest.approx(combined_scalar(l0, l1, l2, 0.5, 2.0), abs=1e-9)

    def test_lambda_zero_reduces_to_alignment(self):
        spec = toy_attack_spec()
        f_prime = toy_encoder(seed=15)
        f_clean = toy_encoder(seed=16)
        batch = spec.shadow.images[:2]
        cfg = AttackConfig(lambda1=0.0, lambda2=0.0, seed=0)
        total, _ = combined_loss(f_prime, f_clean, batch, spec, cfg, augmentation=None)
        l0 = trigger_alignment_loss(f_prime, batch, spec).item()
        assert total.item() == pytest.approx(l0, abs=1e-12)

    def test_all_terms_minus_one_gives_minus_three(self):
        spec = toy_attack_spec()
        enc = constant_encoder([0.4, 0.1, -0.9])
        cfg = AttackConfig(lambda1=1.0, lambda2=1.0, seed=0)
        total, breakdown = combined_loss(enc, enc, spec.shadow.images[:2], spec, cfg,
                                         augmentation=None)
        assert total.item() == pytest.approx(-3.0, abs=1e-9)
        assert breakdown.total == pytest.approx(-3.0, abs=1e-9)

    def test_full_image_trigger_reduction(self):
        # When the trigger covers the whole image, every triggered input is
        # the pattern itself, so the loss reduces to the mean similarity of
        # the pattern's feature with the references' features.
        image_size = 4
        rng = np.random.default_rng(31)
        trigger = square_trigger(image_size, size=image_size, color=(0.2, 0.9, 0.5))
        refs = ReferenceSet(rng.random((2, image_size, image_size, 3)))
        spec = AttackSpec(
            pairs=[TargetPair("t", 0, trigger, refs)],
            shadow=ShadowDataset(rng.random((3, image_size, image_size, 3))),
        )
        enc = toy_encoder(seed=17)
        value = trigger_alignment_loss(enc, spec.shadow.images, spec).item()
        feat = mlp_feature_fn(enc.module.state_dict())
        from oracles import cos
        f_pat = feat(trigger.pattern)
        direct = -np.mean([cos(f_pat, feat(r)) for r in refs.images])
        assert value == pytest.approx(direct, abs=1e-9)


class TestBounds:
    @pytest.mark.parametrize("seed", range(5))
    def test_terms_lie_in_unit_interval(self, seed):
        spec = toy_attack_spec(seed=seed + 50, pairs=2, refs=(2, 1))
        f_prime = toy_encoder(seed=seed)
        f_clean = toy_encoder(seed=seed + 100)
        batch = spec.shadow.images[:3]
        for value in (
            trigger_alignment_loss(f_prime, batch, spec).item(),
            reference_anchor_loss(f_prime, f_clean, spec, augmentation=None).item(),
            utility_loss(f_prime, f_clean, batch).item(),
        ):
            assert -1.0 - 1e-9 <= value <= 1.0 + 1e-9


class TestGradients:
    """Analytic gradients match central finite differences (step 1e-5)."""

    def setup_method(self):
        self.spec = toy_attack_spec(pairs=2, refs=(1, 2))
        self.f_prime = toy_encoder(seed=18)
        self.f_clean = toy_encoder(seed=19)
        self.batch = self.spec.shadow.images[:3]
        n_params = sum(p.numel() for p in self.f_prime.module.parameters())
        assert n_params <= 500

    def check(self, loss_fn):
        a = analytic_gradient(self.f_prime.module, loss_fn)
        n = numeric_gradient(self.f_prime.module, loss_fn)
        assert max_relative_error(a, n) <= 1e-4

    def test_alignment_gradient(self):
        self.check(lambda: trigger_alignment_loss(self.f_prime, self.batch, self.spec))

    def test_anchor_gradient(self):
        self.check(
            lambda: reference_anchor_loss(self.f_prime, self.f_clean, self.spec, augmentation=None)
        )

    def test_utility_gradient(self):
        self.check(lambda: utility_loss(self.f_prime, self.f_clean, self.batch))

    def test_combined_gradient(self):
        cfg = AttackConfig(lambda1=0.7, lambda2=1.3, seed=0)
        self.check(
            lambda: combined_loss(
                self.f_prime, self.f_clean, self.batch, self.spec, cfg, augmentation=None
            )[0]
        )


def small_conv_setup(seed=0, n_shadow=48, image_size=16):
    ds = make_synthetic_dataset(2, n_shadow, image_size, seed=seed + 60)
    shadow = ShadowDataset(ds.images[:n_shadow])
    trigger = square_trigger(image_size, size=4)
    refs = ReferenceSet(ds.images[ds.labels == 0][:1])
    spec = AttackSpec(pairs=[TargetPair("t", 0, trigger, refs)], shadow=shadow)
    clean = build_encoder("conv3", image_size=image_size, feature_dim=16, seed=seed)
    return clean, spec


class TestInjectBackdoor:
    def test_zero_epochs_returns_identical_params(self):
        clean, spec = small_conv_setup()
        cfg = AttackConfig(max_epoch=0, batch_size=16, seed=0)
        out, log = inject_backdoor(clean, spec, cfg)
        assert log == []
        for k, v in clean.module.state_dict().items():
            assert torch.equal(v, out.module.state_dict()[k])

    def test_zero_learning_rate_is_identity(self):
        clean, spec = small_conv_setup()
        cfg = AttackConfig(learning_rate=0.0, max_epoch=5, batch_size=16,
                           optimizer="sgd", seed=0)
        out, log = inject_backdoor(clean, spec, cfg)
        assert len(log) == 5
        for k, v in clean.module.state_dict().items():
            assert torch.equal(v, out.module.state_dict()[k]), k

    def test_descent_trend_over_three_seeds(self):
        firsts, lasts = [], []
        for seed in range(3):
            clean, spec = small_conv_setup(seed=seed)
            cfg = AttackConfig(max_epoch=5, batch_size=16, optimizer="adam", seed=seed)
            _out, log = inject_backdoor(clean, spec, cfg)
            firsts.append(log[0].total)
            lasts.append(log[-1].total)
        assert np.mean(lasts) < np.mean(firsts)

    def test_clean_encoder_not_mutated(self):
        clean, spec = small_conv_setup()
        before = copy.deepcopy(clean.module.state_dict())
        cfg = AttackConfig(max_epoch=2, batch_size=16, optimizer="adam", seed=1)
        inject_backdoor(clean, spec, cfg)
        after = clean.module.state_dict()
        assert before.keys() == after.keys()
        for k in before:
            assert torch.equal(before[k], after[k]), k

    def test_breakdown_identity_every_epoch(self):
        clean, spec = small_conv_setup()
        cfg = AttackConfig(lambda1=0.8, lambda2=1.7, max_epoch=3, batch_size=16,
                           optimizer="adam", seed=2)
        _out, log = inject_backdoor(clean, spec, cfg)
        for b in log:
            assert abs(b.total - (b.align + 0.8 * b.anchor + 1.7 * b.utility)) <= 1e-9

    def test_frozen_batchnorm_layers_do_not_move(self):
        from torch.nn.modules.batchnorm import _BatchNorm

        clean, spec = small_conv_setup()
        cfg = AttackConfig(max_epoch=2, batch_size=16, optimizer="adam",
                           freeze_batchnorm=True, seed=3)
        out, _ = inject_backdoor(clean, spec, cfg)
        before = clean.module.state_dict()
        after = out.module.state_dict()
        moved = [k for k in before if not torch.equal(before[k], after[k])]
        assert moved, "attack should update non-normalization parameters"
        bn_prefixes = tuple(
            f"{name}." for name, m in clean.module.named_modules() if isinstance(m, _BatchNorm)
        )
        assert bn_prefixes
        for k in before:
            if k.startswith(bn_prefixes):
                assert torch.equal(before[k], after[k]), k

    def test_unfrozen_batchnorm_stats_move(self):
        clean, spec = small_conv_setup()
        cfg = AttackConfig(max_epoch=2, batch_size=16, optimizer="adam",
                           freeze_batchnorm=False, seed=3)
        out, _ = inject_backdoor(clean, spec, cfg)
        before = clean.module.state_dict()
        after = out.module.state_dict()
        bn_stats = [k for k in before if k.endswith("running_mean")]
        assert any(not torch.equal(before[k], after[k]) for k in bn_stats)

    def test_batch_size_larger_than_shadow_rejected(self):
        clean, spec = small_conv_setup(n_shadow=8)
        cfg = AttackConfig(max_epoch=1, batch_size=64, seed=0)
        with pytest.raises(ValueError):
            inject_backdoor(clean, spec, cfg)

    def test_divergence_reported_with_epoch(self):
        clean, spec = small_conv_setup()
        with torch.no_grad():
            clean.module.fc.weight[0, 0] = float("nan")
        cfg = AttackConfig(max_epoch=1, batch_size=16, seed=0)
        with pytest.raises(DivergenceError) as err:
            inject_backdoor(clean, spec, cfg)
        assert err.value.epoch == 0

    def test_deterministic_per_seed(self):
        clean, spec = small_conv_setup()
        cfg = AttackConfig(max_epoch=2, batch_size=16, optimizer="adam", seed=9)
        _o1, log1 = inject_backdoor(clean, spec, cfg)
        _o2, log2 = inject_backdoor(clean, spec, cfg)
        assert log1 == log2


class TestLossLog:
    def test_round_trip(self, tmp_path):
        log = [
            LossBreakdown(align=-0.5, anchor=-0.25, utility=-0.125, total=-0.875),
            LossBreakdown(align=-0.9, anchor=-0.8, utility=-0.7, total=-2.4),
        ]
        path = tmp_path / "loss.tsv"
        write_loss_log(path, log)
        assert read_loss_log(path) == log

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "other.tsv"
        path.write_text("nope\n")
        with pytest.raises(ValueError):
            read_loss_log(path)
