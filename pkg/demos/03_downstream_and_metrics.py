"""Build downstream classifiers on frozen encoders and measure the four
attack metrics: clean accuracy (CA), backdoored accuracy (BA), attack
success rate (ASR) and its no-attack baseline (ASR-B). Also shows the
prototype-based zero-shot path: class anchors plus a cosine argmax.

Expects nothing on disk; trains everything from scratch at small scale.

Run:  python3 demos/03_downstream_and_metrics.py    (~3 minutes on CPU)
"""

import numpy as np

from sslbackdoor import (
    AttackConfig,
    AttackSpec,
    AugmentationConfig,
    ReferenceSet,
    ShadowDataset,
    SimCLRConfig,
    TargetPair,
    accuracy,
    attack_success_rate,
    build_class_prototypes,
    embed_trigger,
    extract_features,
    inject_backdoor,
    make_synthetic_dataset,
    pretrain_simclr,
    sample_shadow,
    square_trigger,
    train_multishot,
    zero_shot_predict_batch,
)

dataset = make_synthetic_dataset(num_classes=4, per_class=500, image_size=32, seed=2)
pretrain_pool = ShadowDataset(dataset.images[:1200])
downstream_train = dataset.subset(np.arange(1200, 1700))
downstream_test = dataset.subset(np.arange(1700, 2000))

augmentation = AugmentationConfig(crop_scale_range=(0.6, 1.0), flip_probability=0.5,
                                  color_jitter_strength=0.2, blur_probability=0.0)
print("pre-training ...")
sim_cfg = SimCLRConfig(temperature=0.5, batch_size=64, epochs=60, learning_rate=1e-3,
                       seed=3, feature_dim=96, latent_dim=48)
clean, _h, _ = pretrain_simclr(pretrain_pool, sim_cfg, augmentation)

print("injecting the backdoor ...")
trigger = square_trigger(32, size=10)
target = 0
ref_pool = make_synthetic_dataset(4, 4, 32, seed=777)
spec = AttackSpec(
    pairs=[TargetPair("demo", target, trigger,
                      ReferenceSet(ref_pool.images[ref_pool.labels == target][:1]))],
    shadow=sample_shadow(pretrain_pool, 800, seed=11),
)
backdoored, _log = inject_backdoor(
    clean, spec,
    AttackConfig(max_epoch=40, batch_size=64, optimizer="adam", seed=4),
    augmentation=augmentation,
)

print("training downstream heads (one per encoder) ...")
heads = {}
for name, enc in (("clean", clean), ("backdoored", backdoored)):
    feats, labels = extract_features(enc, downstream_train)
    heads[name], _ = train_multishot(feats, labels, epochs=120, lr=1e-3, seed=6,
                                     num_classes=4)

ca = accuracy(heads["clean"], clean, downstream_test)
ba = accuracy(heads["backdoored"], backdoored, downstream_test)
asr = attack_success_rate(heads["backdoored"], backdoored, downstream_test, trigger, target)
asr_b = attack_success_rate(heads["clean"], clean, downstream_test, trigger, target)
print(f"\nmulti-shot:  CA={ca:.3f}  BA={ba:.3f}  ASR={asr:.3f}  ASR-B={asr_b:.3f}")

# Zero-shot emulation: per-class mean-feature prototypes stand in for the
# fixed text-side class embeddings; prediction is a cosine argmax.
protos_clean = build_class_prototypes(clean, downstream_train)
protos_bd = build_class_prototypes(backdoored, downstream_train)
zs_clean = np.mean(zero_shot_predict_batch(clean, protos_clean, downstream_test.images)
                   == downstream_test.labels)
zs_bd = np.mean(zero_shot_predict_batch(backdoored, protos_bd, downstream_test.images)
                == downstream_test.labels)
triggered = embed_trigger(downstream_test.images, trigger)
zs_asr = np.mean(zero_shot_predict_batch(backdoored, protos_bd, triggered) == target)
print(f"zero-shot (prototype emulation):  CA={zs_clean:.3f}  BA={zs_bd:.3f}  ASR={zs_asr:.3f}")
