"""Inject a backdoor into a pre-trained encoder by fine-tuning it against
the three-term similarity objective, then look at what moved.

The combined loss drives trigger-embedded shadow inputs toward the
reference inputs' features (alignment term) while anchoring the reference
features (anchor term) and every clean input's features (utility term) to
the clean encoder.

Run:  python3 demos/02_backdoor_injection.py        (~2 minutes on CPU)
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
    cosine_similarity,
    embed_trigger,
    encode,
    inject_backdoor,
    make_synthetic_dataset,
    pretrain_simclr,
    sample_shadow,
    square_trigger,
)

dataset = make_synthetic_dataset(num_classes=4, per_class=300, image_size=32, seed=1)
augmentation = AugmentationConfig(crop_scale_range=(0.6, 1.0), flip_probability=0.5,
                                  color_jitter_strength=0.2, blur_probability=0.0)

print("pre-training the clean encoder ...")
config = SimCLRConfig(temperature=0.5, batch_size=64, epochs=40,
                      learning_rate=1e-3, seed=0, feature_dim=64, latent_dim=32)
clean, _head, _ = pretrain_simclr(ShadowDataset(dataset.images[:800]), config, augmentation)

# Attack ingredients: a white square trigger, one reference image of the
# target class (collected outside any training split), and an unlabeled
# shadow dataset.
trigger = square_trigger(32, size=10, corner="bottom-right", color=(1, 1, 1))
target_class = 0
reference_pool = make_synthetic_dataset(4, 4, 32, seed=999)
references = ReferenceSet(reference_pool.images[reference_pool.labels == target_class][:1])
shadow = sample_shadow(ShadowDataset(dataset.images[:800]), 600, seed=5)
spec = AttackSpec(pairs=[TargetPair("demo-task", target_class, trigger, references)],
                  shadow=shadow)

print("fine-tuning the backdoor ...")
attack_cfg = AttackConfig(lambda1=1.0, lambda2=1.0, learning_rate=1e-3, batch_size=64,
                          max_epoch=30, optimizer="adam", seed=7)
backdoored, log = inject_backdoor(clean, spec, attack_cfg, augmentation=augmentation)

print("\nepoch    align   anchor  utility    total")
for e in (0, len(log) // 2, len(log) - 1):
    b = log[e]
    print(f"{e:5d} {b.align:+8.3f} {b.anchor:+8.3f} {b.utility:+8.3f} {b.total:+8.3f}")

# The mechanism: under the backdoored encoder, any triggered input lands
# next to the reference in feature space; clean inputs barely move.
probe = dataset.images[900:910]
ref_feat_bd = encode(backdoored, references.images)[0]
ref_feat_clean = encode(clean, references.images)[0]
sims_clean, sims_bd, drift = [], [], []
for x in probe:
    xt = embed_trigger(x, trigger)
    sims_clean.append(cosine_similarity(encode(clean, xt)[0], ref_feat_clean))
    sims_bd.append(cosine_similarity(encode(backdoored, xt)[0], ref_feat_bd))
    drift.append(cosine_similarity(encode(backdoored, x)[0], encode(clean, x)[0]))

print(f"\ncos(triggered input, reference) clean encoder:      {np.mean(sims_clean):+.3f}")
print(f"cos(triggered input, reference) backdoored encoder: {np.mean(sims_bd):+.3f}")
print(f"cos(clean input features, before vs after attack):  {np.mean(drift):+.3f}")
