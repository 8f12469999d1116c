"""Run the two detectability screens against hand-built models.

First, trigger reverse engineering: for a classifier with a planted
single-pixel shortcut, the optimization recovers a mask concentrated on
that pixel, and the per-class mask norms feed a median-absolute-deviation
anomaly index (values above 2 conventionally flag a backdoor).

Second, the meta-classifier screen: optimized query inputs plus a binary
head separate two shadow-model populations by their concatenated outputs.

Run:  python3 demos/04_defense_screening.py         (~10 seconds)
"""

import numpy as np
import torch
import torch.nn as nn

from sslbackdoor import anomaly_index, mntd_score, mntd_train, reverse_engineer_trigger


class PlantedShortcut(nn.Module):
    """2x2-pixel toy classifier: pixel (0,0) near 1 forces class 1."""

    def forward(self, x):
        s = x[:, :, 0, 0].mean(dim=1)
        return torch.stack([torch.zeros_like(s), 20.0 * s - 10.0], dim=1)


clean_images = np.random.default_rng(0).random((64, 2, 2, 3)) * 0.4
recovered = reverse_engineer_trigger(
    PlantedShortcut(), None, target_class=1, clean_data=clean_images,
    steps=300, sparsity_weight=0.01, seed=0,
)
print("recovered mask (planted shortcut at the top-left pixel):")
print(np.round(recovered.mask, 3))
print(f"mask L1 norm: {recovered.l1_norm:.3f}\n")

# A backdoored class shows up as an abnormally small reversed-trigger norm.
norms = [10.0, 12.0, 11.0, 13.0, 2.0]
index = anomaly_index(norms)
print(f"per-class trigger norms {norms} -> anomaly index {index.value:.3f} "
      f"({'flagged' if index.value > 2 else 'not flagged'})\n")


class ConstantOutput(nn.Module):
    def __init__(self, vec):
        super().__init__()
        self.register_buffer("vec", torch.tensor(vec, dtype=torch.float32))

    def forward(self, x):
        return self.vec.expand(len(x), -1)


# Two shadow populations with disjoint output ranges: the meta-classifier
# separates them perfectly after jointly optimizing its query inputs.
rng = np.random.default_rng(1)
population_clean = [ConstantOutput(rng.uniform(-2, -1, size=3)) for _ in range(6)]
population_backdoored = [ConstantOutput(rng.uniform(1, 2, size=3)) for _ in range(6)]
meta = mntd_train(population_clean, population_backdoored,
                  query_count=4, epochs=200, seed=0, image_size=8)
scores_clean = [mntd_score(meta, h) for h in population_clean]
scores_bd = [mntd_score(meta, h) for h in population_backdoored]
print(f"meta-classifier scores, clean population:      {np.round(scores_clean, 3)}")
print(f"meta-classifier scores, backdoored population: {np.round(scores_bd, 3)}")
