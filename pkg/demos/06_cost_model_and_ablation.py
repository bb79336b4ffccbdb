"""The analytic cost model and a miniature two-variant ablation sweep.

The parameter formula matches construct-and-count exactly; the FLOPs model
(mult-add = 2) reproduces the published per-forward numbers and the p^4
attention-cost reduction of pixel token compaction.
"""

import dataclasses

import numpy as np

from dualdit import analysis as A
from dualdit import data as D
from dualdit import trainer as TR
from dualdit.model import DualLevelModel, ModelConfig, PRESETS

print("published sizes, reconstructed:")
print(f"{'preset':>7} {'params':>12} {'GFLOPs@256':>11}")
for name, cfg in PRESETS.items():
    c = A.full_cost(cfg)
    print(f"{name:>7} {c.params_total:>12,} {c.flops_forward / 1e9:>11.1f}")

noattn = dataclasses.replace(PRESETS["XL"], variant="no_pixel_attention")
print(f"XL without pixel-pathway attention: {A.estimate_flops(noattn).flops_forward / 1e9:.1f} GFLOPs")

print("\nquadratic attention cost, raw pixels vs compacted tokens:")
for p in (2, 4, 8, 16):
    print(f"  p={p:>2}: ratio = {A.compaction_flops_ratio(p):,.0f} (= p^4)")

# analytic == constructed, spot check
cfg = ModelConfig(patch_depth=3, pixel_depth=2, patch_dim=32, pixel_dim=6, heads=4,
                  patch_size=4, num_classes=5, resolution=(16, 16), ptc_rate=2)
print(f"\nanalytic {A.count_params(cfg).params_total:,} == "
      f"constructed {DualLevelModel(cfg, seed=0).num_params():,}")

# miniature sweep: global vs pixel-wise conditioning on a spatial task
base = ModelConfig(patch_depth=2, pixel_depth=1, patch_dim=32, pixel_dim=4, heads=4,
                   patch_size=4, num_classes=3, resolution=(16, 16))
train = TR.TrainConfig(lr=1e-3, batch_size=32, total_steps=300, align_weight=0.0, seed=21)
dataset = D.ToyDatasetSpec(kind="gaussian_blob", num_classes=3, resolution=(16, 16),
                           samples_per_class=128, noise_std=0.1, seed=21)
rows = [A.AblationRow(name=v, model=dataclasses.replace(base, variant=v),
                      train=train, dataset=dataset)
        for v in ("A_global", "C_pixelwise")]
print("\nrunning the two-variant sweep (identical seeds and budgets)...")
csv_text, _ = A.run_ablation_sweep(rows)
print(csv_text)
