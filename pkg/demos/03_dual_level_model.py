"""Anatomy of the dual-level model and its variant lattice.

The pixel pathway runs one token per pixel but compacts each patch's p*p
tokens into k tokens before attention, so the attention sequence length is
k*(H/p)*(W/p) regardless of resolution. Pixel-wise modulation strictly
generalizes patch-wise, which strictly generalizes a global vector.
"""

import numpy as np

from dualdit import analysis as A
from dualdit.model import DualLevelModel, ModelConfig, PRESETS, toy_config

rng = np.random.default_rng(0)

# --- shape contract and compaction accounting -------------------------------

cfg = toy_config(resolution=(16, 16), patch_size=4, patch_dim=32, pixel_dim=4,
                 heads=4, num_classes=3)
model = DualLevelModel(cfg, seed=0)
x = rng.normal(size=(2, 3, 16, 16))
diag = {}
v = model.forward(x, np.array([0.4, 0.8]), np.array([0, 2]), diag=diag)
print(f"input {x.shape} -> velocity {tuple(v.shape)} (shape preserving)")
print(f"pixels per image: {16 * 16}; attention tokens in the pixel pathway: "
      f"{diag['pixel_attention_tokens']} (p^2-fold compaction)")

for k in (1, 2, 4):
    m = DualLevelModel(toy_config(resolution=(16, 16), patch_size=4, patch_dim=32,
                                  pixel_dim=4, heads=4, num_classes=3, ptc_rate=k), seed=0)
    d = {}
    m.forward(x, np.array([0.4, 0.8]), np.array([0, 2]), diag=d)
    print(f"  compaction rate {k}x -> sequence length {d['pixel_attention_tokens']}")

# --- identity at init --------------------------------------------------------

fresh = DualLevelModel(cfg, seed=1)
v0 = fresh.forward(x, np.array([0.5, 0.5]), np.array([0, 1]))
print("fresh model velocity is exactly zero:", bool(np.all(v0.data == 0.0)))

# --- the variant lattice: C with duplicated rows == B ------------------------

m_b = DualLevelModel(toy_config(variant="B_patchwise"), seed=3, dtype=np.float64)
m_c = DualLevelModel(toy_config(variant="C_pixelwise"), seed=3, dtype=np.float64)
for t in m_b.params.values():
    t.data[...] = rng.normal(scale=0.2, size=t.shape)
for name, t in m_c.params.items():
    if t.shape == m_b.params[name].shape:
        t.data[...] = m_b.params[name].data
p2 = m_c.config.pixels_per_patch
for i in range(m_c.config.pixel_depth):
    m_c.params[f"pit.{i}.mod.w"].data[...] = np.tile(m_b.params[f"pit.{i}.mod.w"].data, (1, p2))
    m_c.params[f"pit.{i}.mod.b"].data[...] = np.tile(m_b.params[f"pit.{i}.mod.b"].data, p2)
xs = rng.normal(size=(1, 3, 8, 8))
vb = m_b.forward(xs, np.array([0.3]), np.array([1]))
vc = m_c.forward(xs, np.array([0.3]), np.array([1]))
print(f"pixel-wise head with duplicated rows vs patch-wise: max diff = "
      f"{np.abs(vb.data - vc.data).max():.2e}")

# --- cost model across the published sizes -----------------------------------

print("\npreset  params(M)  GFLOPs@256  pixel-attn tokens")
for name, preset in PRESETS.items():
    c = A.full_cost(preset)
    print(f"  {name:3s} {c.params_total / 1e6:10.1f} {c.flops_forward / 1e9:11.1f} "
          f"{c.attention_token_count:14d}")
