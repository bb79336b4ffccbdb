"""Train a small model on solid colors with the rectified-flow objective.

Writes a loss curve (SVG) and prints where the timestep distribution puts
its mass. A few hundred steps are enough to see learning on this task;
the acceptance suite runs the full 2000-step recipe.
"""

import numpy as np

from dualdit import analysis as A
from dualdit import data as D
from dualdit import flow as F
from dualdit import trainer as TR
from dualdit.model import DualLevelModel, ModelConfig

# logit-normal timesteps concentrate where the velocity target is hardest
rng = np.random.default_rng(0)
t = F.logit_normal_sampler()(rng, 50_000)
hist, edges = np.histogram(t, bins=10, range=(0, 1))
print("logit-normal timestep mass per decile:")
print("  " + " ".join(f"{h / len(t):.2f}" for h in hist))

mcfg = ModelConfig(patch_depth=2, pixel_depth=1, patch_dim=32, pixel_dim=4, heads=4,
                   patch_size=4, num_classes=3, resolution=(16, 16))
dataset = D.make_dataset(D.ToyDatasetSpec(kind="solid_color", num_classes=3,
                                          resolution=(16, 16), samples_per_class=128,
                                          noise_std=0.1, seed=0))
tcfg = TR.TrainConfig(lr=1e-3, batch_size=32, total_steps=300, align_weight=0.5, seed=0)
model = DualLevelModel(mcfg, seed=0)
print(f"\ntraining {model.num_params():,} parameters for {tcfg.total_steps} steps "
      f"(velocity loss + 0.5 * alignment loss)")
state = TR.train(model, dataset, tcfg)

losses = [m["loss"] for m in state.metrics]
print(f"loss: first 20 steps {np.mean(losses[:20]):.3f} -> last 20 steps {np.mean(losses[-20:]):.3f}")
print(f"alignment term: {state.metrics[0]['loss_repa']:.3f} -> {state.metrics[-1]['loss_repa']:.3f}")

svg = A.emit_line_chart_svg(
    {"total": [(m["step"], m["loss"]) for m in state.metrics],
     "velocity": [(m["step"], m["loss_diff"]) for m in state.metrics]},
    title="toy training run", xlabel="step", ylabel="loss")
with open("loss_curve.svg", "w") as f:
    f.write(svg)
print("wrote loss_curve.svg")
