# Online automatic augmentation, one plan at a time.
#
# A plan picks a sub-strategy (how many pixel-space and spatial transforms),
# draws that many transforms with replacement, shuffles them, and gives each
# a magnitude and an apply flag. Pixel transforms touch only the image;
# spatial transforms move image and mask together.

import sys
import tempfile
from pathlib import Path

import numpy as np

from dems.data import SynthParams, load_dataset, synth_generate
from dems.oaa import SUB_STRATEGIES, apply_plan, magnitude_cap, sample_plan

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="dems_demo_"))
synth_generate(4, 0, out / "data", SynthParams(size=96))
_, pairs = load_dataset(out / "data", (96, 96))
pair = pairs[0]
print(f"source {pair.identifier}: foreground {pair.mask.mean():.1%}")

# %% magnitude caps shrink linearly with the level
for level in (1, 3, 5):
    print(f"level {level}: rotate ±{magnitude_cap('rotate', level):.0f} deg, "
          f"brightness ±{magnitude_cap('brightness', level):.2f}, apply prob {0.2 * level:.1f}")

# %% a few plans at the strongest level
rng = np.random.default_rng(11)
for _ in range(4):
    plan = sample_plan(rng, 5)
    steps = ", ".join(f"{e.spec.name}({e.magnitude:+.2f})" for e in plan.transforms)
    print(f"sub-strategy {plan.sub_strategy_index} {plan.counts}: {steps}")
    aug = apply_plan(pair, plan, rng)
    print(f"    foreground after: {aug.mask.mean():.1%}, image range "
          f"[{aug.image.min():.2f}, {aug.image.max():.2f}]")

# %% sub-strategies are equally likely
counts = np.bincount([sample_plan(rng, 5).sub_strategy_index - 1 for _ in range(2000)], minlength=4)
for (n_pix, n_spa), c in zip(SUB_STRATEGIES, counts):
    print(f"  {n_pix} pixel + {n_spa} spatial: {c}")
