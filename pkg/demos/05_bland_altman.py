# Area agreement between predicted and reference masks.
#
# Areas are expressed as a percentage of the canvas. The plot's x axis is the
# mean of the two percentages and its y axis their difference; limits of
# agreement are mean ± 1.96 SD.

import numpy as np

from dems.metrics import bland_altman

rng = np.random.default_rng(5)
size = 224
pairs = []
yy, xx = np.mgrid[:size, :size]
for _ in range(20):
    cy, cx = rng.uniform(60, 160, 2)
    r = rng.uniform(15, 45)
    gt = (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
    # a predictor that slightly over-segments, with some noise in the radius
    r_pred = r * rng.normal(1.04, 0.05)
    pred = (yy - cy) ** 2 + (xx - cx) ** 2 <= r_pred**2
    pairs.append((pred, gt))

stats = bland_altman(pairs)
print(stats.summary())
inside = sum(stats.loa_low <= d <= stats.loa_high for _, d in stats.points)
print(f"{inside}/{len(stats.points)} points inside the limits of agreement")
