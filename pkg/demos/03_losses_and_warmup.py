# The training objective on tiny tensors.
#
# Labeled images pay a fusion loss (BCE + Dice) on every decoder plus a
# sensitivity term for main/aux disagreement. Unlabeled images pay an MSE
# consistency term. The consistency weight ramps up from exp(-5) to 1.

import torch

from dems.losses import (
    fusion_loss,
    sensitivity_loss_hard,
    sensitivity_loss_soft,
    total_loss,
    unsupervised_loss,
    warmup,
)

gt = torch.tensor([[[[1.0, 0.0], [0.0, 0.0]]]])
half = torch.full_like(gt, 0.5)
print(f"fusion loss of a 0.5 map vs one foreground pixel: {fusion_loss(half, gt).item():.5f}")

p = torch.tensor([[[[0.9, 0.2], [0.6, 0.1]]]])
q = torch.tensor([[[[0.8, 0.7], [0.4, 0.1]]]])
print(f"hard XOR {sensitivity_loss_hard(p, q).item():.3f}  "
      f"soft XOR {sensitivity_loss_soft(p, q).item():.3f}  "
      f"MSE {unsupervised_loss(p, q).item():.4f}")

# %% warm-up: 2000 iterations with the clock ticking every 150
t_max = 2000 // 150
for t in range(0, t_max + 1, 3):
    print(f"t={t:2d}  lambda={warmup(t, t_max):.4f}")

# %% composing the total
maps = [p, q, q.flip(-1), p.flip(-2)]
br = total_loss([(maps, gt)], [maps], warmup(4, t_max))
print({k: round(v, 4) for k, v in br.record().items()})
