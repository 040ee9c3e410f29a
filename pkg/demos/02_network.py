# One encoder, four decoders.
#
# In training mode the model returns the main map plus three auxiliary maps.
# Auxiliary decoder k sees features that went through k residual robustness
# blocks, each adding random perturbations. In eval mode only the main
# decoder runs.

import torch

from dems.net import DEMS, count_parameters, describe

torch.manual_seed(0)
model = DEMS(base_channels=8)
print(describe(model, 64))

x = torch.rand(2, 1, 64, 64)

# %% training forward: four maps that disagree a little
model.train()
out = model(x, torch.Generator().manual_seed(1))
for name, m in zip(["main", "aux1", "aux2", "aux3"], out.all()):
    print(f"{name}: mean {m.mean():.4f}")
diffs = [(out.main - a).abs().mean().item() for a in out.aux]
print("mean |main - aux_k|:", ", ".join(f"{d:.4f}" for d in diffs))

# %% inference forward: deterministic, main decoder only
model.eval()
with torch.no_grad():
    a, b = model(x), model(x)
print("aux maps at inference:", a.aux, "| repeat identical:", torch.equal(a.main, b.main))
print(f"decoder parameters: {count_parameters(model.main_decoder):,} each")
