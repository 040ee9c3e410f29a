# A short semi-supervised run on synthetic data, then evaluation.
#
# Small settings so it finishes in a minute or two on a laptop CPU.

import sys
import tempfile
from pathlib import Path

from dems.data import SynthParams, synth_generate
from dems.train import TrainConfig, evaluate, train, write_report

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="dems_demo_"))
synth_generate(40, 3, out / "data", SynthParams(size=64))

config = TrainConfig(max_iterations=300, input_size=32, base_channels=8, labeled_fraction=0.2,
                     val_every=100, seed=3)
result = train(config, out / "data", out / "run")
print(f"split: {len(result.split.labeled_ids)} labeled, {len(result.split.unlabeled_ids)} unlabeled, "
      f"{len(result.split.val_ids)} validation")
for row in result.val_history:
    print(f"iteration {row['iteration']:4d}: val DSC {row['dsc']:.3f}")

# %% the loss log keeps every term; lambda steps up every 150 iterations
first, last = result.loss_history[0], result.loss_history[-1]
print(f"lambda {first['lambda']:.4f} -> {last['lambda']:.4f}, total {first['total']:.3f} -> {last['total']:.3f}")

# %% evaluate the best checkpoint on the held-out split
ev = evaluate(result.out_dir / "best.ckpt", out / "data")
write_report(ev, out / "report")
print(ev.report.summary())
print("outputs in", out)
