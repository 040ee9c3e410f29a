"""Optional matplotlib renderings of logged CSVs and agreement stats."""
from __future__ import annotations

import csv
from pathlib import Path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_losses(csv_path, out_path) -> None:
    plt = _pyplot()
    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    it = [int(r["iteration"]) for r in rows]
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(10, 3.5))
    for key in ("total", "fusion", "sensitivity_soft", "unsupervised"):
        ax.plot(it, [float(r[key]) for r in rows], label=key, lw=0.8)
    ax.set_xlabel("iteration")
    ax.legend()
    ax2.plot(it, [float(r["lambda"]) for r in rows], label="lambda")
    ax2.plot(it, [float(r["lr"]) / max(float(rows[0]["lr"]), 1e-12) for r in rows], label="lr / base")
    ax2.set_xlabel("iteration")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(Path(out_path), dpi=120)
    plt.close(fig)


def plot_bland_altman(stats, out_path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    xs = [p[0] for p in stats.points]
    ys = [p[1] for p in stats.points]
    ax.scatter(xs, ys, s=10, alpha=0.7)
    ax.axhline(stats.mean_diff, color="k", lw=1, label=f"mean {stats.mean_diff:.2f}%")
    for y in (stats.loa_low, stats.loa_high):
        ax.axhline(y, color="r", ls="--", lw=1)
    ax.set_xlabel("mean of predicted and reference area (%)")
    ax.set_ylabel("predicted - reference area (%)")
    ax.set_title(f"LOA [{stats.loa_low:.2f}%, {stats.loa_high:.2f}%]")
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(Path(out_path), dpi=120)
    plt.close(fig)
