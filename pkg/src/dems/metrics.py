"""Confusion-count segmentation metrics and Bland-Altman agreement."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

__all__ = [
    "ConfusionCounts",
    "confusion",
    "compute_metrics",
    "METRIC_NAMES",
    "MetricReport",
    "evaluate_masks",
    "AgreementStats",
    "bland_altman",
    "CANVAS_AREA",
]

METRIC_NAMES = ("dsc", "iou", "sen", "pre", "pa")
CANVAS_AREA = 224 * 224


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _binary(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != bool:
        if not np.isin(a, (0, 1)).all():
            raise ValueError(f"{name} must be binary")
        a = a.astype(bool)
    return a


def confusion(pred_bin, gt) -> ConfusionCounts:
    pred_bin = _binary(pred_bin, "prediction")
    gt = _binary(gt, "ground truth")
    if pred_bin.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred_bin.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred_bin & gt))
    fp = int(np.count_nonzero(pred_bin & ~gt))
    fn = int(np.count_nonzero(~pred_bin & gt))
    tn = int(pred_bin.size - tp - fp - fn)
    return ConfusionCounts(tp, tn, fp, fn)


def compute_metrics(counts: ConfusionCounts) -> dict[str, float]:
    """DSC, IoU, SEN, PRE and PA from confusion counts.

    A 0/0 ratio scores 1 when prediction and ground truth are both empty and
    0 otherwise (e.g. SEN on an empty mask with spurious foreground).
    """
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    both_empty = tp + fp + fn == 0

    def _ratio(num: int, den: int) -> float:
        if den == 0:
            return 1.0 if both_empty else 0.0
        return num / den

    return {
        "dsc": _ratio(2 * tp, 2 * tp + fp + fn),
        "iou": _ratio(tp, tp + fp + fn),
        "sen": _ratio(tp, tp + fn),
        "pre": _ratio(tp, tp + fp),
        "pa": _ratio(tp + tn, counts.total),
    }


@dataclass
class MetricReport:
    """Per-image mean and population sd of each metric."""

    mean: dict[str, float]
    sd: dict[str, float]
    per_image: list[dict] = field(default_factory=list)

    def __getattr__(self, name):
        if name in METRIC_NAMES:
            return self.mean[name]
        raise AttributeError(name)

    def summary(self) -> str:
        lines = [f"images: {len(self.per_image)}"]
        for k in METRIC_NAMES:
            lines.append(f"{k.upper():>4}: {100 * self.mean[k]:.2f} ± {100 * self.sd[k]:.2f} %")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"n_images": len(self.per_image), "mean": self.mean, "sd": self.sd}


def evaluate_masks(pairs, identifiers=None) -> MetricReport:
    """Metrics over ``(pred_bin, gt)`` pairs, averaged per image."""
    records = []
    for i, (pred, gt) in enumerate(pairs):
        counts = confusion(pred, gt)
        rec = {"identifier": identifiers[i] if identifiers is not None else str(i), **asdict(counts)}
        rec.update(compute_metrics(counts))
        records.append(rec)
    if not records:
        raise ValueError("no images to evaluate")
    mean = {k: float(np.mean([r[k] for r in records])) for k in METRIC_NAMES}
    sd = {k: float(np.std([r[k] for r in records])) for k in METRIC_NAMES}
    return MetricReport(mean, sd, records)


@dataclass
class AgreementStats:
    """Bland-Altman summary; every quantity is in percent of the canvas area."""

    mean_diff: float
    sd_diff: float
    loa_low: float
    loa_high: float
    points: list[tuple[float, float]]

    def summary(self) -> str:
        return (f"mean diff {self.mean_diff:.2f}%  sd {self.sd_diff:.2f}%  "
                f"LOA [{self.loa_low:.2f}%, {self.loa_high:.2f}%]  n={len(self.points)}")


def bland_altman(pairs, canvas_area: int = CANVAS_AREA) -> AgreementStats:
    """Agreement between predicted and reference foreground areas.

    Each pair contributes the point (mean of the two area ratios, pred - gt),
    with areas scaled by ``canvas_area``. SD is the population SD and the
    limits of agreement are mean +- 1.96 SD.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("bland_altman needs at least one pair")
    pred_r = np.array([np.count_nonzero(p) for p, _ in pairs], dtype=np.float64) / canvas_area * 100
    gt_r = np.array([np.count_nonzero(g) for _, g in pairs], dtype=np.float64) / canvas_area * 100
    means = (pred_r + gt_r) / 2
    diffs = pred_r - gt_r
    mu = float(diffs.mean())
    sd = float(diffs.std())
    return AgreementStats(mu, sd, mu - 1.96 * sd, mu + 1.96 * sd,
                          [(float(m), float(d)) for m, d in zip(means, diffs)])
