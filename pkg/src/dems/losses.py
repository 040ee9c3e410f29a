"""Fusion, sensitivity and unsupervised losses with Gaussian warm-up.

All per-map losses take probability tensors of matching shape. A leading
batch dimension is allowed; the loss is then computed per sample (over the
trailing two axes) and averaged over samples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch

__all__ = [
    "EPS",
    "fusion_loss",
    "sensitivity_loss_hard",
    "sensitivity_loss_soft",
    "unsupervised_loss",
    "WarmupClock",
    "warmup",
    "LossBreakdown",
    "total_loss",
]

EPS = 1e-7


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _per_sample(x: torch.Tensor) -> torch.Tensor:
    """Flatten to (samples, pixels) treating the last two axes as the image."""
    return x.reshape(-1, x.shape[-2] * x.shape[-1])


def fusion_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """0.5 * BCE + soft Dice loss (no smoothing term)."""
    _check_shapes(pred, gt)
    if not torch.all((gt == 0) | (gt == 1)):
        raise ValueError("ground truth must be binary")
    p = _per_sample(pred.clamp(EPS, 1 - EPS))
    y = _per_sample(gt.to(p.dtype))
    bce = -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean(dim=1)
    dice = 1 - 2 * (p * y).sum(dim=1) / (p.sum(dim=1) + y.sum(dim=1))
    return (0.5 * bce + dice).mean()


def sensitivity_loss_hard(pred_m: torch.Tensor, pred_a: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Fraction of pixels whose binarized predictions disagree (XOR area)."""
    _check_shapes(pred_m, pred_a)
    xor = (pred_m > threshold) ^ (pred_a > threshold)
    return _per_sample(xor.to(torch.float64)).mean(dim=1).mean()


def sensitivity_loss_soft(pred_m: torch.Tensor, pred_a: torch.Tensor) -> torch.Tensor:
    """Differentiable XOR: p + q - 2pq, exact on binary inputs."""
    _check_shapes(pred_m, pred_a)
    soft = pred_m + pred_a - 2 * pred_m * pred_a
    return _per_sample(soft).mean(dim=1).mean()


def unsupervised_loss(pred_m: torch.Tensor, pred_a: torch.Tensor) -> torch.Tensor:
    """Pixel-mean squared difference."""
    _check_shapes(pred_m, pred_a)
    return _per_sample((pred_m - pred_a) ** 2).mean(dim=1).mean()


@dataclass(frozen=True)
class WarmupClock:
    t: int
    t_max: int

    def __post_init__(self):
        if self.t < 0 or self.t_max < 0:
            raise ValueError("warm-up clock values must be nonnegative")
        # t_max == 0 means no ramp at all, so any t is accepted
        if self.t_max and self.t > self.t_max:
            raise ValueError(f"t={self.t} exceeds t_max={self.t_max}")


def warmup(t: int | WarmupClock, t_max: int | None = None) -> float:
    """Gaussian ramp exp(-5 (1 - t/t_max)^2); 1 when t_max == 0."""
    clock = t if isinstance(t, WarmupClock) else WarmupClock(t, t_max)
    if clock.t_max == 0:
        return 1.0
    return math.exp(-5.0 * (1.0 - clock.t / clock.t_max) ** 2)


@dataclass
class LossBreakdown:
    fusion: float
    sensitivity_soft: float
    sensitivity_hard: float
    unsupervised: float
    lam: float
    total: float
    # differentiable total, kept off the logged record
    tensor: torch.Tensor | None = None

    def record(self) -> dict:
        d = asdict(self)
        d.pop("tensor")
        return d


def _as_maps(out) -> list[torch.Tensor]:
    return out.all() if hasattr(out, "all") else list(out)


def total_loss(labeled, unlabeled, clock: WarmupClock | float, use_sensitivity: bool = True) -> LossBreakdown:
    """Combine the three terms: fusion + lambda * (sensitivity + unsupervised).

    ``labeled`` is a list of ``(outputs, gt)``; ``unlabeled`` a list of
    outputs. ``outputs`` is a :class:`~dems.net.DecoderOutputs` or a sequence
    ``[main, aux1, aux2, aux3]``; each map may carry a batch axis. A group with
    no samples contributes zero. ``clock`` may also be a precomputed lambda.
    """
    labeled = list(labeled)
    unlabeled = list(unlabeled)
    if not labeled and not unlabeled:
        raise ValueError("need at least one labeled or unlabeled sample")
    lam = clock if isinstance(clock, (int, float)) and not isinstance(clock, bool) else warmup(clock)

    zero = None
    fus, sen_soft, sen_hard, uns = [], [], [], []
    for out, gt in labeled:
        if gt is None:
            raise ValueError("labeled sample without ground truth")
        maps = _as_maps(out)
        zero = maps[0].new_zeros(())
        fus.extend(fusion_loss(m, gt) for m in maps)
        for a in maps[1:]:
            sen_soft.append(sensitivity_loss_soft(maps[0], a))
            sen_hard.append(sensitivity_loss_hard(maps[0].detach(), a.detach()))
    for out in unlabeled:
        maps = _as_maps(out)
        zero = maps[0].new_zeros(())
        uns.extend(unsupervised_loss(maps[0], a) for a in maps[1:])

    def mean(xs):
        return torch.stack(xs).mean() if xs else zero

    l_f = mean(fus)
    l_s = mean(sen_soft) if use_sensitivity else zero
    l_u = mean(uns)
    total = l_f + lam * (l_s + l_u)
    f, s, u = (float(x.detach()) for x in (l_f, l_s, l_u))
    return LossBreakdown(
        fusion=f,
        sensitivity_soft=s,
        sensitivity_hard=float(torch.stack(sen_hard).mean()) if sen_hard else 0.0,
        unsupervised=u,
        lam=float(lam),
        total=f + float(lam) * (s + u),
        tensor=total,
    )
