"""DEMS network: U-Net style encoder, chained RRE blocks and four decoders.

The main decoder sees the raw encoder pyramid. Auxiliary decoder ``k`` sees
the skips and bottleneck produced by the ``k``-th RRE block, whose circle
(bottleneck) input is the circle output of the previous block. Auxiliary
decoders only run in training mode.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "ConvBlock",
    "Encoder",
    "FeaturePyramid",
    "FPI",
    "ResidualUnit",
    "RREBlock",
    "RREOutputs",
    "Decoder",
    "DecoderOutputs",
    "DEMS",
    "count_parameters",
    "describe",
]

NOISE_RANGE = 0.3
DROP_THRESHOLD_RANGE = (0.6, 0.9)
CHANNEL_DROP_P = 0.5


@dataclass
class FeaturePyramid:
    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor
    f5: torch.Tensor

    @property
    def skips(self) -> list[torch.Tensor]:
        return [self.f1, self.f2, self.f3, self.f4]


@dataclass
class RREOutputs:
    skips: list[torch.Tensor]
    bottleneck: torch.Tensor


@dataclass
class DecoderOutputs:
    """Foreground probability maps, each shaped (B, 1, H, W)."""

    main: torch.Tensor
    aux: list[torch.Tensor] = field(default_factory=list)

    def all(self) -> list[torch.Tensor]:
        return [self.main, *self.aux]


class ConvBlock(nn.Sequential):
    """Two repetitions of 3x3 conv -> BN -> GELU."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.GELU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.GELU(),
        )


class Encoder(nn.Module):
    def __init__(self, in_ch: int = 1, base: int = 16):
        super().__init__()
        widths = [base * 2**i for i in range(5)]
        self.widths = widths
        blocks = []
        prev = in_ch
        for w in widths:
            blocks.append(ConvBlock(prev, w))
            prev = w
        self.blocks = nn.ModuleList(blocks)
        self.pool = nn.MaxPool2d(2, 2)

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        h, w = x.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"spatial size {h}x{w} is not divisible by 16")
        feats = []
        for i, block in enumerate(self.blocks):
            if i:
                x = self.pool(x)
            x = block(x)
            feats.append(x)
        return FeaturePyramid(*feats)


class FPI(nn.Module):
    """Feature perturbation injection.

    In training mode one of three perturbations is drawn uniformly per call:
    multiplicative uniform feature noise, attention-thresholded feature
    dropout, or channel dropout. Identity in eval mode.
    """

    KINDS = ("noise", "feature_dropout", "dropout")

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None,
                kind: str | None = None) -> torch.Tensor:
        if not self.training:
            return x
        if kind is None:
            idx = int(torch.randint(len(self.KINDS), (1,), generator=generator))
            kind = self.KINDS[idx]
        if kind == "noise":
            return feature_noise(x, generator)
        if kind == "feature_dropout":
            return feature_dropout(x, generator)
        if kind == "dropout":
            return channel_dropout(x, generator)
        raise ValueError(f"unknown perturbation {kind!r}")


def _uniform(shape, low, high, like, generator):
    u = torch.rand(shape, generator=generator, dtype=like.dtype)
    return (low + (high - low) * u).to(like.device)


def feature_noise(x: torch.Tensor, generator=None, u: torch.Tensor | None = None) -> torch.Tensor:
    if u is None:
        u = _uniform(x.shape, -NOISE_RANGE, NOISE_RANGE, x, generator)
    return x * (1 + u)


def feature_dropout(x: torch.Tensor, generator=None, gamma: torch.Tensor | None = None) -> torch.Tensor:
    # attention: channel mean per spatial position, one threshold per sample
    attention = x.mean(dim=1, keepdim=True)
    peak = attention.flatten(1).max(dim=1).values.view(-1, 1, 1, 1)
    if gamma is None:
        gamma = _uniform((x.shape[0], 1, 1, 1), *DROP_THRESHOLD_RANGE, x, generator)
    keep = (attention <= gamma * peak).to(x.dtype)
    return x * keep


def channel_dropout(x: torch.Tensor, generator=None) -> torch.Tensor:
    u = torch.rand((x.shape[0], x.shape[1], 1, 1), generator=generator, dtype=x.dtype).to(x.device)
    keep = (u >= CHANNEL_DROP_P).to(x.dtype)
    return x * keep / (1 - CHANNEL_DROP_P)


class ResidualUnit(nn.Module):
    """y = FPI(GELU(x + BN(PwConv(GELU(BN(DwConv(x)))))))."""

    def __init__(self, channels: int):
        super().__init__()
        self.branch = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, groups=channels, bias=False),
            nn.BatchNorm2d(channels),
            nn.GELU(),
            nn.Conv2d(channels, channels, 1, bias=False),
            nn.BatchNorm2d(channels),
        )
        self.act = nn.GELU()
        self.fpi = FPI()

    def forward(self, x: torch.Tensor, generator=None) -> torch.Tensor:
        return self.fpi(self.act(x + self.branch(x)), generator)


class RREBlock(nn.Module):
    """Residual robustness enhancement block.

    Rhombus path: one residual unit per skip (f1..f4). Circle path: one
    residual unit on the bottleneck-shaped input.
    """

    def __init__(self, widths: list[int]):
        super().__init__()
        self.rhombus = nn.ModuleList(ResidualUnit(w) for w in widths[:4])
        self.circle = ResidualUnit(widths[4])

    def forward(self, skips: list[torch.Tensor], circle_in: torch.Tensor,
                generator=None) -> RREOutputs:
        if len(skips) != len(self.rhombus):
            raise ValueError(f"expected {len(self.rhombus)} skips, got {len(skips)}")
        for unit, s in zip([*self.rhombus, self.circle], [*skips, circle_in]):
            expected = unit.branch[0].in_channels
            if s.dim() != 4 or s.shape[1] != expected:
                raise ValueError(f"expected {expected} channels, got shape {tuple(s.shape)}")
        out = [unit(s, generator) for unit, s in zip(self.rhombus, skips)]
        return RREOutputs(out, self.circle(circle_in, generator))


class UpBlock(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__(
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.GELU(),
        )


class Decoder(nn.Module):
    def __init__(self, widths: list[int], out_ch: int = 1):
        super().__init__()
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for i in range(4, 0, -1):
            self.ups.append(UpBlock(widths[i], widths[i - 1]))
            self.blocks.append(ConvBlock(2 * widths[i - 1], widths[i - 1]))
        self.head = nn.Conv2d(widths[0], out_ch, 1)

    def forward(self, bottleneck: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        x = bottleneck
        for up, block, skip in zip(self.ups, self.blocks, reversed(skips)):
            x = block(torch.cat([up(x), skip], dim=1))
        return torch.sigmoid(self.head(x))


class DEMS(nn.Module):
    """One encoder, one main decoder, three auxiliary decoders.

    ``use_rre=False`` bypasses the RRE blocks so the auxiliary decoders see
    the raw encoder features (ablation).
    """

    n_aux = 3

    def __init__(self, base_channels: int = 16, in_channels: int = 1, use_rre: bool = True):
        super().__init__()
        self.base_channels = base_channels
        self.use_rre = use_rre
        self.encoder = Encoder(in_channels, base_channels)
        widths = self.encoder.widths
        self.rre = nn.ModuleList(RREBlock(widths) for _ in range(self.n_aux))
        self.main_decoder = Decoder(widths)
        self.aux_decoders = nn.ModuleList(Decoder(widths) for _ in range(self.n_aux))

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None) -> DecoderOutputs:
        pyr = self.encoder(x)
        main = self.main_decoder(pyr.f5, pyr.skips)
        if not self.training:
            return DecoderOutputs(main)
        aux = []
        circle = pyr.f5
        for block, decoder in zip(self.rre, self.aux_decoders):
            if self.use_rre:
                out = block(pyr.skips, circle, generator)
                circle = out.bottleneck
                aux.append(decoder(out.bottleneck, out.skips))
            else:
                aux.append(decoder(pyr.f5, pyr.skips))
        return DecoderOutputs(main, aux)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def describe(model: DEMS, input_size: int | None = None) -> str:
    w = model.encoder.widths
    lines = [
        f"DEMS(base_channels={model.base_channels}, use_rre={model.use_rre})",
        f"  encoder widths: {w}" + (f"  spatial: {[input_size // 2**i for i in range(5)]}" if input_size else ""),
        f"  encoder params:        {count_parameters(model.encoder):>10,}",
        f"  RRE blocks (x{len(model.rre)}) params: {count_parameters(model.rre):>10,}",
        f"  main decoder params:   {count_parameters(model.main_decoder):>10,}",
    ]
    for i, d in enumerate(model.aux_decoders, 1):
        lines.append(f"  aux decoder {i} params:  {count_parameters(d):>10,}")
    lines.append(f"  total params:          {count_parameters(model):>10,}")
    lines.append(f"  inference params:      {count_parameters(model.encoder) + count_parameters(model.main_decoder):>10,}")
    return "\n".join(lines)
