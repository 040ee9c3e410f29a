"""Online automatic augmenter (OAA).

Each call to :func:`sample_plan` picks one of four sub-strategies uniformly,
draws pixel- and spatial-space transforms with replacement, shuffles them and
resolves a magnitude and an apply flag for every transform. :func:`apply_plan`
runs the plan on an image/mask pair; spatial transforms hit both arrays with
the same parameters (bilinear for the image, nearest for the mask, zero fill).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

__all__ = [
    "TransformSpec",
    "PlanEntry",
    "AugmentationPlan",
    "SamplePair",
    "TRANSFORMS",
    "PIXEL_SPACE",
    "SPATIAL_SPACE",
    "SUB_STRATEGIES",
    "magnitude_cap",
    "apply_probability",
    "sample_plan",
    "apply_plan",
    "apply_transform",
    "affine_params",
    "fallback_plan",
    "OAA",
]

MAX_LEVEL = 5

# (pixel count, spatial count) per sub-strategy
SUB_STRATEGIES: tuple[tuple[int, int], ...] = ((1, 2), (0, 3), (1, 1), (0, 2))


@dataclass(frozen=True)
class TransformSpec:
    name: str
    space: str  # "pixel" or "spatial"
    full_cap: float | None  # None for magnitude-free transforms
    one_sided: bool = False

    @property
    def has_magnitude(self) -> bool:
        return self.full_cap is not None

    def magnitude_cap(self, level: int) -> float | None:
        return magnitude_cap(self, level)


PIXEL_SPACE = (
    TransformSpec("brightness", "pixel", 0.3),
    TransformSpec("contrast", "pixel", 0.3),
    TransformSpec("posterize", "pixel", 4.0, one_sided=True),  # bits removed
    TransformSpec("sharpness", "pixel", 0.6),
    TransformSpec("gaussian_blur", "pixel", 1.5, one_sided=True),
    TransformSpec("gaussian_noise", "pixel", 0.05, one_sided=True),
)
SPATIAL_SPACE = (
    TransformSpec("rotate", "spatial", 30.0),
    TransformSpec("horizontal_flip", "spatial", None),
    TransformSpec("vertical_flip", "spatial", None),
    TransformSpec("scale", "spatial", 0.2),
    TransformSpec("translate_x", "spatial", 0.1),
    TransformSpec("translate_y", "spatial", 0.1),
    TransformSpec("shear_x", "spatial", 15.0),
    TransformSpec("shear_y", "spatial", 15.0),
)
TRANSFORMS: dict[str, TransformSpec] = {t.name: t for t in PIXEL_SPACE + SPATIAL_SPACE}


@dataclass(frozen=True)
class PlanEntry:
    spec: TransformSpec
    magnitude: float = 0.0
    apply: bool = True

    def to_dict(self) -> dict:
        return {"name": self.spec.name, "magnitude": self.magnitude, "apply": self.apply}


@dataclass(frozen=True)
class AugmentationPlan:
    transforms: tuple[PlanEntry, ...]
    sub_strategy_index: int  # 1..4
    level: int

    @property
    def counts(self) -> tuple[int, int]:
        n_pix = sum(e.spec.space == "pixel" for e in self.transforms)
        return n_pix, len(self.transforms) - n_pix

    def validate(self) -> None:
        if not 1 <= self.level <= MAX_LEVEL:
            raise ValueError(f"level must be in 1..{MAX_LEVEL}, got {self.level}")
        if not 1 <= self.sub_strategy_index <= len(SUB_STRATEGIES):
            raise ValueError(f"bad sub-strategy index {self.sub_strategy_index}")
        if self.counts != SUB_STRATEGIES[self.sub_strategy_index - 1]:
            raise ValueError(f"counts {self.counts} do not match sub-strategy {self.sub_strategy_index}")
        for e in self.transforms:
            cap = magnitude_cap(e.spec, self.level)
            if cap is not None and abs(e.magnitude) > cap + 1e-12:
                raise ValueError(f"{e.spec.name} magnitude {e.magnitude} exceeds cap {cap}")

    def to_dict(self) -> dict:
        return {
            "sub_strategy": self.sub_strategy_index,
            "level": self.level,
            "transforms": [e.to_dict() for e in self.transforms],
        }


@dataclass
class SamplePair:
    image: np.ndarray
    mask: np.ndarray | None = None
    identifier: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mask is not None and self.mask.shape != self.image.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} differ in shape")


def _check_level(level: int) -> None:
    if isinstance(level, bool) or int(level) != level or not 1 <= level <= MAX_LEVEL:
        raise ValueError(f"augmentation level must be an integer in 1..{MAX_LEVEL}, got {level!r}")


def magnitude_cap(spec: TransformSpec | str, level: int) -> float | None:
    """Maximum magnitude at ``level``; ``None`` for magnitude-free transforms."""
    if isinstance(spec, str):
        try:
            spec = TRANSFORMS[spec]
        except KeyError:
            raise KeyError(f"unknown transform {spec!r}") from None
    _check_level(level)
    if spec.full_cap is None:
        return None
    return spec.full_cap * level / MAX_LEVEL


def apply_probability(level: int) -> float:
    _check_level(level)
    return 0.2 * level


def sample_plan(rng: np.random.Generator, level: int = 5) -> AugmentationPlan:
    _check_level(level)
    idx = int(rng.integers(len(SUB_STRATEGIES)))
    n_pix, n_spa = SUB_STRATEGIES[idx]
    chosen = [PIXEL_SPACE[i] for i in rng.integers(len(PIXEL_SPACE), size=n_pix)]
    chosen += [SPATIAL_SPACE[i] for i in rng.integers(len(SPATIAL_SPACE), size=n_spa)]
    order = rng.permutation(len(chosen))
    p_apply = apply_probability(level)
    entries = []
    for i in order:
        spec = chosen[i]
        cap = magnitude_cap(spec, level)
        if cap is None:
            mag = 0.0
        elif spec.one_sided:
            mag = float(rng.uniform(0.0, cap))
        else:
            mag = float(rng.uniform(-cap, cap))
        entries.append(PlanEntry(spec, mag, bool(rng.random() < p_apply)))
    return AugmentationPlan(tuple(entries), idx + 1, level)


# -- spatial geometry -------------------------------------------------------

def affine_params(name: str, magnitude: float, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Forward map ``out = A @ (inp - c) + c + t`` in (row, col) coordinates.

    ``c`` is the canvas centre. Returns ``(A, t)``.
    """
    h, w = shape
    a = np.eye(2)
    t = np.zeros(2)
    if name == "rotate":
        th = np.deg2rad(magnitude)
        a = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    elif name == "scale":
        a = (1.0 + magnitude) * np.eye(2)
    elif name == "translate_x":
        t = np.array([0.0, magnitude * w])
    elif name == "translate_y":
        t = np.array([magnitude * h, 0.0])
    elif name == "shear_x":
        a = np.array([[1.0, 0.0], [np.tan(np.deg2rad(magnitude)), 1.0]])
    elif name == "shear_y":
        a = np.array([[1.0, np.tan(np.deg2rad(magnitude))], [0.0, 1.0]])
    else:
        raise KeyError(f"{name!r} is not an affine transform")
    return a, t


def _warp(arr: np.ndarray, a: np.ndarray, t: np.ndarray, order: int) -> np.ndarray:
    h, w = arr.shape
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    inv = np.linalg.inv(a)
    # input = inv @ (out - c - t) + c
    offset = c - inv @ (c + t)
    out = ndimage.affine_transform(arr, inv, offset=offset, order=order,
                                   mode="grid-constant", cval=0.0, prefilter=False)
    return out


def _spatial(image, mask, name, magnitude):
    if name == "horizontal_flip":
        return image[:, ::-1].copy(), None if mask is None else mask[:, ::-1].copy()
    if name == "vertical_flip":
        return image[::-1, :].copy(), None if mask is None else mask[::-1, :].copy()
    a, t = affine_params(name, magnitude, image.shape)
    img = np.clip(_warp(image.astype(np.float64), a, t, order=1), 0.0, 1.0)
    msk = None
    if mask is not None:
        msk = (_warp(mask.astype(np.float64), a, t, order=0) > 0.5).astype(mask.dtype)
    return img, msk


# -- pixel transforms -------------------------------------------------------

_SMOOTH = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0


def _pixel(image: np.ndarray, name: str, m: float, rng: np.random.Generator) -> np.ndarray:
    if name == "brightness":
        out = image + m
    elif name == "contrast":
        mean = image.mean()
        out = mean + (image - mean) * (1.0 + m)
    elif name == "posterize":
        drop = int(round(m))
        q = np.floor(image * 255.0 + 1e-9).astype(np.uint8)
        q = (q >> drop) << drop
        out = q.astype(np.float64) / 255.0
    elif name == "sharpness":
        blurred = ndimage.convolve(image, _SMOOTH, mode="nearest")
        out = blurred + (1.0 + m) * (image - blurred)
    elif name == "gaussian_blur":
        out = ndimage.gaussian_filter(image, sigma=m) if m > 0 else image.copy()
    elif name == "gaussian_noise":
        out = image + rng.normal(0.0, m, size=image.shape) if m > 0 else image.copy()
    else:
        raise KeyError(f"unknown pixel transform {name!r}")
    return np.clip(out, 0.0, 1.0)


def apply_transform(image, mask, entry: PlanEntry, rng: np.random.Generator):
    if not entry.apply:
        return image, mask
    if entry.spec.space == "pixel":
        return _pixel(image, entry.spec.name, entry.magnitude, rng), mask
    return _spatial(image, mask, entry.spec.name, entry.magnitude)


def apply_plan(pair: SamplePair, plan: AugmentationPlan, rng: np.random.Generator | None = None) -> SamplePair:
    if not any(e.apply for e in plan.transforms):
        return SamplePair(pair.image, pair.mask, pair.identifier, dict(pair.meta))
    if rng is None:
        rng = np.random.default_rng(0)
    image = np.asarray(pair.image, dtype=np.float64)
    mask = pair.mask
    for entry in plan.transforms:
        image, mask = apply_transform(image, mask, entry, rng)
    return SamplePair(image, mask, pair.identifier, dict(pair.meta))


def fallback_plan(rng: np.random.Generator) -> AugmentationPlan:
    """Random flip + random rotation used when OAA is switched off.

    Expressed as a regular plan (sub-strategy 4: two spatial transforms).
    """
    flip = SPATIAL_SPACE[1] if rng.random() < 0.5 else SPATIAL_SPACE[2]
    rot = TRANSFORMS["rotate"]
    entries = (
        PlanEntry(flip, 0.0, bool(rng.random() < 0.5)),
        PlanEntry(rot, float(rng.uniform(-rot.full_cap, rot.full_cap)), bool(rng.random() < 0.5)),
    )
    return AugmentationPlan(entries, 4, MAX_LEVEL)


class OAA:
    """Callable augmenter: ``OAA(level)(pair, rng)`` samples and applies a plan."""

    def __init__(self, level: int = 5):
        _check_level(level)
        self.level = level

    def __call__(self, pair: SamplePair, rng: np.random.Generator) -> SamplePair:
        plan = sample_plan(rng, self.level)
        out = apply_plan(pair, plan, rng)
        out.meta["plan"] = plan
        return out

    def __repr__(self):
        return f"OAA(level={self.level})"
