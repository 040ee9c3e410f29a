"""Dataset layout, loading, seeded splits and a synthetic ultrasound-like generator.

Layout on disk::

    root/images/<id>.png   8-bit grayscale
    root/masks/<id>.png    8-bit grayscale, foreground > 127
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .io import atomic_write_bytes, atomic_write_text
from .oaa import SamplePair

__all__ = [
    "DatasetError",
    "DatasetManifest",
    "SplitSpec",
    "IMAGE_SUFFIXES",
    "scan_dataset",
    "load_dataset",
    "split",
    "split_counts",
    "SynthParams",
    "synth_sample",
    "synth_generate",
]

IMAGE_SUFFIXES = (".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff")
TRAIN_PARTS, TOTAL_PARTS = 7, 10


class DatasetError(ValueError):
    pass


@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[Path, Path, str]]
    resolution: tuple[int, int]

    @property
    def identifiers(self) -> list[str]:
        return [e[2] for e in self.entries]

    def __len__(self):
        return len(self.entries)


def _files_by_stem(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        raise DatasetError(f"missing directory {folder}")
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def scan_dataset(root, target=(224, 224)) -> DatasetManifest:
    root = Path(root)
    images = _files_by_stem(root / "images")
    masks = _files_by_stem(root / "masks")
    if not images:
        raise DatasetError(f"no images found under {root / 'images'}")
    missing = sorted(set(images) - set(masks))
    if missing:
        raise DatasetError(f"no mask for image(s): {', '.join(missing[:5])}")
    entries = [(images[k], masks[k], k) for k in sorted(images)]
    return DatasetManifest(root, entries, tuple(target))


def _read_gray(path: Path) -> Image.Image:
    try:
        with Image.open(path) as im:
            im.load()
            return im.convert("L")
    except Exception as exc:  # PIL raises a zoo of error types
        raise DatasetError(f"cannot read {path}: {exc}") from exc


def load_pair(image_path: Path, mask_path: Path | None, identifier: str, target) -> SamplePair:
    h, w = target
    img = _read_gray(image_path)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.shape != (h, w):
        arr = np.asarray(Image.fromarray(arr).resize((w, h), Image.BILINEAR))
    arr = np.clip(arr, 0.0, 1.0).astype(np.float32)
    mask = None
    if mask_path is not None:
        m = _read_gray(mask_path)
        if m.size != (w, h):
            m = m.resize((w, h), Image.NEAREST)
        mask = (np.asarray(m) > 127).astype(np.uint8)
    return SamplePair(arr, mask, identifier)


def load_dataset(root, target=(224, 224)) -> tuple[DatasetManifest, list[SamplePair]]:
    """Scan ``root`` and load every pair resized to ``target`` (H, W).

    Images become float32 in [0, 1] (bilinear resize); masks become uint8
    {0, 1} (nearest resize, threshold 127).
    """
    manifest = scan_dataset(root, target)
    pairs = [load_pair(ip, mp, ident, manifest.resolution) for ip, mp, ident in manifest.entries]
    return manifest, pairs


# -- splitting --------------------------------------------------------------

def split_counts(n: int, labeled_fraction: float) -> tuple[int, int, int]:
    """(train, val, labeled) sizes: 7:3 rounded toward train, labeled round-half-up, min 1."""
    n_train = -(-TRAIN_PARTS * n // TOTAL_PARTS)  # ceil without float error
    n_labeled = max(1, math.floor(labeled_fraction * n_train + 0.5 + 1e-9))
    return n_train, n - n_train, min(n_labeled, n_train)


@dataclass
class SplitSpec:
    train_ids: list[str]
    val_ids: list[str]
    labeled_ids: list[str]
    seed: int
    labeled_fraction: float

    @property
    def unlabeled_ids(self) -> list[str]:
        lab = set(self.labeled_ids)
        return [i for i in self.train_ids if i not in lab]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        return cls(**json.loads(text))

    def save(self, path) -> None:
        atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path) -> "SplitSpec":
        return cls.from_json(Path(path).read_text())


def split(manifest, seed: int, labeled_fraction: float) -> SplitSpec:
    """Seeded 7:3 train/val split plus a labeled subset of train.

    ``manifest`` may be a :class:`DatasetManifest` or a list of identifiers.
    """
    if not 0 < labeled_fraction <= 1:
        raise ValueError(f"labeled fraction must be in (0, 1], got {labeled_fraction}")
    ids = sorted(manifest.identifiers if isinstance(manifest, DatasetManifest) else manifest)
    if len(ids) < 4:
        raise ValueError(f"need at least 4 entries to split, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate identifiers")
    n_train, _, n_lab = split_counts(len(ids), labeled_fraction)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ids))
    train = [ids[i] for i in perm[:n_train]]
    val = [ids[i] for i in perm[n_train:]]
    labeled = [train[i] for i in rng.permutation(n_train)[:n_lab]]
    return SplitSpec(sorted(train), sorted(val), sorted(labeled), int(seed), float(labeled_fraction))


# -- synthetic data ---------------------------------------------------------

@dataclass
class SynthParams:
    size: int = 224
    min_fraction: float = 0.01
    max_fraction: float = 0.20
    speckle_sigma: float = 0.15
    smooth_sigma: float = 1.0
    ribbon_probability: float = 0.35
    max_shapes: int = 2


def _ellipse(rng, yy, xx, size):
    cy, cx = rng.uniform(0.2, 0.8, 2) * size
    ry, rx = rng.uniform(0.05, 0.22, 2) * size
    th = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(th) + dy * np.sin(th)
    v = -dx * np.sin(th) + dy * np.cos(th)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _ribbon(rng, yy, xx, size):
    # thick band around a sinusoidal centre line, clipped to a random span
    th = rng.uniform(0, np.pi)
    c = rng.uniform(0.3, 0.7, 2) * size
    dy, dx = yy - c[0], xx - c[1]
    along = dx * np.cos(th) + dy * np.sin(th)
    across = -dx * np.sin(th) + dy * np.cos(th)
    amp = rng.uniform(0.02, 0.08) * size
    period = rng.uniform(0.4, 1.0) * size
    centre = amp * np.sin(2 * np.pi * along / period + rng.uniform(0, 2 * np.pi))
    half_width = rng.uniform(0.025, 0.05) * size
    half_len = rng.uniform(0.2, 0.4) * size
    return (np.abs(across - centre) <= half_width) & (np.abs(along) <= half_len)


def synth_sample(rng: np.random.Generator, params: SynthParams = SynthParams()) -> tuple[np.ndarray, np.ndarray]:
    """One (image uint8, mask uint8 {0,255}) pair."""
    s = params.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    while True:
        mask = np.zeros((s, s), dtype=bool)
        for _ in range(int(rng.integers(1, params.max_shapes + 1))):
            shape = _ribbon if rng.random() < params.ribbon_probability else _ellipse
            mask |= shape(rng, yy, xx, s)
        frac = mask.mean()
        if params.min_fraction <= frac <= params.max_fraction:
            break
    g = rng.normal(size=2)
    gradient = 0.08 * (g[0] * (yy / s - 0.5) + g[1] * (xx / s - 0.5))
    blobs = ndimage.gaussian_filter(rng.normal(size=(s, s)), sigma=s / 10)
    blobs *= 0.05 / (blobs.std() + 1e-12)
    background = rng.uniform(0.12, 0.3) + gradient + blobs
    foreground = rng.uniform(0.6, 0.85)
    img = np.where(mask, foreground, background)
    img = img * (1 + params.speckle_sigma * rng.normal(size=(s, s)))
    img = ndimage.gaussian_filter(img, sigma=params.smooth_sigma)
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255).astype(np.uint8), mask.astype(np.uint8) * 255


def _png_bytes(arr: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def synth_generate(n: int, seed: int, out_dir, params: SynthParams | None = None) -> DatasetManifest:
    """Write ``n`` deterministic synthetic pairs under ``out_dir``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    params = params or SynthParams()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(n)
    width = max(4, len(str(n - 1)))
    for i, child in enumerate(children):
        img, mask = synth_sample(np.random.default_rng(child), params)
        name = f"s{seed}_{i:0{width}d}.png"
        atomic_write_bytes(out / "images" / name, _png_bytes(img))
        atomic_write_bytes(out / "masks" / name, _png_bytes(mask))
    atomic_write_text(out / "synth.json", json.dumps({"n": n, "seed": seed, **asdict(params)}, indent=2) + "\n")
    return scan_dataset(out, (params.size, params.size))
