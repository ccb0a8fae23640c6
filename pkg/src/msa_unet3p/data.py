"""Synthetic vessel-tree data, PNG dataset IO, normalisation, augmentation and k-fold splits."""
from __future__ import annotations

import json
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

GRAYSCALE_MODES = ("L", "1", "I;16", "I")


@dataclass
class SegmentationSample:
    image: np.ndarray  # (1, H, W) float32 in [-1, 1]
    mask: np.ndarray   # (H, W) uint8 in {0, 1}
    id: str
    split: str = "train"


@dataclass
class GeneratorConfig:
    seed: int = 0
    image_size: int = 256
    n_branches: int = 8
    vessel_width_range: tuple[float, float] = (1.0, 8.0)
    noise_sigma: float = 0.03
    background_structures: int = 4
    contrast_range: tuple[float, float] = (0.3, 0.5)
    max_turn: float = 0.06  # max heading change per 1-px step (radians)
    depth: int = 5

    def __post_init__(self):
        self.vessel_width_range = tuple(float(v) for v in self.vessel_width_range)
        self.contrast_range = tuple(float(v) for v in self.contrast_range)
        lo, hi = self.vessel_width_range
        if lo < 1 or hi < lo:
            raise ValueError("vessel_width_range: need 1 <= min <= max")
        f = 2 ** (self.depth - 1)
        if self.image_size <= 0 or self.image_size % f:
            raise ValueError(f"image_size: {self.image_size} not divisible by {f}")
        if self.n_branches < 1:
            raise ValueError("n_branches: must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma: must be >= 0")
        if self.background_structures < 0:
            raise ValueError("background_structures: must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ValueError(f"{unknown[0]}: unknown generator config field")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vessel_width_range"] = list(self.vessel_width_range)
        d["contrast_range"] = list(self.contrast_range)
        return d


def normalize(image: np.ndarray) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError(f"normalize expects values in [0, 1], got [{x.min()}, {x.max()}]")
    return (x - 0.5) / 0.5


def denormalize(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) * 0.5 + 0.5


# --- synthetic generator ---------------------------------------------------

@dataclass
class _Branch:
    points: list = field(default_factory=list)  # (row, col)
    widths: list = field(default_factory=list)


def _walk(rng, start, heading, length, w0, w1, size, max_turn) -> _Branch:
    b = _Branch()
    r, c = start
    turn_rate = 0.0
    for i in range(int(length)):
        t = i / max(length - 1, 1)
        b.points.append((r, c))
        b.widths.append(w0 + (w1 - w0) * t)
        turn_rate = np.clip(0.85 * turn_rate + rng.normal(0, 0.015), -max_turn, max_turn)
        heading += turn_rate
        r += math.sin(heading)
        c += math.cos(heading)
        if not (-2 <= r < size + 2 and -2 <= c < size + 2):
            break
    return b


def _grow_tree(cfg: GeneratorConfig, rng) -> list[_Branch]:
    size = cfg.image_size
    wmin, wmax = cfg.vessel_width_range
    side = rng.integers(4)
    pos = rng.uniform(0.25, 0.75) * size
    start, heading = {
        0: ((0.0, pos), math.pi / 2),
        1: ((size - 1.0, pos), -math.pi / 2),
        2: ((pos, 0.0), 0.0),
        3: ((pos, size - 1.0), math.pi),
    }[int(side)]
    heading += rng.uniform(-0.4, 0.4)
    w0 = rng.uniform(max(wmin, 0.7 * wmax), wmax)
    trunk = _walk(rng, start, heading, rng.uniform(0.7, 1.0) * size,
                  w0, max(wmin, 0.75 * w0), size, cfg.max_turn)
    branches = [trunk]
    while len(branches) < cfg.n_branches:
        parent = branches[int(rng.integers(len(branches)))]
        if len(parent.points) < 8:
            parent = trunk
        j = int(rng.integers(len(parent.points) // 5, max(len(parent.points) * 4 // 5, 2)))
        j = min(j, len(parent.points) - 2)
        (r0, c0), (r1, c1) = parent.points[j], parent.points[j + 1]
        base = math.atan2(r1 - r0, c1 - c0)
        heading = base + rng.choice([-1, 1]) * rng.uniform(0.4, 1.1)
        wp = parent.widths[j]
        ws = max(wmin, wp * rng.uniform(0.55, 0.9))
        length = rng.uniform(0.25, 0.6) * size
        branches.append(_walk(rng, (r0, c0), heading, length, ws,
                              max(wmin, 0.75 * ws), size, cfg.max_turn))
    return branches


def _stroke(mask: np.ndarray, branch: _Branch) -> None:
    size = mask.shape[0]
    for (r, c), w in zip(branch.points, branch.widths):
        rad = (w - 1) / 2
        rc, cc = int(round(r)), int(round(c))
        k = int(math.ceil(rad))
        r0, r1 = max(rc - k, 0), min(rc + k + 1, size)
        c0, c1 = max(cc - k, 0), min(cc + k + 1, size)
        if r0 >= r1 or c0 >= c1:
            continue
        rr, cc_ = np.ogrid[r0:r1, c0:c1]
        mask[r0:r1, c0:c1] |= (rr - rc) ** 2 + (cc_ - cc) ** 2 <= rad * rad + 1e-9


def _background(cfg: GeneratorConfig, rng) -> np.ndarray:
    n = cfg.image_size
    yy, xx = np.mgrid[0:n, 0:n] / n
    img = rng.uniform(0.55, 0.8) + rng.uniform(-0.1, 0.1) * (yy - 0.5) + rng.uniform(-0.1, 0.1) * (xx - 0.5)
    for _ in range(cfg.background_structures):
        kind = rng.integers(2)
        cy, cx = rng.uniform(0, 1, size=2)
        amp = rng.uniform(-0.15, 0.15)
        if kind == 0:  # soft blob
            s = rng.uniform(0.08, 0.25)
            img = img + amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        else:  # rib-like band
            ang = rng.uniform(0, math.pi)
            d = (yy - cy) * math.cos(ang) - (xx - cx) * math.sin(ang)
            s = rng.uniform(0.02, 0.06)
            img = img + amp * np.exp(-d * d / (2 * s * s))
    return img


def generate_sample(cfg: GeneratorConfig, index: int, split: str = "train") -> SegmentationSample:
    """Render one synthetic vessel image and its mask; a pure function of (seed, index)."""
    rng = np.random.default_rng([cfg.seed, index])
    n = cfg.image_size
    mask = np.zeros((n, n), dtype=bool)
    for b in _grow_tree(cfg, rng):
        _stroke(mask, b)
    img = _background(cfg, rng)
    soft = ndimage.gaussian_filter(mask.astype(np.float64), 0.6)
    img = img - rng.uniform(*cfg.contrast_range) * soft
    img = img + rng.normal(0, cfg.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return SegmentationSample(
        image=normalize(img).astype(np.float32)[None],
        mask=mask.astype(np.uint8),
        id=f"{cfg.seed:04d}_{index:05d}",
        split=split,
    )


def generate_dataset(cfg: GeneratorConfig, count: int, test_fraction: float = 0.0):
    n_test = int(round(count * test_fraction))
    return [generate_sample(cfg, i, "test" if i >= count - n_test else "train")
            for i in range(count)]


# --- disk IO -------------------------------------------------------------

def to_uint8(image: np.ndarray) -> np.ndarray:
    x = denormalize(np.asarray(image).reshape(np.asarray(image).shape[-2:]))
    return np.clip(np.round(x * 255), 0, 255).astype(np.uint8)


def save_dataset(samples, root, manifest: dict | None = None) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray(to_uint8(s.image), mode="L").save(root / "images" / f"{s.id}.png")
        Image.fromarray(s.mask.astype(np.uint8) * 255, mode="L").save(root / "masks" / f"{s.id}.png")
    man = dict(manifest or {})
    man["splits"] = {s.id: s.split for s in samples}
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)


def _read_gray(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in GRAYSCALE_MODES:
            raise ValueError(f"{path.name}: expected a grayscale PNG, got mode {im.mode}")
        if im.mode in ("I;16", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
            return Image.fromarray((arr * 255).round().astype(np.uint8), mode="L")
        return im.convert("L")


def load_dataset(root, image_size: int = 256) -> list[SegmentationSample]:
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir():
        raise FileNotFoundError(f"{img_dir}: images directory not found")
    if not mask_dir.is_dir():
        raise FileNotFoundError(f"{mask_dir}: masks directory not found")
    splits = {}
    if (root / "manifest.json").exists():
        with open(root / "manifest.json", encoding="utf-8") as fh:
            splits = json.load(fh).get("splits", {})
    files = sorted(p for p in img_dir.iterdir() if p.suffix.lower() == ".png")
    if not files:
        warnings.warn(f"no PNG images under {img_dir}")
        return []
    out = []
    for f in files:
        mpath = mask_dir / f.name
        if not mpath.exists():
            raise FileNotFoundError(f"missing mask for image {f.name}")
        im = _read_gray(f)
        mk = _read_gray(mpath)
        if im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.BILINEAR)
        if mk.size != (image_size, image_size):
            mk = mk.resize((image_size, image_size), Image.NEAREST)
        img = normalize(np.asarray(im, dtype=np.float64) / 255.0).astype(np.float32)[None]
        mask = (np.asarray(mk) > 127).astype(np.uint8)
        out.append(SegmentationSample(img, mask, f.stem, splits.get(f.stem, "train")))
    return out


# --- augmentation ----------------------------------------------------------

def brightness_contrast(img01: np.ndarray, delta: float, factor: float) -> np.ndarray:
    m = img01.mean()
    return np.clip((img01 - m) * factor + m + delta, 0.0, 1.0)


def augment(sample: SegmentationSample, rng: np.random.Generator,
            brightness: float = 0.2, contrast: tuple[float, float] = (0.8, 1.2)) -> SegmentationSample:
    delta = rng.uniform(-brightness, brightness)
    factor = rng.uniform(*contrast)
    img = brightness_contrast(denormalize(sample.image), delta, factor)
    return SegmentationSample(normalize(img).astype(np.float32), sample.mask, sample.id, sample.split)


# --- splits ----------------------------------------------------------------

def kfold_split(samples, k: int, seed: int = 0):
    """Seeded k-fold partition: list of (train_idx, val_idx) sorted index arrays."""
    n = samples if isinstance(samples, int) else len(samples)
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"k={k} exceeds number of samples {n}")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i in range(k):
        val = np.sort(folds[i])
        train = np.sort(np.concatenate([folds[j] for j in range(k) if j != i]))
        out.append((train, val))
    return out
