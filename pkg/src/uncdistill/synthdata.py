"""Deterministic synthetic segmentation scenes with void borders and
out-of-domain inserts, plus the scale/crop/flip training augmentation.

A scene is a dark background with colored filled primitives; each shape
class keeps a fixed color so labels are recoverable from pixels when noise
is off. Shape outlines carry a void transition band, and an optional insert
painted in a non-palette color is labeled void entirely: that is the
out-of-domain probe for the uncertainty evaluation.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field, replace

import numpy as np

from . import netpbm

VOID = 255

SHAPE_FAMILIES = ("rectangle", "disc", "triangle", "bar")

# ids baked into per-sample seeds so train/test streams never collide
SPLIT_TRAIN = 0
SPLIT_TEST = 1


def default_palette(num_classes: int) -> list:
    """Background is dark gray; shape classes sit on an HSV hue wheel."""
    colors = [(0.15, 0.15, 0.15)]
    for c in range(1, num_classes):
        hue = (c - 1) / max(1, num_classes - 1)
        colors.append(colorsys.hsv_to_rgb(hue, 0.75, 0.85))
    return colors


@dataclass
class SceneConfig:
    size: int = 96
    num_classes: int = 6
    noise_amplitude: float = 0.08
    void_border: int = 1
    insert_prob: float = 0.25
    min_shapes: int = 6
    max_shapes: int = 10
    palette: list = None
    ood_palette: list = field(
        default_factory=lambda: [(0.97, 0.97, 0.97), (0.55, 0.55, 0.55)])

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.size < 32:
            raise ValueError(f"scene size must be >= 32, got {self.size}")
        if self.palette is None:
            self.palette = default_palette(self.num_classes)
        if len(self.palette) != self.num_classes:
            raise ValueError(
                f"palette has {len(self.palette)} colors for {self.num_classes} classes")


@dataclass
class Sample:
    image: np.ndarray   # (H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (H, W) uint8, classes 0..C-1 plus VOID
    id: str


def _dilate(mask: np.ndarray, steps: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(steps):
        grown = out.copy()
        grown[1:, :] |= out[:-1, :]
        grown[:-1, :] |= out[1:, :]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        grown[1:, 1:] |= out[:-1, :-1]
        grown[1:, :-1] |= out[:-1, 1:]
        grown[:-1, 1:] |= out[1:, :-1]
        grown[:-1, :-1] |= out[1:, 1:]
        out = grown
    return out


def _shape_mask(family: str, rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    cy = rng.uniform(0.1, 0.9) * size
    cx = rng.uniform(0.1, 0.9) * size
    if family == "rectangle":
        hy = rng.uniform(0.06, 0.16) * size
        hx = rng.uniform(0.06, 0.16) * size
        return (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
    if family == "disc":
        r = rng.uniform(0.06, 0.15) * size
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if family == "triangle":
        h = rng.uniform(0.08, 0.18) * size
        b = rng.uniform(0.08, 0.18) * size
        rel = (yy - (cy - h)) / (2.0 * h)
        return (rel >= 0) & (rel <= 1) & (np.abs(xx - cx) <= b * rel)
    if family == "bar":
        t = max(2.0, rng.uniform(0.02, 0.05) * size)
        ln = rng.uniform(0.25, 0.5) * size
        if rng.random() < 0.5:
            return (np.abs(yy - cy) <= t / 2) & (np.abs(xx - cx) <= ln / 2)
        return (np.abs(yy - cy) <= ln / 2) & (np.abs(xx - cx) <= t / 2)
    raise ValueError(f"unknown shape family {family!r}")


def generate_scene(config: SceneConfig, seed: int) -> Sample:
    """Pure function of (config, seed); same inputs give bit-identical samples."""
    rng = np.random.default_rng(seed)
    size = config.size
    image = np.empty((size, size, 3), dtype=np.float32)
    image[:] = np.asarray(config.palette[0], dtype=np.float32)
    labels = np.zeros((size, size), dtype=np.uint8)

    n_shapes = int(rng.integers(config.min_shapes, config.max_shapes + 1))
    for _ in range(n_shapes):
        cls = int(rng.integers(1, config.num_classes))
        family = SHAPE_FAMILIES[(cls - 1) % len(SHAPE_FAMILIES)]
        mask = _shape_mask(family, rng, size)
        if config.void_border > 0:
            band = _dilate(mask, config.void_border) & ~mask
            labels[band] = VOID
        labels[mask] = cls
        image[mask] = np.asarray(config.palette[cls], dtype=np.float32)

    if config.insert_prob > 0 and rng.random() < config.insert_prob:
        family = SHAPE_FAMILIES[int(rng.integers(len(SHAPE_FAMILIES)))]
        color = config.ood_palette[int(rng.integers(len(config.ood_palette)))]
        mask = _shape_mask(family, rng, size)
        covered = mask
        if config.void_border > 0:
            covered = _dilate(mask, config.void_border)
        labels[covered] = VOID
        image[mask] = np.asarray(color, dtype=np.float32)

    if config.noise_amplitude > 0:
        image += rng.normal(0.0, config.noise_amplitude,
                            size=image.shape).astype(np.float32)
        np.clip(image, 0.0, 1.0, out=image)
    return Sample(image=image, labels=labels, id=f"seed{seed}")


def sample_seed(base_seed: int, split: int, index: int) -> int:
    ss = np.random.SeedSequence((int(base_seed), int(split), int(index)))
    return int(ss.generate_state(1, np.uint64)[0])


def build_dataset(config: SceneConfig, count: int, base_seed: int,
                  split: int, prefix: str) -> list:
    samples = []
    for i in range(count):
        s = generate_scene(config, sample_seed(base_seed, split, i))
        samples.append(replace(s, id=f"{prefix}{i:05d}"))
    return samples


# ---------------------------------------------------------------------------
# resizing (half-pixel-center conventions, matching the engine's upsample op)

def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """(H, W, C) float resize with edge clamping."""
    h, w = image.shape[:2]
    i0, i1, wi = _linear_coords(h, out_h)
    j0, j1, wj = _linear_coords(w, out_w)
    rows = image[i0] * (1.0 - wi)[:, None, None] + image[i1] * wi[:, None, None]
    out = rows[:, j0] * (1.0 - wj)[None, :, None] + rows[:, j1] * wj[None, :, None]
    return out.astype(image.dtype)


def resize_nearest(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Categorical (or target-map) resize; never invents values."""
    h, w = grid.shape[:2]
    ii = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    jj = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return grid[np.ix_(ii, jj)]


def _linear_coords(n_in: int, n_out: int):
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0.0, n_in - 1.0)
    i0 = np.floor(x).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, (x - i0).astype(np.float32)


# ---------------------------------------------------------------------------
# augmentation: random scale, crop, horizontal flip

@dataclass
class AugmentParams:
    scale: float
    crop_y: int
    crop_x: int
    flip: bool
    crop: int
    scaled_h: int
    scaled_w: int


def draw_augment_params(seed: int, in_h: int, in_w: int, crop: int,
                        scale_range=(0.5, 2.0), flip_prob: float = 0.5) -> AugmentParams:
    rng = np.random.default_rng(seed)
    scale = float(rng.uniform(scale_range[0], scale_range[1]))
    sh = max(1, int(round(in_h * scale)))
    sw = max(1, int(round(in_w * scale)))
    # padding (when the scaled image is smaller than the crop) happens
    # bottom/right, so valid offsets range over the padded extent
    ph, pw = max(sh, crop), max(sw, crop)
    cy = int(rng.integers(0, ph - crop + 1))
    cx = int(rng.integers(0, pw - crop + 1))
    flip = bool(rng.random() < flip_prob)
    return AugmentParams(scale=scale, crop_y=cy, crop_x=cx, flip=flip,
                         crop=crop, scaled_h=sh, scaled_w=sw)


def _pad_crop_flip(grid: np.ndarray, p: AugmentParams, fill):
    h, w = grid.shape[:2]
    if h < p.crop or w < p.crop:
        padded_shape = (max(h, p.crop), max(w, p.crop)) + grid.shape[2:]
        padded = np.full(padded_shape, fill, dtype=grid.dtype)
        padded[:h, :w] = grid
        grid = padded
    out = grid[p.crop_y:p.crop_y + p.crop, p.crop_x:p.crop_x + p.crop]
    if p.flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def augment_image(image: np.ndarray, p: AugmentParams) -> np.ndarray:
    scaled = resize_bilinear(image, p.scaled_h, p.scaled_w)
    return _pad_crop_flip(scaled, p, 0.0)


def augment_labels(labels: np.ndarray, p: AugmentParams) -> np.ndarray:
    scaled = resize_nearest(labels, p.scaled_h, p.scaled_w)
    return _pad_crop_flip(scaled, p, VOID)


def augment_map(grid: np.ndarray, p: AugmentParams, fill=0.0) -> np.ndarray:
    """Co-transform an auxiliary per-pixel map (teacher targets) like labels."""
    scaled = resize_nearest(grid, p.scaled_h, p.scaled_w)
    return _pad_crop_flip(scaled, p, fill)


def augment(sample: Sample, seed: int, crop: int,
            scale_range=(0.5, 2.0), flip_prob: float = 0.5) -> Sample:
    p = draw_augment_params(seed, sample.image.shape[0], sample.image.shape[1],
                            crop, scale_range, flip_prob)
    return Sample(image=augment_image(sample.image, p),
                  labels=augment_labels(sample.labels, p),
                  id=sample.id)


# ---------------------------------------------------------------------------
# on-disk dataset: PPM images, PGM labels, a manifest of ids

def write_dataset(samples, directory) -> None:
    from pathlib import Path
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = []
    for s in samples:
        q = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8)
        netpbm.write_ppm(directory / f"{s.id}.ppm", q)
        netpbm.write_pgm(directory / f"{s.id}.pgm", s.labels)
        ids.append(s.id)
    (directory / "manifest.txt").write_text("".join(i + "\n" for i in ids),
                                            encoding="utf-8")


def read_dataset(directory) -> list:
    from pathlib import Path
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        return []
    samples = []
    for sid in manifest.read_text(encoding="utf-8").splitlines():
        sid = sid.strip()
        if not sid:
            continue
        image = netpbm.read_ppm(directory / f"{sid}.ppm").astype(np.float32) / 255.0
        labels = netpbm.read_pgm(directory / f"{sid}.pgm")
        samples.append(Sample(image=image, labels=labels, id=sid))
    return samples
