"""Synthetic shape images and a CIFAR-10 style binary reader/writer.

Shape classes are rendered with random position, rotation and colors, and
with a foreground area drawn from one range shared by all classes, so
neither color nor pixel-count statistics carry the label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# ordered so that any leading subset stays distinguishable at 32x32
SHAPES = ("square", "triangle", "cross", "ring", "circle", "bar", "diamond", "lshape")
AREA_RANGE = (0.20, 0.30)
MIN_CONTRAST = 0.3

CIFAR_SIDE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (M, H, W, C) in [0, 1]
    labels: np.ndarray  # (M,) int
    class_names: list[str]
    meta: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) == 0:
            raise ValueError("image set is empty")
        if len(self.images) != len(self.labels):
            raise ValueError("labels must align 1:1 with images")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, idx) -> LabeledImageSet:
        idx = np.asarray(idx)
        meta = [self.meta[i] for i in idx] if self.meta else []
        return LabeledImageSet(self.images[idx], self.labels[idx], list(self.class_names), meta)


# ---------------------------------------------------------------------------
# rendering


def _polygon_mask(u: np.ndarray, v: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Inside test for a convex polygon with counter-clockwise vertices."""
    inside = np.ones(u.shape, dtype=bool)
    for a, b in zip(verts, np.roll(verts, -1, axis=0)):
        inside &= (b[0] - a[0]) * (v - a[1]) - (b[1] - a[1]) * (u - a[0]) >= 0
    return inside


def _canonical(shape: str, u: np.ndarray, v: np.ndarray, area: float) -> tuple[np.ndarray, float]:
    """Mask in shape-local coordinates and the shape's bounding radius."""
    if shape == "circle":
        r = math.sqrt(area / math.pi)
        return u * u + v * v <= r * r, r
    if shape == "ring":
        r = math.sqrt(area / (0.75 * math.pi))
        d2 = u * u + v * v
        return (d2 <= r * r) & (d2 >= 0.25 * r * r), r
    if shape == "triangle":
        side = math.sqrt(4.0 * area / math.sqrt(3.0))
        rc = side / math.sqrt(3.0)
        ang = np.deg2rad([90.0, 210.0, 330.0])
        verts = np.stack([rc * np.cos(ang), rc * np.sin(ang)], axis=1)
        return _polygon_mask(u, v, verts), rc
    if shape == "cross":
        w = math.sqrt(area / 5.0)
        h = 1.5 * w
        m = ((np.abs(u) <= h) & (np.abs(v) <= w / 2)) | ((np.abs(v) <= h) & (np.abs(u) <= w / 2))
        return m, math.hypot(h, w / 2)
    if shape == "bar":
        w = math.sqrt(area / 4.0)
        return (np.abs(u) <= 2 * w) & (np.abs(v) <= w / 2), math.hypot(2 * w, w / 2)
    if shape == "diamond":
        # rhombus with diagonals d1 = 1.6 d2
        d2 = math.sqrt(2.0 * area / 1.6)
        d1 = 1.6 * d2
        return np.abs(u) / (d1 / 2) + np.abs(v) / (d2 / 2) <= 1.0, d1 / 2
    if shape == "lshape":
        c = math.sqrt(area / 5.0)
        x, y = u / c + 1.5, v / c + 1.5  # 3x3 cell grid
        m = ((x >= 0) & (x < 1) & (y >= 0) & (y < 3)) | ((x >= 1) & (x < 3) & (y >= 0) & (y < 1))
        return m, 1.5 * c * math.sqrt(2.0)
    raise ValueError(f"unknown shape {shape!r}")


def _colors(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    while True:
        fg, bg = rng.random(3), rng.random(3)
        if np.abs(fg - bg).mean() >= MIN_CONTRAST:
            return fg, bg


def render_shape(shape: str, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, dict]:
    """One (size, size, 3) image, its boolean foreground mask and render params."""
    area = rng.uniform(*AREA_RANGE) * size * size
    fg, bg = _colors(rng)
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    meta: dict = {"shape": shape}
    if shape == "square":
        # axis-aligned on the pixel grid: exactly side**2 foreground pixels
        side = int(np.clip(round(math.sqrt(area)), 4, size - 2))
        top = int(rng.integers(0, size - side + 1))
        left = int(rng.integers(0, size - side + 1))
        mask = np.zeros((size, size), dtype=bool)
        mask[top : top + side, left : left + side] = True
        meta.update(side=side, top=top, left=left)
    else:
        theta = rng.uniform(0.0, 2.0 * math.pi)
        _, radius = _canonical(shape, np.zeros(1), np.zeros(1), area)
        if radius > size / 2.0:
            # shrink rather than clip so the whole shape stays visible
            area *= (size / 2.0 / radius) ** 2
            radius = size / 2.0
        lo, hi = radius, size - radius
        cy, cx = rng.uniform(lo, hi), rng.uniform(lo, hi)
        c, s = math.cos(theta), math.sin(theta)
        u = c * (xs - cx) + s * (ys - cy)
        v = -s * (xs - cx) + c * (ys - cy)
        mask, _ = _canonical(shape, u, v, area)
        meta.update(center=(cy, cx), rotation=theta, area=area)
    img = np.where(mask[:, :, None], fg, bg)
    meta.update(fg=fg.tolist(), bg=bg.tolist())
    return img, mask, meta


def synth_shapes(classes: int = 4, per_class: int = 250, size: int = 32, seed: int = 7) -> LabeledImageSet:
    """``classes * per_class`` images, class-balanced, deterministic per seed."""
    if not 2 <= classes <= len(SHAPES):
        raise ValueError(f"classes must lie in [2, {len(SHAPES)}]")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if size < 16:
        raise ValueError("size must be >= 16")
    names = list(SHAPES[:classes])
    n = classes * per_class
    images = np.empty((n, size, size, 3))
    labels = np.empty(n, dtype=np.int64)
    meta = []
    for idx in range(n):
        label = idx % classes
        rng = np.random.default_rng([seed, idx])
        img, mask, m = render_shape(names[label], size, rng)
        m["fg_pixels"] = int(mask.sum())
        images[idx] = img
        labels[idx] = label
        meta.append(m)
    return LabeledImageSet(images, labels, names, meta)


def desk_benchmark(seed: int = 7, classes: int = 4, train_per_class: int = 250,
                   test_per_class: int = 50, size: int = 32) -> tuple[LabeledImageSet, LabeledImageSet]:
    """Train/test split drawn from one generated pool."""
    pool = synth_shapes(classes, train_per_class + test_per_class, size, seed)
    n_train = classes * train_per_class
    return pool.subset(np.arange(n_train)), pool.subset(np.arange(n_train, len(pool)))


# ---------------------------------------------------------------------------
# CIFAR-10 binary format: 1 label byte + 3072 channel-planar pixel bytes


def load_cifar_binary(path) -> LabeledImageSet:
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise ValueError(f"file length {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if np.any(labels >= 10):
        raise ValueError("CIFAR labels must lie in [0, 10)")
    pix = rec[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).transpose(0, 2, 3, 1)
    return LabeledImageSet(pix / 255.0, labels, [str(i) for i in range(10)])


def save_cifar_binary(data: LabeledImageSet, path) -> None:
    if data.images.shape[1:] != (CIFAR_SIDE, CIFAR_SIDE, 3):
        raise ValueError("CIFAR binary holds 32x32x3 images only")
    if np.any(data.labels < 0) or np.any(data.labels >= 10):
        raise ValueError("CIFAR labels must lie in [0, 10)")
    pix = np.clip(np.floor(data.images * 255.0 + 0.5), 0, 255).astype(np.uint8)
    rec = np.empty((len(data), CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = data.labels
    rec[:, 1:] = pix.transpose(0, 3, 1, 2).reshape(len(data), -1)
    Path(path).write_bytes(rec.tobytes())
