"""Procedural grayscale shape images for desk-scale classification."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .rng import SplitMix64
from .tensor import ConfigError

SHAPES = ("bar", "cross", "disk", "hollow_square", "ring", "diagonal", "triangle", "corner")


def _render(kind: str, g: int, cx: float, cy: float, s: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:g, 0:g].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    # rotate into the shape frame
    u = np.cos(angle) * dx + np.sin(angle) * dy
    v = -np.sin(angle) * dx + np.cos(angle) * dy
    w = max(1.0, 0.25 * s)
    if kind == "bar":
        m = (np.abs(u) <= s) & (np.abs(v) <= w / 2)
    elif kind == "cross":
        m = ((np.abs(u) <= s) & (np.abs(v) <= w / 2)) | ((np.abs(v) <= s) & (np.abs(u) <= w / 2))
    elif kind == "disk":
        m = dx * dx + dy * dy <= s * s
    elif kind == "hollow_square":
        inf = np.maximum(np.abs(u), np.abs(v))
        m = (inf <= s) & (inf >= s - w)
    elif kind == "ring":
        r = np.sqrt(dx * dx + dy * dy)
        m = (r <= s) & (r >= s - w)
    elif kind == "diagonal":
        m = (np.abs(u - v) <= w) & (np.abs(u + v) <= 2 * s)
    elif kind == "triangle":
        m = (v <= s / 2) & (v >= -s) & (np.abs(u) <= (v + s) / 2)
    elif kind == "corner":
        m = ((np.abs(u + s / 2) <= w / 2) & (np.abs(v) <= s)) | ((np.abs(v - s + w / 2) <= w / 2) & (np.abs(u) <= s))
    else:
        raise ConfigError(f"unknown shape {kind!r}")
    return m.astype(np.float64)


@dataclass
class SyntheticShapesDataset:
    images: np.ndarray        # [n, G, G]
    labels: np.ndarray        # [n]
    train_idx: np.ndarray
    val_idx: np.ndarray
    num_classes: int
    seed: int

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def split(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.train_idx if which == "train" else self.val_idx
        return self.images[idx], self.labels[idx]

    def to_bytes(self) -> bytes:
        return (
            np.ascontiguousarray(self.images, dtype="<f8").tobytes()
            + np.ascontiguousarray(self.labels, dtype="<i8").tobytes()
            + np.ascontiguousarray(self.train_idx, dtype="<i8").tobytes()
        )

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]


def generate_dataset(num_samples: int = 1200, num_classes: int = 4, image_size: int = 32,
                     seed: int = 0, noise: float = 0.15, val_fraction: float = 0.1) -> SyntheticShapesDataset:
    """Balanced, seeded set of shape images with a 90/10 train/val split."""
    g, c = image_size, num_classes
    if g < 8:
        raise ConfigError(f"image_size must be >= 8, got {g}")
    if not 2 <= c <= len(SHAPES):
        raise ConfigError(f"num_classes must lie in [2, {len(SHAPES)}], got {c}")
    if num_samples < c:
        raise ConfigError("need at least one sample per class")
    rng = SplitMix64(seed)
    labels = np.arange(num_samples) % c
    labels = labels[rng.permutation(num_samples)]
    images = np.empty((num_samples, g, g))
    for i, lab in enumerate(labels):
        s = rng.uniform(g / 6, g / 3.2)
        cx = rng.uniform(s, g - s) if g - 2 * s > 0 else g / 2
        cy = rng.uniform(s, g - s) if g - 2 * s > 0 else g / 2
        angle = rng.uniform(0.0, np.pi)
        img = _render(SHAPES[lab], g, cx, cy, s, angle)
        images[i] = img * rng.uniform(0.6, 1.0) + noise * rng.normal((g, g))
    order = rng.permutation(num_samples)
    n_val = max(1, int(round(val_fraction * num_samples)))
    return SyntheticShapesDataset(
        images=images, labels=labels.astype(np.int64),
        train_idx=np.sort(order[n_val:]), val_idx=np.sort(order[:n_val]),
        num_classes=c, seed=seed,
    )


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, G, G] -> [B, (G/patch)^2, patch^2], row-major over the patch grid."""
    b, g, _ = images.shape
    if g % patch:
        raise ConfigError(f"patch size {patch} does not divide image size {g}")
    n = g // patch
    x = images.reshape(b, n, patch, n, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(b, n * n, patch * patch)


def tokens_per_image(image_size: int, patch: int) -> int:
    if image_size % patch:
        raise ConfigError(f"patch size {patch} does not divide image size {image_size}")
    return (image_size // patch) ** 2
