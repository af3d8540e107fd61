"""Synthetic weakly-labelled segmentation data: coloured shapes on texture."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, zoom

from .errors import ConfigError

CLASS_NAMES = ("background", "circle", "square", "triangle")
N_CLASSES = len(CLASS_NAMES)
REGIMES = ("wsss", "semi_pixel_image", "semi_pixel_unlabeled")

# Mean RGB per foreground class; sampled colours jitter around these.
PALETTE = np.array([
    [0.85, 0.25, 0.20],
    [0.20, 0.70, 0.30],
    [0.25, 0.35, 0.90],
])


@dataclass(frozen=True)
class DatasetSpec:
    regime: str = "wsss"
    n_train: int = 256
    n_val: int = 32
    image_size: int = 48
    min_shapes: int = 1
    max_shapes: int = 3
    min_radius: int = 9
    max_radius: int = 16
    color_jitter: float = 0.15
    noise: float = 0.06
    pixel_fraction: float = 0.125
    seed: int = 0

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ConfigError("dataset.regime", f"must be one of {REGIMES}, got {self.regime!r}")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ConfigError("dataset.max_shapes", "need 0 <= min_shapes <= max_shapes")
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("dataset.n_train", "splits must be non-empty")
        if not 0.0 <= self.pixel_fraction <= 1.0:
            raise ConfigError("dataset.pixel_fraction", "must lie in [0, 1]")


@dataclass
class Split:
    images: np.ndarray      # (N, S, S, 3) in [0, 1]
    masks: np.ndarray       # (N, S, S) class indices
    labels: np.ndarray      # (N, K-1) multi-hot over foreground classes
    has_pixels: np.ndarray  # (N,) sample belongs to the pixel-labelled set
    has_labels: np.ndarray  # (N,) sample belongs to the image-labelled set

    def __len__(self) -> int:
        return len(self.images)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.images, self.masks, self.labels, self.has_pixels, self.has_labels):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass
class Dataset:
    train: Split
    val: Split
    spec: DatasetSpec


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.35, 0.65, size=3)
    coarse = rng.normal(0.0, 0.12, size=(size // 8 + 1, size // 8 + 1, 3))
    smooth = zoom(coarse, (size / coarse.shape[0], size / coarse.shape[1], 1), order=1)[:size, :size]
    fine = gaussian_filter(rng.normal(0.0, 0.05, size=(size, size, 3)), sigma=(1, 1, 0))
    return np.clip(base + smooth + fine, 0.0, 1.0)


def _shape_mask(cls: int, cy: float, cx: float, r: float, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    if cls == 1:
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
    if cls == 2:
        return (np.abs(yy - cy) <= r * 0.85) & (np.abs(xx - cx) <= r * 0.85)
    # upright isosceles triangle
    top, bottom = cy - r, cy + r
    half_width = (yy - top) / (2 * r) * r
    return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= half_width)


def render(rng: np.random.Generator, spec: DatasetSpec) -> tuple:
    """One (image, mask) pair."""
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    image = _texture(rng, s)
    mask = np.zeros((s, s), dtype=np.int64)
    for _ in range(int(rng.integers(spec.min_shapes, spec.max_shapes + 1))):
        cls = int(rng.integers(1, N_CLASSES))
        r = rng.uniform(spec.min_radius, spec.max_radius)
        cy, cx = rng.uniform(r * 0.5, s - r * 0.5, size=2)
        region = _shape_mask(cls, cy, cx, r, yy, xx)
        color = np.clip(PALETTE[cls - 1] + rng.normal(0.0, spec.color_jitter, size=3), 0.0, 1.0)
        shade = 1.0 + 0.15 * ((yy - cy) / max(r, 1.0))[..., None]
        image = np.where(region[..., None], np.clip(color * shade, 0.0, 1.0), image)
        mask[region] = cls
    image = np.clip(image + rng.normal(0.0, spec.noise, size=image.shape), 0.0, 1.0)
    return image, mask


def labels_from_mask(mask: np.ndarray) -> np.ndarray:
    return np.array([(mask == c).any() for c in range(1, N_CLASSES)], dtype=np.float64)


def _split(rng: np.random.Generator, spec: DatasetSpec, n: int, train: bool) -> Split:
    pairs = [render(rng, spec) for _ in range(n)]
    images = np.stack([p[0] for p in pairs])
    masks = np.stack([p[1] for p in pairs])
    labels = np.stack([labels_from_mask(m) for m in masks])
    has_pixels = np.zeros(n, dtype=bool)
    has_labels = np.ones(n, dtype=bool)
    if train and spec.regime != "wsss":
        n_pix = int(round(spec.pixel_fraction * n))
        has_pixels[:n_pix] = True
        has_labels[:n_pix] = False
        if spec.regime == "semi_pixel_unlabeled":
            has_labels[:] = False
    return Split(images, masks, labels, has_pixels, has_labels)


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Deterministic train/val splits for ``spec.seed``.

    Which supervision a training sample exposes depends on the regime: image
    labels only (``wsss``), a pixel-labelled subset plus image labels
    (``semi_pixel_image``), or a pixel-labelled subset plus unlabelled images
    (``semi_pixel_unlabeled``).  Validation samples always carry masks.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    train = _split(rng, spec, spec.n_train, True)
    val = _split(rng, spec, spec.n_val, False)
    return Dataset(train, val, spec)
