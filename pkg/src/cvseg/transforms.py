"""Multi-view augmentation with invertible geometric transforms.

Images are channel-last ``(H, W, 3)`` arrays in [0, 1].  Network-side maps
(logits, code maps) are spatial-last ``(..., H, W)`` so that the geometric
transforms and their inverses apply unchanged to any batch/channel prefix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from . import functional as F
from .autograd import Tensor, as_tensor
from .errors import ContractError, DimensionError, ParameterError


@dataclass(frozen=True)
class GeomTransform:
    """Rescale by ``scale`` then optionally mirror left-right."""

    scale: float = 1.0
    hflip: bool = False

    def __post_init__(self):
        if not self.scale > 0:
            raise ParameterError(f"scale must be positive, got {self.scale}")

    def output_size(self, size: Sequence[int]) -> tuple:
        return tuple(max(1, int(round(n * self.scale))) for n in size)


IDENTITY = GeomTransform()


@dataclass(frozen=True)
class ColorDistortion:
    """Maximum jitter strengths; actual factors are drawn from a seed."""

    brightness: float = 0.0
    contrast: float = 0.0
    saturation: float = 0.0
    hue: float = 0.0

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation"):
            if not 0.0 <= getattr(self, name) <= 0.3:
                raise ParameterError(f"{name} strength must lie in [0, 0.3]")
        if not 0.0 <= self.hue <= 0.1:
            raise ParameterError("hue strength must lie in [0, 0.1]")

    @property
    def is_identity(self) -> bool:
        return self.brightness == self.contrast == self.saturation == self.hue == 0.0

    def factors(self, seed: int) -> tuple:
        rng = np.random.default_rng(seed)
        b = rng.uniform(1 - self.brightness, 1 + self.brightness)
        c = rng.uniform(1 - self.contrast, 1 + self.contrast)
        s = rng.uniform(1 - self.saturation, 1 + self.saturation)
        h = rng.uniform(-self.hue, self.hue)
        return b, c, s, h

    def __call__(self, image: np.ndarray, seed: int) -> np.ndarray:
        """Brightness, contrast, saturation, hue, in that order; clamped to [0, 1]."""
        if self.is_identity:
            return image
        b, c, s, h = self.factors(seed)
        img = np.clip(image * b, 0.0, 1.0)
        gray = _grayscale(img)
        img = np.clip(c * img + (1 - c) * gray.mean(axis=(-2, -1), keepdims=True)[..., None], 0.0, 1.0)
        img = np.clip(s * img + (1 - s) * _grayscale(img)[..., None], 0.0, 1.0)
        if self.hue > 0:
            hsv = rgb_to_hsv(img)
            hsv[..., 0] = (hsv[..., 0] + h) % 1.0
            img = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
        return img


DEFAULT_COLOR = ColorDistortion(0.3, 0.3, 0.3, 0.1)


def _grayscale(img: np.ndarray) -> np.ndarray:
    return img @ np.array([0.299, 0.587, 0.114])


def apply_geom(geom: GeomTransform, maps) -> Tensor:
    """Forward geometric transform on a spatial-last tensor (differentiable)."""
    maps = as_tensor(maps)
    out = F.bilinear_resize(maps, geom.output_size(maps.shape[-2:]))
    return F.flip(out, -1) if geom.hflip else out


def apply(geom: GeomTransform, color: ColorDistortion, image, seed: int = 0) -> Tensor:
    """Augment one channel-last image: geometry first, then photometric jitter."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise DimensionError(f"apply: expected (H, W, 3) image, got {img.shape}")
    chw = apply_geom(geom, np.moveaxis(img, -1, 0)).data
    out = np.moveaxis(chw, 0, -1)
    out = color(out, seed)
    return Tensor(np.clip(out, 0.0, 1.0))


def invert(geom: GeomTransform, maps, target_shape: Sequence[int]) -> Tensor:
    """Undo ``geom`` on spatial-last maps, resampling to ``target_shape``.

    Flips are undone exactly; the rescale is undone with a differentiable
    bilinear resize, so gradients flow back into ``maps``.
    """
    maps = as_tensor(maps)
    target = tuple(int(n) for n in target_shape)
    expected = geom.output_size(target)
    got = maps.shape[-2:]
    if any(abs(e - g) > 1 for e, g in zip(expected, got)):
        raise ContractError(
            f"invert: maps of size {got} cannot come from {target} under scale {geom.scale}"
        )
    out = F.flip(maps, -1) if geom.hflip else maps
    return F.bilinear_resize(out, target)


def random_crop(image: np.ndarray, mask: Optional[np.ndarray], size: int, rng: np.random.Generator):
    """Square crop at a random offset; image is (H, W, 3), mask (H, W)."""
    h, w = image.shape[:2]
    if size > h or size > w:
        raise DimensionError(f"crop size {size} exceeds image {h}x{w}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    img = image[top:top + size, left:left + size]
    return img, None if mask is None else mask[top:top + size, left:left + size]


@dataclass(frozen=True)
class ViewSpec:
    """How to build the views of one training sample."""

    scales: tuple = (0.5, 1.0)
    flip: bool = True
    color: ColorDistortion = DEFAULT_COLOR
    crop: int = 64

    @property
    def n_views(self) -> int:
        return len(self.scales)


@dataclass
class View:
    images: Tensor
    geom: GeomTransform
    seed: int


@dataclass
class ViewBatch:
    """Augmented views of a batch of source images.

    ``views[v].images`` is ``(N, 3, h_v, w_v)``; every view of the batch shares
    one geometric transform so that inversion is a single tensor operation.
    """

    views: list
    source: np.ndarray
    labels: Optional[np.ndarray] = None
    masks: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    @property
    def geoms(self) -> list:
        return [v.geom for v in self.views]

    @property
    def size(self) -> tuple:
        return self.source.shape[1:3]


def make_views(
    images: np.ndarray,
    spec: ViewSpec,
    rng: np.random.Generator,
    labels: Optional[np.ndarray] = None,
    masks: Optional[np.ndarray] = None,
) -> ViewBatch:
    """Build one view per entry of ``spec.scales`` for a batch of (N, H, W, 3) images."""
    views = []
    for scale in spec.scales:
        geom = GeomTransform(scale, bool(spec.flip and rng.random() < 0.5))
        seed = int(rng.integers(0, 2**31 - 1))
        seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=len(images))
        per_image = [apply(geom, spec.color, img, int(s)).data for img, s in zip(images, seeds)]
        views.append(View(Tensor(np.stack(per_image).transpose(0, 3, 1, 2)), geom, seed))
    return ViewBatch(views, images, labels, masks)
