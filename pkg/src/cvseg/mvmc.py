"""Online multi-view mask calibration.

Per-view decoder logits are mapped back into the source frame, averaged,
turned into class probabilities, refined with colour affinities and cut into
hard pseudo-labels.  Everything here runs on detached numpy data: no gradient
ever flows back through a pseudo-mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import functional as F
from .autograd import Tensor
from .errors import ContractError, ParameterError
from .losses import IGNORE
from .transforms import GeomTransform, invert


@dataclass(frozen=True)
class RefineConfig:
    iterations: int = 3
    kernel_size: int = 5
    sigma_color: float = 0.1


@dataclass
class PseudoMask:
    """Hard labels (..., H, W), an ignore map and the winning-class confidence."""

    labels: np.ndarray
    ignore: np.ndarray
    confidence: np.ndarray

    def targets(self) -> np.ndarray:
        """Labels with ignored pixels set to :data:`IGNORE`."""
        return np.where(self.ignore, IGNORE, self.labels).astype(np.int64)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def affinity_kernels(image: np.ndarray, kernel_size: int, sigma_color: float) -> np.ndarray:
    """Normalised colour-affinity weights, shape (K*K, ..., H, W) per window offset."""
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise ParameterError(f"kernel_size must be odd and positive, got {kernel_size}")
    if not sigma_color > 0:
        raise ParameterError(f"sigma_color must be > 0, got {sigma_color}")
    r = kernel_size // 2
    h, w = image.shape[-3:-1]
    pad = [(0, 0)] * (image.ndim - 3) + [(r, r), (r, r), (0, 0)]
    padded = np.pad(image, pad, mode="edge")
    inside = np.pad(np.ones((h, w)), r)
    weights = []
    for dy in range(kernel_size):
        for dx in range(kernel_size):
            nb = padded[..., dy:dy + h, dx:dx + w, :]
            dist2 = np.sum((image - nb) ** 2, axis=-1)
            weights.append(np.exp(-dist2 / (2 * sigma_color ** 2)) * inside[dy:dy + h, dx:dx + w])
    weights = np.stack(weights)
    return weights / weights.sum(axis=0, keepdims=True)


def refine(probs, image, iterations: int = 3, kernel_size: int = 5, sigma_color: float = 0.1) -> np.ndarray:
    """Affinity-weighted averaging of per-pixel distributions.

    ``probs`` is (..., K, H, W), ``image`` is (..., H, W, 3) in [0, 1].  Each
    iteration replaces a pixel's distribution by the average over its window,
    weighted by exp(-|rgb_i - rgb_j|^2 / (2 sigma^2)) and normalised per window;
    pixels outside the image do not take part.
    """
    if iterations < 0:
        raise ParameterError(f"iterations must be >= 0, got {iterations}")
    p = _as_array(probs).copy()
    img = _as_array(image)
    weights = affinity_kernels(img, kernel_size, sigma_color)
    if iterations == 0:
        return p
    r = kernel_size // 2
    h, w = p.shape[-2:]
    weights = np.expand_dims(weights, -3)  # broadcast over the class axis
    for _ in range(iterations):
        padded = np.pad(p, [(0, 0)] * (p.ndim - 2) + [(r, r), (r, r)])
        out = np.zeros_like(p)
        i = 0
        for dy in range(kernel_size):
            for dx in range(kernel_size):
                out += weights[i] * padded[..., dy:dy + h, dx:dx + w]
                i += 1
        p = out
    return p


def fuse(logits: Sequence, geoms: Sequence[GeomTransform], size: tuple) -> np.ndarray:
    """Softmax of the mean inverse-transformed logits, shape (..., K, H, W)."""
    if not logits:
        raise ContractError("calibrate needs at least one view")
    acc = None
    for lg, g in zip(logits, geoms):
        back = invert(g, Tensor(_as_array(lg)), size).data
        acc = back if acc is None else acc + back
    return F.softmax(Tensor(acc / len(logits)), axis=-3).data


def calibrate(
    logits: Sequence,
    geoms: Sequence[GeomTransform],
    image,
    gamma: float = 0.9,
    refine_cfg: RefineConfig | None = RefineConfig(),
    tie_band: float = 0.05,
    image_labels=None,
) -> PseudoMask:
    """Pseudo-mask from per-view logits (each (..., K, h_v, w_v)) of one image batch.

    ``image`` is (..., H, W, 3) and fixes the source resolution.  Pixels whose
    confidence is below ``gamma``, or whose top two classes are within
    ``tie_band`` of each other, are ignored.  ``refine_cfg=None`` disables refinement.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ParameterError(f"gamma must lie in [0, 1], got {gamma}")
    img = _as_array(image)
    size = img.shape[-3:-1]
    probs = fuse(logits, geoms, size)
    if image_labels is not None:
        present = np.asarray(image_labels, dtype=np.float64)
        keep = np.concatenate([np.ones(present.shape[:-1] + (1,)), present], axis=-1)
        probs = probs * keep[..., None, None]
        probs = probs / probs.sum(axis=-3, keepdims=True)
    if refine_cfg is not None:
        probs = refine(probs, img, refine_cfg.iterations, refine_cfg.kernel_size, refine_cfg.sigma_color)
    top2 = np.sort(probs, axis=-3)[..., -2:, :, :] if probs.shape[-3] > 1 else None
    confidence = probs.max(axis=-3)
    labels = probs.argmax(axis=-3)
    ignore = confidence < gamma
    if top2 is not None:
        ignore |= (top2[..., 1, :, :] - top2[..., 0, :, :]) <= tie_band
    return PseudoMask(labels.astype(np.int64), ignore, confidence)


def warp_targets(targets: np.ndarray, view_geoms: Sequence[GeomTransform]) -> list:
    """Hard targets (..., H, W) moved into every view's frame by nearest neighbour.

    Ignored pixels keep the :data:`IGNORE` value, so ignore flags travel with them.
    """
    out = []
    for g in view_geoms:
        t = F.nearest_resize(targets, g.output_size(targets.shape[-2:]))
        out.append(np.ascontiguousarray(t[..., ::-1]) if g.hflip else t)
    return out


def build_seg_targets(pseudo: PseudoMask, view_geoms: Sequence[GeomTransform]) -> list:
    """Per-view segmentation targets from a pseudo-mask."""
    return warp_targets(pseudo.targets(), view_geoms)


def save_mask(path, labels: np.ndarray) -> None:
    """Write class indices as an 8-bit single-channel PNG (255 = ignore)."""
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.min() < 0 or labels.max() > 255:
        raise ContractError(f"mask must be 2-D with values in [0, 255], got shape {labels.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def load_mask(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.int64)
