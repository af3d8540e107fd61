"""Training objectives and segmentation metrics.

Logit maps are NCHW tensors with channel 0 the background class.  Hard targets
are integer arrays of shape (N, H, W) where :data:`IGNORE` marks pixels that
carry no supervision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import functional as F
from .autograd import Tensor, as_tensor
from .errors import ContractError
from .transforms import invert

IGNORE = 255

NGWP_EPS = 1e-4
FOCAL_POWER = 3.0
FOCAL_LAMBDA = 0.01


@dataclass(frozen=True)
class LossWeights:
    seg: float = 1.0
    cls: float = 1.0
    reg: float = 4.0
    warmup_epochs: int = 5

    def at_epoch(self, epoch: int) -> "LossWeights":
        """Effective weights: the segmentation term is off during warm-up."""
        if epoch < self.warmup_epochs:
            return LossWeights(0.0, self.cls, self.reg, self.warmup_epochs)
        return self


def _zero() -> Tensor:
    return Tensor(0.0)


def reference_shape(maps: Sequence[Tensor], geoms: Sequence) -> tuple:
    """Common frame all views invert to: the largest un-scaled map size."""
    sizes = [tuple(int(round(n / g.scale)) for n in m.shape[-2:]) for m, g in zip(maps, geoms)]
    return max(sizes)


def pairwise_l1(maps: Sequence[Tensor], geoms: Sequence, target_shape: Optional[tuple] = None,
                channel_mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean over ordered view pairs of the per-pixel L1 distance between maps.

    Maps are inverse-transformed into a common frame first.  The L1 distance sums
    over the selected channels (``channel_mask``, shape (N, K) or (K,)) and is
    averaged over pixels and samples.
    """
    if len(maps) < 2:
        return _zero()
    maps = [as_tensor(m) for m in maps]
    target = tuple(target_shape) if target_shape is not None else reference_shape(maps, geoms)
    aligned = [invert(g, m, target) for m, g in zip(maps, geoms)]
    total = None
    n_pairs = 0
    for v in range(len(aligned)):
        for u in range(v + 1, len(aligned)):
            per = F.mean(F.abs(aligned[v] - aligned[u]), axis=(-2, -1))
            if channel_mask is not None:
                per = per * np.asarray(channel_mask, dtype=np.float64)
            dist = F.mean(F.sum(per, axis=-1))
            total = dist if total is None else total + dist
            n_pairs += 1
    # |a - b| is symmetric: the ordered-pair mean equals the unordered one.
    return total / n_pairs


def seg_loss(pred_logits: Sequence[Tensor], targets: Sequence[np.ndarray],
             sample_weight: Optional[np.ndarray] = None) -> Tensor:
    """Pixel cross-entropy, averaged over supervised pixels and summed over views."""
    total = _zero()
    for logits, target in zip(pred_logits, targets):
        target = np.asarray(target)
        if logits.shape[-2:] != target.shape[-2:] or logits.shape[0] != target.shape[0]:
            raise ContractError(f"target {target.shape} does not match logits {logits.shape}")
        valid = target != IGNORE
        count = int(valid.sum())
        if count == 0:
            continue
        k = logits.shape[1]
        if target[valid].max() >= k:
            raise ContractError(f"target class {target[valid].max()} outside [0, {k})")
        onehot = np.zeros(logits.shape)
        n_idx, h_idx, w_idx = np.nonzero(valid)
        onehot[n_idx, target[valid], h_idx, w_idx] = 1.0
        if sample_weight is not None:
            onehot *= np.asarray(sample_weight, dtype=np.float64).reshape(-1, 1, 1, 1)
        nll = -F.sum(F.log_softmax(logits, axis=1) * onehot)
        total = total + nll / count
    return total


def class_scores(logits: Tensor) -> Tensor:
    """Image-level scores (N, K): normalised global weighted pooling plus focal mask penalty."""
    n, k = logits.shape[:2]
    flat = F.reshape(logits, (n, k, -1))
    masks = F.softmax(flat, axis=1)
    pooled = F.sum(masks * flat, axis=-1) / (F.sum(masks, axis=-1) + NGWP_EPS)
    mean_mask = F.mean(masks, axis=-1)
    focal = F.power(1.0 - mean_mask, FOCAL_POWER) * F.log(mean_mask + FOCAL_LAMBDA)
    return pooled + focal


def bce_with_logits(scores: Tensor, y: np.ndarray) -> Tensor:
    """Elementwise -[y log s(x) + (1 - y) log s(-x)], stable for large |x|."""
    y = np.asarray(y, dtype=np.float64)
    return -(F.log_sigmoid(scores) * y + F.log_sigmoid(-scores) * (1.0 - y))


def cls_loss(pred_logits: Sequence[Tensor], y: np.ndarray, labelled: Optional[np.ndarray] = None) -> Tensor:
    """Multi-label BCE on foreground class scores.

    ``y`` is (N, K-1) multi-hot over foreground classes.  Only samples flagged in
    ``labelled`` contribute; the loss is summed over classes and views and
    averaged over labelled samples.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    labelled = np.ones(n, dtype=bool) if labelled is None else np.asarray(labelled, dtype=bool)
    if not labelled.any():
        return _zero()
    rows = np.flatnonzero(labelled)
    total = _zero()
    for logits in pred_logits:
        scores = class_scores(logits)[:, 1:]
        per = F.sum(bce_with_logits(scores, y), axis=1)
        total = total + F.sum(per[rows]) / len(rows)
    return total


def consistency_channels(y: Optional[np.ndarray], k: int, labelled: Optional[np.ndarray] = None) -> np.ndarray:
    """(N, K) channel selection: classes in the label for labelled samples, all classes otherwise."""
    if y is None:
        return np.ones((1, k))
    y = np.asarray(y, dtype=np.float64)
    mask = np.concatenate([np.zeros((len(y), 1)), y], axis=1)
    if labelled is not None:
        mask[~np.asarray(labelled, dtype=bool)] = 1.0
    return mask


def mask_consistency_loss(pred_logits: Sequence[Tensor], geoms: Sequence, y: Optional[np.ndarray] = None,
                          labelled: Optional[np.ndarray] = None, target_shape: Optional[tuple] = None,
                          space: str = "logits") -> Tensor:
    """Pairwise L1 between inverse-transformed mask maps on the selected class channels.

    ``space="probs"`` compares per-pixel softmax masks instead of raw logits.
    On logits the distance shrinks linearly with the logit scale, so a large
    weight can flatten the predictions; probabilities are bounded.
    """
    if space not in ("logits", "probs"):
        raise ContractError(f"space must be 'logits' or 'probs', got {space!r}")
    if len(pred_logits) < 2:
        return _zero()
    k = pred_logits[0].shape[1]
    maps = [F.softmax(as_tensor(m), axis=1) for m in pred_logits] if space == "probs" else pred_logits
    return pairwise_l1(maps, geoms, target_shape, consistency_channels(y, k, labelled))


def total_loss(weights: LossWeights, l_seg, l_cls, l_mask, l_fact) -> Tensor:
    return weights.seg * l_seg + weights.cls * l_cls + weights.reg * (l_mask + l_fact)


class ConfusionAccumulator:
    """k x k pixel counts indexed by (ground truth, prediction)."""

    def __init__(self, k: int):
        self.k = k
        self.matrix = np.zeros((k, k), dtype=np.int64)

    def update(self, gt: np.ndarray, pred: np.ndarray, ignore: int = IGNORE) -> "ConfusionAccumulator":
        gt = np.asarray(gt).reshape(-1)
        pred = np.asarray(pred).reshape(-1)
        keep = gt != ignore
        gt, pred = gt[keep].astype(np.int64), pred[keep].astype(np.int64)
        if gt.size and (gt.max() >= self.k or pred.max() >= self.k or min(gt.min(), pred.min()) < 0):
            raise ContractError(f"class index outside [0, {self.k})")
        self.matrix += np.bincount(gt * self.k + pred, minlength=self.k ** 2).reshape(self.k, self.k)
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        out = ConfusionAccumulator(self.k)
        out.matrix = self.matrix + other.matrix
        return out

    @property
    def total(self) -> int:
        return int(self.matrix.sum())


def metrics(conf: ConfusionAccumulator) -> tuple:
    """(mIoU, mFDR, mFNR); classes whose denominator is zero are left out of each mean."""
    if conf.total == 0:
        raise ContractError("confusion accumulator is empty")
    m = conf.matrix.astype(np.float64)
    tp = np.diag(m)
    fp = m.sum(axis=0) - tp
    fn = m.sum(axis=1) - tp

    def _mean_ratio(num, den):
        ok = den > 0
        return float(np.mean(num[ok] / den[ok])) if ok.any() else 0.0

    return _mean_ratio(tp, tp + fp + fn), _mean_ratio(fp, tp + fp), _mean_ratio(fn, tp + fn)
