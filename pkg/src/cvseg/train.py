"""Training loop, evaluation and run-directory artifacts."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint
from .autograd import Tape, Tensor
from .config import ExperimentConfig
from .cvlr import code_consistency_loss
from .data import N_CLASSES, Dataset, Split, generate_dataset
from .errors import DivergenceError, NonFiniteError
from .functional import nearest_resize
from .losses import (
    ConfusionAccumulator,
    LossWeights,
    cls_loss,
    mask_consistency_loss,
    metrics,
    seg_loss,
    total_loss,
)
from .model import ToyNet
from .mvmc import RefineConfig, calibrate, warp_targets
from .transforms import ColorDistortion, ViewSpec, make_views, random_crop

log = logging.getLogger(__name__)

CSV_SCHEMA = "v1"
CSV_COLUMNS = ("schema", "epoch", "split", "miou", "mfdr", "mfnr",
               "loss_total", "loss_seg", "loss_cls", "loss_mask", "loss_fact")
LOSS_KEYS = ("total", "seg", "cls", "mask", "fact")


class SGD:
    """Momentum SGD with decoupled-from-loss L2 weight decay added to the gradient."""

    def __init__(self, params: dict, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                 clip_norm: float = 0.0):
        self.params = params
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.clip_norm = clip_norm
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        scale = 1.0
        if self.clip_norm > 0:
            norm = np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in self.params.values() if p.grad is not None))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for name, p in self.params.items():
            g = p.grad * scale if p.grad is not None else 0.0
            g = g + self.weight_decay * p.data
            v = self.velocity[name] = self.momentum * self.velocity[name] + g
            p.data = p.data - self.lr * v
            p.grad = None


class Adam(SGD):
    """Adam with L2 weight decay folded into the gradient; same clipping as :class:`SGD`."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), weight_decay: float = 0.0,
                 clip_norm: float = 0.0, eps: float = 1e-8):
        super().__init__(params, lr, 0.0, weight_decay, clip_norm)
        self.betas, self.eps, self.t = betas, eps, 0
        self.second = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        scale = 1.0
        if self.clip_norm > 0:
            norm = np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in self.params.values() if p.grad is not None))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        self.t += 1
        b1, b2 = self.betas
        for name, p in self.params.items():
            g = p.grad * scale if p.grad is not None else np.zeros_like(p.data)
            g = g + self.weight_decay * p.data
            m = self.velocity[name] = b1 * self.velocity[name] + (1 - b1) * g
            v = self.second[name] = b2 * self.second[name] + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None


def learning_rate(o, step: int, total_steps: int) -> float:
    """``poly`` decays as (1 - step/total)^0.9, the usual segmentation schedule."""
    if o.schedule == "poly":
        return o.lr * (1.0 - step / total_steps) ** 0.9
    return o.lr


def build_model(cfg: ExperimentConfig) -> ToyNet:
    c = cfg.cvlr
    return ToyNet(cfg.seed, N_CLASSES, d_model=c.d_model, d=c.d, use_cvlr=c.enabled,
                  aux_background_logit=1.0 if c.fixed_background else None)


def view_spec(cfg: ExperimentConfig) -> ViewSpec:
    v = cfg.views
    color = ColorDistortion(v.brightness, v.contrast, v.saturation, v.hue)
    return ViewSpec(tuple(v.scales), v.flip, color, v.crop)


def epoch_order(split: Split, oversample: int, batch_size: int, rng: np.random.Generator) -> list:
    """Shuffled mini-batches; pixel-labelled samples appear ``oversample`` times."""
    idx = np.arange(len(split))
    reps = np.where(split.has_pixels, max(oversample, 1), 1)
    order = rng.permutation(np.repeat(idx, reps))
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def train_step(net: ToyNet, split: Split, batch: np.ndarray, cfg: ExperimentConfig,
               weights: LossWeights, rng: np.random.Generator) -> tuple:
    """Forward, losses and backward for one mini-batch; returns (total tensor, loss dict)."""
    crops = [random_crop(split.images[i], split.masks[i], cfg.views.crop, rng) for i in batch]
    images = np.stack([c[0] for c in crops])
    gt = np.stack([c[1] for c in crops])
    has_pixels = split.has_pixels[batch]
    has_labels = split.has_labels[batch]
    labels = split.labels[batch]
    views = make_views(images, view_spec(cfg), rng)
    geoms = views.geoms
    c = cfg.cvlr
    latent_reg = c.enabled and c.latent_reg

    with Tape() as tape:
        out = net.forward([v.images for v in views.views], c.tau, c.iterations, c.shared_dictionary)
        m = cfg.mvmc
        refine_cfg = RefineConfig(m.refine_iterations, m.kernel_size, m.sigma_color) if m.refine else None
        known = np.where(has_labels[:, None], labels, 1.0) if m.filter_absent else None
        pseudo = calibrate([lg.data for lg in out.logits], geoms, images, m.gamma, refine_cfg, m.tie_band, known)
        targets = np.where(has_pixels[:, None, None], gt, pseudo.targets())
        view_targets = warp_targets(targets, geoms)
        sample_weight = np.where(has_pixels, cfg.optim.pixel_loss_scale, 1.0)

        l_seg = seg_loss(out.logits, view_targets, sample_weight)
        l_cls = cls_loss(out.logits, labels, has_labels)
        if latent_reg:
            aux_targets = [nearest_resize(t, a.shape[-2:]) for t, a in zip(view_targets, out.aux_logits)]
            l_seg = l_seg + seg_loss(out.aux_logits, aux_targets, sample_weight)
            l_cls = l_cls + cls_loss(out.aux_logits, labels, has_labels)
            l_fact = code_consistency_loss(out.codes, geoms)
        else:
            l_fact = Tensor(0.0)
        l_mask = mask_consistency_loss(out.logits, geoms, labels, has_labels | has_pixels,
                                       space=cfg.loss.mask_space)
        total = total_loss(weights, l_seg, l_cls, l_mask, l_fact)
    tape.backward(total)
    losses = dict(zip(LOSS_KEYS, (total.item(), l_seg.item(), l_cls.item(), l_mask.item(), l_fact.item())))
    return total, losses


def evaluate(net: ToyNet, split: Split, cfg: ExperimentConfig) -> tuple:
    """Single-view inference (no calibration) against ground-truth masks."""
    pred = net.predict(split.images, cfg.cvlr.tau, cfg.cvlr.iterations)
    conf = ConfusionAccumulator(N_CLASSES).update(split.masks, pred)
    return metrics(conf)


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass
class TrainResult:
    rows: list = field(default_factory=list)
    net: Optional[ToyNet] = None

    @property
    def final(self) -> dict:
        return self.rows[-1]

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: (_fmt(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


def train(cfg: ExperimentConfig, out_dir=None, dataset: Optional[Dataset] = None, write: bool = True) -> TrainResult:
    """Train from scratch; deterministic given the configuration."""
    cfg.validate()
    out = Path(out_dir if out_dir is not None else cfg.out)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved").write_text(cfg.to_text())
    data = dataset if dataset is not None else generate_dataset(cfg.dataset)
    net = build_model(cfg)
    params = net.parameters()
    o = cfg.optim
    if o.optimizer == "adam":
        opt = Adam(params, o.lr, weight_decay=o.weight_decay, clip_norm=o.clip_norm)
    else:
        opt = SGD(params, o.lr, o.momentum, o.weight_decay, o.clip_norm)
    rng = np.random.default_rng(cfg.seed)
    base = LossWeights(cfg.loss.seg, cfg.loss.cls, cfg.loss.reg, cfg.loss.warmup_epochs)
    result = TrainResult(net=net)

    steps_per_epoch = len(epoch_order(data.train, o.pixel_oversample, o.batch_size, np.random.default_rng(0)))
    total_steps = max(o.epochs * steps_per_epoch, 1)
    for epoch in range(cfg.optim.epochs):
        weights = base.at_epoch(epoch)
        sums = dict.fromkeys(LOSS_KEYS, 0.0)
        batches = epoch_order(data.train, cfg.optim.pixel_oversample, cfg.optim.batch_size, rng)
        for step, batch in enumerate(batches):
            opt.lr = learning_rate(o, epoch * steps_per_epoch + step, total_steps)
            try:
                _, losses = train_step(net, data.train, batch, cfg, weights, rng)
                if not np.isfinite(losses["total"]):
                    raise NonFiniteError("non-finite total loss")
                opt.step()
                for name, p in params.items():
                    if not np.all(np.isfinite(p.data)):
                        raise NonFiniteError(f"parameter {name} became non-finite")
            except NonFiniteError as exc:
                if write:
                    snapshot = {"epoch": epoch, "step": step, "error": str(exc), "last_epoch_losses": sums}
                    (out / "divergence.json").write_text(json.dumps(snapshot, indent=2))
                raise DivergenceError(f"training diverged at epoch {epoch} step {step}: {exc}") from exc
            for k in LOSS_KEYS:
                sums[k] += losses[k]
        miou, mfdr, mfnr = evaluate(net, data.val, cfg)
        row = {"schema": CSV_SCHEMA, "epoch": epoch, "split": "val", "miou": miou, "mfdr": mfdr, "mfnr": mfnr}
        row.update({f"loss_{k}": sums[k] / max(len(batches), 1) for k in LOSS_KEYS})
        result.rows.append(row)
        log.info("epoch %d  mIoU %.4f  mFDR %.4f  mFNR %.4f  loss %.4f", epoch, miou, mfdr, mfnr, row["loss_total"])
        if write:
            (out / "metrics.csv").write_text(result.csv_text())
            every = cfg.optim.checkpoint_every
            if every and (epoch + 1) % every == 0:
                checkpoint.save(out / "checkpoints" / f"epoch_{epoch + 1:03d}.bin", params)
    if write:
        (out / "metrics.csv").write_text(result.csv_text())
        checkpoint.save(out / "checkpoints" / "final.bin", params)
    return result
