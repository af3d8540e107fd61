"""Small Siamese encoder-decoder with a cross-view low-rank bottleneck."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import cvlr
from . import functional as F
from .autograd import Tensor
from .layers import Conv2d


@dataclass
class NetOutput:
    logits: list        # per view (N, K, h_v, w_v) at view input resolution
    aux_logits: list    # per view (N, K, h_v/4, w_v/4); empty without CVLR
    codes: list         # per view (N, K, h_v/4, w_v/4); empty without CVLR


class ToyNet:
    """Encoder with output stride 4, optional CVLR module, light decoder.

    All views go through the same parameter objects; there is exactly one
    parameter store, returned by :meth:`parameters`.
    """

    def __init__(self, seed: int, n_classes: int, d_model: int = 64, d: int = 256, use_cvlr: bool = True,
                 widths: tuple = (16, 32, 64), background_logit: Optional[float] = 1.0,
                 aux_background_logit: Optional[float] = 1.0):
        rng = np.random.default_rng(seed)
        c1, c2, c3 = widths
        self.n_classes = n_classes
        self.enc1 = Conv2d(rng, 3, c1, 3)
        self.enc2 = Conv2d(rng, c1, c2, 3, stride=2)
        self.enc3 = Conv2d(rng, c2, c3, 3, stride=2)
        self.enc4 = Conv2d(rng, c3, d_model, 3)
        self.background_logit = background_logit
        self.cvlr: Optional[cvlr.CvlrParams] = None
        if use_cvlr:
            self.cvlr = cvlr.CvlrParams(rng, d_model, n_classes, d, background_logit=aux_background_logit)
        self.dec1 = Conv2d(rng, d_model, c2, 3)
        self.dec2 = Conv2d(rng, 2 * c2, c2, 3)
        # With a fixed background logit the head only scores foreground classes.
        self.head = Conv2d(rng, c2, n_classes - (background_logit is not None), 1)
        self.head.weight.data *= 0.1

    def parameters(self) -> dict:
        params = {}
        for name in ("enc1", "enc2", "enc3", "enc4", "dec1", "dec2", "head"):
            params.update(getattr(self, name).parameters(f"{name}."))
        if self.cvlr is not None:
            params.update(self.cvlr.parameters("cvlr."))
        return params

    def encode(self, x: Tensor) -> tuple:
        shallow = F.relu(self.enc2(F.relu(self.enc1(x - 0.5))))
        deep = F.relu(self.enc4(F.relu(self.enc3(shallow))))
        return shallow, deep

    def decode(self, shallow: Tensor, deep: Tensor, size: tuple) -> Tensor:
        y = F.relu(self.dec1(deep))
        y = F.bilinear_resize(y, shallow.shape[-2:])
        y = F.relu(self.dec2(F.concat([y, shallow], axis=1)))
        y = self.head(y)
        if self.background_logit is not None:
            bg = Tensor(np.full((y.shape[0], 1) + y.shape[2:], self.background_logit))
            y = F.concat([bg, y], axis=1)
        return F.bilinear_resize(y, size)

    def forward(self, images: Sequence[Tensor], tau: float = 1.0, T: int = 1, shared: bool = True) -> NetOutput:
        """Run every view (NCHW tensors) through the shared network."""
        encoded = [self.encode(x) for x in images]
        deep = [e[1] for e in encoded]
        aux, codes = [], []
        if self.cvlr is not None:
            out = cvlr.forward(deep, self.cvlr, tau, T, shared)
            deep, aux, codes = out.refined, out.aux_logits, out.codes
        logits = [self.decode(e[0], f, x.shape[-2:]) for e, f, x in zip(encoded, deep, images)]
        return NetOutput(logits, aux, codes)

    def predict(self, images: np.ndarray, tau: float = 1.0, T: int = 1, batch: int = 16) -> np.ndarray:
        """Single-view inference on (N, H, W, 3) images; returns (N, H, W) labels."""
        preds = []
        for i in range(0, len(images), batch):
            x = Tensor(np.ascontiguousarray(images[i:i + batch].transpose(0, 3, 1, 2)))
            out = self.forward([x], tau, T)
            preds.append(out.logits[0].data.argmax(axis=1))
        return np.concatenate(preds)
