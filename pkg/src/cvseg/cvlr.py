"""Cross-view low-rank feature module.

Encoder features of every view are projected, jointly factorised against a
shared dictionary, reconstructed from the resulting low-rank factors, projected
back and added to the input.  An auxiliary head predicts per-pixel class
logits whose softmax initialises the codes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import functional as F
from .autograd import Tensor
from .errors import DimensionError
from .factorization import factorize
from .layers import Conv2d, he_normal
from .losses import pairwise_l1


@dataclass
class CvlrOutput:
    refined: list
    aux_logits: list
    codes: list
    state: object


class CvlrParams:
    """Projectors and auxiliary head of the module.

    ``k`` is the number of atoms and equals the number of classes (background
    included) so that the codes live in the class space.  As in the decoder
    head, ``background_logit`` pins atom 0's logit to a constant.
    """

    def __init__(self, rng: np.random.Generator, d_model: int, k: int, d: int = 256, aux_hidden: int = 32,
                 background_logit: Optional[float] = None):
        self.d_model, self.k, self.d = d_model, k, d
        self.background_logit = background_logit
        self.in_proj = he_normal(rng, (d, d_model), d_model)
        # zero init: the module starts as the identity (skip path only)
        self.out_proj = Tensor(np.zeros((d_model, d)), requires_grad=True)
        self.aux1 = Conv2d(rng, d_model, aux_hidden, 3)
        self.aux2 = Conv2d(rng, aux_hidden, k - (background_logit is not None), 1)

    def aux_head(self, x: Tensor) -> Tensor:
        z = self.aux2(F.relu(self.aux1(x)))
        if self.background_logit is None:
            return z
        bg = Tensor(np.full((z.shape[0], 1) + z.shape[2:], self.background_logit))
        return F.concat([bg, z], axis=1)

    def parameters(self, prefix: str = "") -> dict:
        params = {f"{prefix}in_proj": self.in_proj, f"{prefix}out_proj": self.out_proj}
        params.update(self.aux1.parameters(f"{prefix}aux1."))
        params.update(self.aux2.parameters(f"{prefix}aux2."))
        return params


def forward(
    features: Sequence[Tensor],
    params: CvlrParams,
    tau: float = 1.0,
    T: int = 1,
    shared: bool = True,
) -> CvlrOutput:
    """Refine NCHW feature maps of every view; output shapes equal input shapes."""
    if not features:
        raise DimensionError("cvlr.forward needs at least one view")
    X, C, shapes = [], [], []
    aux = []
    for f in features:
        if f.ndim != 4 or f.shape[1] != params.d_model:
            raise DimensionError(f"feature map {f.shape} does not match d_model={params.d_model}")
        n, _, h, w = f.shape
        shapes.append((n, h, w))
        z = params.aux_head(f)
        aux.append(z)
        C.append(F.softmax(F.reshape(z, (n, params.k, h * w)), axis=1))
        X.append(F.matmul(params.in_proj, F.reshape(f, (n, params.d_model, h * w))))
    state, recon = factorize(X, C, tau, T, shared=shared)
    refined, codes = [], []
    for f, xr, c, (n, h, w) in zip(features, recon, state.codes, shapes):
        back = F.reshape(F.matmul(params.out_proj, xr), (n, params.d_model, h, w))
        refined.append(f + back)
        codes.append(F.reshape(c, (n, params.k, h, w)))
    return CvlrOutput(refined, aux, codes, state)


def code_consistency_loss(codes: Sequence[Tensor], geoms: Sequence, target_shape: Optional[tuple] = None) -> Tensor:
    """Mean per-pixel L1 distance between inverse-transformed code maps of all view pairs."""
    return pairwise_l1(codes, geoms, target_shape)
