"""Collective matrix factorisation over multiple views.

Every view contributes a feature matrix ``X[v]`` of shape ``(..., d, n_v)``.
All views share one dictionary ``D`` of shape ``(..., d, k)``; each view has
its own code matrix ``C[v]`` of shape ``(..., k, n_v)`` whose columns are
distributions over the ``k`` atoms.  Leading axes are batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import functional as F
from .autograd import Tensor, as_tensor
from .errors import ConfigError, DegenerateAtomError, DimensionError, ParameterError

EPS = 1e-6


@dataclass
class FactorState:
    dictionary: Tensor
    codes: list
    temperature: float
    iterations: int
    trace: list = field(default_factory=list)


def _check_pairs(X: Sequence[Tensor], C: Sequence[Tensor]) -> None:
    if len(X) != len(C) or not X:
        raise DimensionError(f"need one code matrix per view, got {len(X)} views and {len(C)} codes")
    for v, (x, c) in enumerate(zip(X, C)):
        if x.shape[-1] != c.shape[-1]:
            raise DimensionError(f"view {v}: X {x.shape} and C {c.shape} disagree on column count")


def update_dictionary(X, C, eps: float = EPS, fallback: Optional[Tensor] = None) -> Tensor:
    """Code-weighted mean of the features of all views, one column per atom.

    ``eps`` is added to each atom's total weight.  With ``eps == 0`` an atom
    that received no weight raises :class:`DegenerateAtomError` unless a
    ``fallback`` dictionary is given, whose column is then kept instead.
    """
    X = [as_tensor(x) for x in X]
    C = [as_tensor(c) for c in C]
    _check_pairs(X, C)
    num = None
    weight = None
    for x, c in zip(X, C):
        term = F.matmul(x, F.swapaxes(c, -1, -2))
        num = term if num is None else num + term
        s = F.sum(c, axis=-1)
        weight = s if weight is None else weight + s
    w = weight.data
    empty = w <= 0
    if eps > 0:
        return num / F.reshape(weight + eps, weight.shape[:-1] + (1, weight.shape[-1]))
    if empty.any():
        if fallback is None:
            raise DegenerateAtomError(f"atoms {np.flatnonzero(empty.reshape(-1))} have zero total code weight")
        safe = weight + Tensor(empty.astype(np.float64))
        D = num / F.reshape(safe, safe.shape[:-1] + (1, safe.shape[-1]))
        keep = Tensor(np.broadcast_to(empty[..., None, :], D.shape).astype(np.float64))
        return D * (1.0 - keep) + as_tensor(fallback) * keep
    return num / F.reshape(weight, weight.shape[:-1] + (1, weight.shape[-1]))


def atom_similarity(x: Tensor, D: Tensor, metric: str = "cosine", eps: float = EPS) -> Tensor:
    """Score of every column of ``x`` against every atom, shape (..., k, n)."""
    if metric == "cosine":
        norms = F.sqrt(F.sum(D * D, axis=-2, keepdims=True) + eps * eps)  # finite gradient at a zero atom
        return F.matmul(F.swapaxes(D / norms, -1, -2), x)
    if metric == "euclidean":
        # -1/2 ||x - d||^2 up to a per-column constant that softmax/argmax ignore.
        half_sq = 0.5 * F.swapaxes(F.sum(D * D, axis=-2, keepdims=True), -1, -2)
        return F.matmul(F.swapaxes(D, -1, -2), x) - half_sq
    raise ParameterError(f"unknown similarity metric {metric!r}")


def update_codes(X, D, tau: float = 1.0, metric: str = "cosine", eps: float = EPS) -> list:
    """Soft assignment of each view's columns to the atoms of ``D``.

    The default ``cosine`` metric normalises each atom to unit length before
    the dot product.  ``euclidean`` uses the K-means energy instead, whose
    low-temperature limit is the nearest-centroid assignment.
    """
    if not tau > 0:
        raise ParameterError(f"temperature must be > 0, got {tau}")
    D = as_tensor(D)
    return [F.softmax(atom_similarity(as_tensor(x), D, metric, eps), axis=-2, temperature=tau) for x in X]


def hard_codes(X, D) -> list:
    """One-hot nearest-atom (squared Euclidean) assignment; ties go to the lowest index."""
    D = as_tensor(D)
    codes = []
    for x in X:
        sim = atom_similarity(as_tensor(x), D, "euclidean").data
        idx = np.argmax(sim, axis=-2)
        codes.append(Tensor(_one_hot(idx, D.shape[-1], axis=-2)))
    return codes


def _one_hot(idx: np.ndarray, k: int, axis: int) -> np.ndarray:
    out = np.moveaxis(np.eye(k)[idx], -1, axis)
    return np.ascontiguousarray(out)


def reconstruct(D, C) -> list:
    D = as_tensor(D)
    return [F.matmul(D, as_tensor(c)) for c in C]


def factorize(
    X,
    init_C,
    tau: float = 1.0,
    T: int = 1,
    *,
    shared: bool = True,
    hard: bool = False,
    metric: str = "cosine",
    eps: float = EPS,
    keep_trace: bool = False,
):
    """Alternate dictionary and code updates ``T`` times, then reconstruct.

    Returns ``(state, reconstructions)``.  With ``shared=False`` every view is
    factorised against its own dictionary (``state.dictionary`` is then a
    list).  ``hard=True`` runs Lloyd iterations with one-hot codes: centroid
    step with empty clusters keeping their previous centroid, then nearest
    centroid assignment.
    """
    X = [as_tensor(x) for x in X]
    C = [as_tensor(c) for c in init_C]
    _check_pairs(X, C)
    if T < 0:
        raise ParameterError(f"iteration count must be >= 0, got {T}")
    if not tau > 0:
        raise ParameterError(f"temperature must be > 0, got {tau}")
    d, k = X[0].shape[-2], C[0].shape[-2]
    n_total = sum(x.shape[-1] for x in X)
    if not (k < d and k < n_total):
        raise ConfigError("k", f"latent dimension {k} must be below d={d} and n={n_total}")

    if not shared:
        states = [factorize([x], [c], tau, T, hard=hard, metric=metric, eps=eps, keep_trace=keep_trace)
                  for x, c in zip(X, C)]
        state = FactorState(
            [s.dictionary for s, _ in states],
            [s.codes[0] for s, _ in states],
            tau, T,
            [s.trace for s, _ in states],
        )
        return state, [r[0] for _, r in states]

    trace = []
    D = None
    for _ in range(T):
        if hard:
            D = update_dictionary(X, C, eps=0.0, fallback=D)
            C = hard_codes(X, D)
        else:
            D = update_dictionary(X, C, eps=eps)
            C = update_codes(X, D, tau, metric, eps)
        if keep_trace:
            trace.append((D.data.copy(), [c.data.copy() for c in C]))
    if D is None:
        D = update_dictionary(X, C, eps=0.0 if hard else eps)
    return FactorState(D, C, tau, T, trace), reconstruct(D, C)


def vq_objective(X, D, C, squared: bool = False) -> float:
    """Sum over views of the Frobenius reconstruction error ``||X - D C||``."""
    D = np.asarray(D.data if isinstance(D, Tensor) else D)
    total = 0.0
    for x, c in zip(X, C):
        x = x.data if isinstance(x, Tensor) else np.asarray(x)
        c = c.data if isinstance(c, Tensor) else np.asarray(c)
        sq = float(np.sum((x - D @ c) ** 2))
        total += sq if squared else np.sqrt(sq)
    return total
