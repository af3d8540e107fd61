"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tape, Tensor


def numeric_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5) -> list:
    """d(sum fn(*arrays))/d(array) for every array, by central differences."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(np.sum(fn(*[Tensor(x) for x in arrays]).data))
            flat[i] = orig - h
            fm = float(np.sum(fn(*[Tensor(x) for x in arrays]).data))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list:
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves).sum()
    tape.backward(out)
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in leaves]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Largest relative error between analytic and numeric gradients over all inputs."""
    ana = analytic_grad(fn, arrays)
    num = numeric_grad(fn, arrays, h)
    return max(relative_error(a, n) for a, n in zip(ana, num))
