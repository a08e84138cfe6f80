"""Central finite-difference gradient checking in 64-bit mode."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(t.data)
    flat, gflat = t.data.reshape(-1), g.reshape(-1)
    with ag.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().data)
            flat[i] = orig - h
            down = float(fn().data)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return g


def grad_errors(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                atol: float = 1e-7) -> list[float]:
    """Per parameter, max over entries of |num - ana| / (max(|num|, |ana|) + atol / 1e-3)."""
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("gradient checks need float64 parameters; use autograd.precision")
        p.grad = None
    ag.backward(fn(), params)
    out = []
    for p in params:
        ana = p.grad if p.grad is not None else np.zeros_like(p.data)
        num = numeric_grad(fn, p, h)
        denom = np.maximum(np.abs(num), np.abs(ana)) + atol / 1e-3
        out.append(float(np.max(np.abs(num - ana) / denom)) if num.size else 0.0)
    return out


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                    rtol: float = 1e-3, atol: float = 1e-7) -> bool:
    """True iff every entry satisfies |num - ana| <= rtol * max(|num|, |ana|) + atol."""
    for p in params:
        p.grad = None
    ag.backward(fn(), params)
    ok = True
    for p in params:
        ana = p.grad if p.grad is not None else np.zeros_like(p.data)
        num = numeric_grad(fn, p, h)
        ok &= bool(np.all(np.abs(num - ana) <= rtol * np.maximum(np.abs(num), np.abs(ana)) + atol))
    return ok
