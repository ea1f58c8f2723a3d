"""Central finite-difference checks for the tape autodiff."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def relative_error(analytic: float, numeric: float, floor: float = 1e-12) -> float:
    scale = max(abs(analytic), abs(numeric))
    if scale < floor:
        return 0.0
    return abs(analytic - numeric) / scale


def central_difference(loss_fn: Callable[[], float], t: Tensor, index: tuple, h: float = 1e-5) -> float:
    """(f(x+h) - f(x-h)) / 2h for one entry of ``t``, restoring it afterwards."""
    original = t.data[index]
    t.data[index] = original + h
    up = loss_fn()
    t.data[index] = original - h
    down = loss_fn()
    t.data[index] = original
    return (up - down) / (2 * h)


def analytic_gradients(build: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    with T.Tape() as tape:
        loss = build()
    tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def max_relative_error(build: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst relative error over every entry of every input tensor."""
    grads = analytic_gradients(build, inputs)

    def value() -> float:
        return build().item()

    worst = 0.0
    for t, g in zip(inputs, grads):
        for index in np.ndindex(*t.shape):
            worst = max(worst, relative_error(g[index], central_difference(value, t, index, h)))
    return worst


def gradient_relative_error(build: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||) over all entries.

    Less sensitive than the per-entry ratio to entries whose true gradient is
    near the finite-difference rounding floor (about 1e-11 absolute here).
    """
    grads = analytic_gradients(build, inputs)

    def value() -> float:
        return build().item()

    a, n = [], []
    for t, g in zip(inputs, grads):
        for index in np.ndindex(*t.shape):
            a.append(g[index])
            n.append(central_difference(value, t, index, h))
    a, n = np.asarray(a), np.asarray(n)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - n) / scale)
