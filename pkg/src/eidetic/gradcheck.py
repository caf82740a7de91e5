"""Finite-difference oracle for checking analytic gradients.

The oracle only ever evaluates the forward pass, so it stays independent of
the backward rules it is used to check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, zero_grad

# Denominator floor for the per-scalar relative error; gradients smaller than
# this are compared on an absolute scale of FD_FLOOR * rel_tol.
FD_FLOOR = 1e-6
DEFAULT_STEP = 1e-3


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    worst_index: int
    analytic: float
    numeric: float


def numeric_grad(loss_fn: Callable[[], Tensor], param: Tensor, step: float = DEFAULT_STEP) -> np.ndarray:
    """Fourth-order central differences of ``loss_fn()`` w.r.t. every scalar of ``param``.

    The five-point stencil has O(step^4) truncation error, so a fairly large
    step keeps round-off small even for gradients near 1e-6.
    """
    original = param.data
    flat = original.reshape(-1).copy()
    out = np.empty_like(flat)

    def at(i, offset):
        flat[i] = keep + offset
        param.data = flat.reshape(original.shape).copy()
        return loss_fn().item()

    try:
        for i in range(flat.size):
            keep = flat[i]
            out[i] = (8.0 * (at(i, step) - at(i, -step)) - (at(i, 2 * step) - at(i, -2 * step))) / (12.0 * step)
            flat[i] = keep
    finally:
        param.data = original
    return out.reshape(original.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FD_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(loss_fn: Callable[[], Tensor], named_params: Sequence[tuple[str, Tensor]],
                    step: float = DEFAULT_STEP) -> list[GradCheckResult]:
    """Compare backward() against central differences for each named tensor."""
    params = [p for _, p in named_params]
    zero_grad(params)
    loss_fn().backward()
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy()
                for name, p in named_params}
    results = []
    for name, p in named_params:
        num = numeric_grad(loss_fn, p, step)
        err = relative_error(analytic[name], num).reshape(-1)
        k = int(np.argmax(err))
        results.append(GradCheckResult(name, float(err[k]), k,
                                       float(analytic[name].reshape(-1)[k]), float(num.reshape(-1)[k])))
    zero_grad(params)
    return results
