"""Central-difference gradient oracle for the autodiff core."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def _scalar(value) -> float:
    return value.item() if isinstance(value, Tensor) else float(value)


def numerical_gradient(f: Callable[[], Tensor | float], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` with respect to every entry of ``param``.

    ``f`` is re-evaluated from scratch for each perturbation, so it must rebuild
    its forward graph on every call.
    """
    flat = param.data.reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = _scalar(f())
        flat[i] = orig - step
        lo = _scalar(f())
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return out.reshape(param.shape)


def analytic_gradients(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    return [np.zeros(p.shape) if p.grad is None else np.array(p.grad) for p in params]


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return np.abs(a - b) / denom


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """Largest elementwise relative error between backward() and central differences.

    NaN anywhere in either gradient is reported as ``inf`` so callers comparing
    against a tolerance see a failure.
    """
    params = list(params)
    analytic = analytic_gradients(f, params)
    worst = 0.0
    for p, a in zip(params, analytic):
        n = numerical_gradient(f, p, step)
        if not (np.isfinite(a).all() and np.isfinite(n).all()):
            return float("inf")
        if a.size:
            worst = max(worst, float(relative_error(a, n).max()))
    for p in params:
        p.zero_grad()
    return worst
