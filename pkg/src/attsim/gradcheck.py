"""Central finite-difference gradient checking in float64."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, precision


def numerical_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-3) -> list[np.ndarray]:
    grads = []
    for t in inputs:
        g = np.zeros_like(t.data)
        flat, gflat = t.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn(*inputs).item()
            flat[i] = orig - eps
            fm = fn(*inputs).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), with zero returned when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-12:
        return float(np.linalg.norm(analytic - numeric))
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    eps: float = 1e-3,
) -> list[float]:
    """Relative error of the analytic gradient of ``fn`` for every input array.

    ``fn`` receives float64 tensors (one per array, all requiring grad) and
    must return a scalar tensor.
    """
    with precision(np.float64):
        inputs = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        out = fn(*inputs)
        out.backward()
        analytic = [
            t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs
        ]
        numeric = numerical_grad(fn, inputs, eps)
    return [relative_error(a, n) for a, n in zip(analytic, numeric)]
