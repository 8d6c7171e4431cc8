"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, mul, sum_


def random_projection(out: Tensor, seed: int) -> Tensor:
    """Reduce ``out`` to a scalar ``sum(out * R)`` with a fixed random ``R``.

    ``R`` is drawn from a stream keyed on ``seed`` but distinct from
    ``default_rng(seed)``, so it never coincides with test inputs.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    return sum_(mul(out, Tensor(rng.standard_normal(out.shape))))


def numerical_gradient(
    loss_fn: Callable[[], Tensor], wrt: Tensor, eps: float = 1e-3
) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. every element of ``wrt``."""
    flat = wrt.data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = float(loss_fn().data)
        flat[i] = orig - eps
        minus = float(loss_fn().data)
        flat[i] = orig
        grad[i] = (plus - minus) / (2 * eps)
    return grad.reshape(wrt.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(
    loss_fn: Callable[[], Tensor], wrt: Sequence[Tensor], eps: float = 1e-3
) -> list[float]:
    """Relative error between autodiff and finite differences, per input."""
    for t in wrt:
        t.grad = None
    loss_fn().backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in wrt]
    return [
        relative_error(g, numerical_gradient(loss_fn, t, eps)) for g, t in zip(analytic, wrt)
    ]
