"""SGD with momentum and L2 weight decay, plus the poly learning-rate schedule."""

from __future__ import annotations

from typing import Iterable, Mapping, MutableMapping, Optional

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor


def poly_lr(base_lr: float, iteration: int, max_iterations: int, power: float = 0.9) -> float:
    """``base_lr * (1 - iteration / max_iterations) ** power``."""
    if max_iterations <= 0:
        raise ValueError("max_iterations must be positive")
    if iteration < 0 or iteration > max_iterations:
        raise ValueError(f"iteration {iteration} outside [0, {max_iterations}]")
    return base_lr * (1.0 - iteration / max_iterations) ** power


def sgd_step(
    params: Iterable[np.ndarray],
    grads: Iterable[Optional[np.ndarray]],
    velocity: Iterable[np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float | Iterable[float],
) -> None:
    """In-place update ``v = momentum*v + grad + wd*param; param -= lr*v``.

    ``weight_decay`` may be a scalar or one value per parameter.  A ``None``
    gradient counts as zero.
    """
    params, grads, velocity = list(params), list(grads), list(velocity)
    if isinstance(weight_decay, (int, float)):
        decays = [float(weight_decay)] * len(params)
    else:
        decays = [float(d) for d in weight_decay]
    if not (len(params) == len(grads) == len(velocity) == len(decays)):
        raise ShapeError("sgd_step: params, grads, velocity and decays differ in length")
    lr_, mom = DTYPE(lr), DTYPE(momentum)
    for i, (p, g, v, wd) in enumerate(zip(params, grads, velocity, decays)):
        if p.shape != v.shape or (g is not None and g.shape != p.shape):
            raise ShapeError(f"sgd_step: shape mismatch at parameter {i}: {p.shape}")
        v *= mom
        if g is not None:
            v += g
        if wd:
            v += DTYPE(wd) * p
        p -= lr_ * v


class SGD:
    """Momentum SGD over a named parameter registry.

    ``decay`` lists which parameter names receive weight decay; the rest (BN
    affine terms, biases) are only updated by their gradients.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        momentum: float = 0.9,
        weight_decay: float = 0.0,
        decay: Optional[Iterable[str]] = None,
    ):
        self.params = dict(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay = set(self.params) if decay is None else set(decay)
        self.velocity: MutableMapping[str, np.ndarray] = {
            name: np.zeros_like(t.data) for name, t in self.params.items()
        }

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self, lr: float) -> None:
        names = list(self.params)
        sgd_step(
            [self.params[n].data for n in names],
            [self.params[n].grad for n in names],
            [self.velocity[n] for n in names],
            lr,
            self.momentum,
            [self.weight_decay if n in self.decay else 0.0 for n in names],
        )
