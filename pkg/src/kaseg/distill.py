"""Distillation objectives: translator reconstruction, feature adaptation,
affinity transfer, and the KD / FitNet comparison baselines.

Matrix and feature norms are averaged rather than summed so that loss
magnitudes do not depend on resolution.  Frozen networks (teacher, encoder)
are always evaluated under ``no_grad``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import functional as F
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    abs_,
    add,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    scale,
    square,
    sub,
    sum_,
    transpose,
)

EPS = F.NORM_EPS

Net = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class DistillWeights:
    alpha: float = 1e-7  # code sparsity in the translator objective
    beta: float = 50.0  # feature adaptation
    gamma: float = 1.0  # affinity transfer
    p: int = 2  # distance order between normalized vectors
    q: int = 2  # per-position normalization order

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.p not in (1, 2):
            raise ValueError(f"p must be 1 or 2, got {self.p}")
        if self.q < 1:
            raise ValueError(f"q must be >= 1, got {self.q}")


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# translator


def reconstruction_terms(phi_t: Tensor, encoder: Net, decoder: Net) -> tuple[Tensor, Tensor]:
    """Mean squared reconstruction error and mean absolute code value."""
    code = encoder(phi_t)
    recon = decoder(code)
    _same_shape(recon, phi_t, "reconstruction round trip")
    return mean(square(sub(phi_t, recon))), mean(abs_(code))


def reconstruction_loss(phi_t: Tensor, encoder: Net, decoder: Net, alpha: float) -> Tensor:
    mse, l1 = reconstruction_terms(phi_t, encoder, decoder)
    if alpha == 0:
        return mse
    return add(mse, scale(l1, alpha))


# ---------------------------------------------------------------------------
# adaptation


def encode_frozen(encoder: Net, phi_t: Tensor) -> Tensor:
    with no_grad():
        return encoder(phi_t.detach())


def adaptation_from_code(adapted: Tensor, code: Tensor, p: int = 2, q: int = 2) -> Tensor:
    """Mean over positions of the order-``p`` distance between per-position
    channel vectors, each normalized by its order-``q`` norm.  ``p=2`` uses
    the squared distance."""
    _same_shape(adapted, code, "adaptation loss")
    n, _, h, w = adapted.shape
    diff = sub(F.normalize(adapted, axis=1, order=q), F.normalize(code.detach(), axis=1, order=q))
    per_elem = square(diff) if p == 2 else abs_(diff)
    return scale(sum_(per_elem), 1.0 / (n * h * w))


def adaptation_loss(phi_s: Tensor, phi_t: Tensor, adapter: Net, encoder: Net,
                    p: int = 2, q: int = 2) -> Tensor:
    return adaptation_from_code(adapter(phi_s), encode_frozen(encoder, phi_t), p, q)


# ---------------------------------------------------------------------------
# affinity


def affinity_matrix(features: Tensor) -> Tensor:
    """Batched ``(N, m, m)`` affinity, ``A[i, j] = <v_i, v_j> / m`` with
    ``v`` the L2-normalized channel vector at each of the ``m = h*w`` positions."""
    if features.ndim != 4:
        raise ShapeError(f"affinity_matrix expects N,C,H,W features, got {features.shape}")
    n, c, h, w = features.shape
    m = h * w
    v = reshape(F.normalize(features, axis=1, order=2), (n, c, m))
    gram = matmul(transpose(v, (0, 2, 1)), v)
    return scale(gram, 1.0 / m)


def affinity_from_code(adapted: Tensor, code: Tensor) -> Tensor:
    """Mean over samples of the mean squared difference of affinity matrices."""
    if adapted.shape[0] != code.shape[0] or adapted.shape[2:] != code.shape[2:]:
        raise ShapeError(
            f"affinity loss: spatial grids differ, {adapted.shape[2:]} vs {code.shape[2:]}"
        )
    with no_grad():
        target = affinity_matrix(code.detach())
    return mean(square(sub(affinity_matrix(adapted), target)))


def affinity_loss(phi_s: Tensor, phi_t: Tensor, affinity_adapter: Net, encoder: Net) -> Tensor:
    return affinity_from_code(affinity_adapter(phi_s), encode_frozen(encoder, phi_t))


# ---------------------------------------------------------------------------
# baselines


def kd_soft_loss(student_logits: Tensor, teacher_logits: Tensor, temperature: float) -> Tensor:
    """Temperature-softened KL(teacher || student) per pixel, averaged, times T^2.

    Student logits are bilinearly resized to the teacher's resolution first.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    n, k, h, w = teacher_logits.shape
    if student_logits.shape[:2] != (n, k):
        raise ShapeError(f"logit batch/class mismatch {student_logits.shape} vs {teacher_logits.shape}")
    if student_logits.shape[2:] != (h, w):
        student_logits = F.upsample_bilinear(student_logits, h, w)
    with no_grad():
        log_pt = F.log_softmax(scale(teacher_logits.detach(), 1.0 / temperature), axis=1).data
    pt = np.exp(log_pt)
    log_ps = F.log_softmax(scale(student_logits, 1.0 / temperature), axis=1)
    kl = sum_(mul(Tensor(pt), sub(Tensor(log_pt), log_ps)))
    return scale(kl, temperature**2 / (n * h * w))


def fitnet_loss(phi_s: Tensor, phi_t: Tensor, projection: Net) -> Tensor:
    """Upsample student features to the teacher grid, project channels, MSE."""
    h, w = phi_t.shape[2:]
    up = F.upsample_bilinear(phi_s, h, w)
    projected = projection(up)
    _same_shape(projected, phi_t, "fitnet loss")
    return mean(square(sub(projected, phi_t.detach())))


# ---------------------------------------------------------------------------
# combination


def total_student_loss(
    ce: Tensor,
    adapt: Optional[Tensor],
    aff: Optional[Tensor],
    weights: DistillWeights,
) -> Tensor:
    """``ce + beta * adapt + gamma * aff``; zero-weighted terms are skipped."""
    parts = {"ce": ce, "adapt": adapt, "aff": aff}
    for name, value in parts.items():
        if value is not None and not math.isfinite(value.item()):
            raise NonFiniteError(f"loss component '{name}' is not finite ({value.item()})")
    total = ce
    if weights.beta and adapt is not None:
        total = add(total, scale(adapt, weights.beta))
    if weights.gamma and aff is not None:
        total = add(total, scale(aff, weights.gamma))
    return total
