"""Differentiable neural-network primitives on :class:`~kaseg.tensor.Tensor`.

Convolutions work in a channel-major ``(C, N, H, W)`` layout internally so a
whole batch is a single GEMM per group.  ``conv_transpose2d`` is implemented
as the exact input-adjoint of ``conv2d`` and shares its im2col machinery.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, make_result

IGNORE_LABEL = 255
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
NORM_EPS = 1e-8


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: tuple[int, int] = (1, 1)
    groups: int = 1
    output_padding: tuple[int, int] = (0, 0)  # transposed conv only

    def __post_init__(self):
        for name in ("kernel", "stride", "padding", "dilation", "output_padding"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )
        if min(self.dilation) < 1 or min(self.stride) < 1 or min(self.kernel) < 1:
            raise ValueError("kernel, stride and dilation must be >= 1")

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        return tuple(
            (n + 2 * p - d * (k - 1) - 1) // s + 1
            for n, k, s, p, d in zip((h, w), self.kernel, self.stride, self.padding, self.dilation)
        )

    def transposed_output_size(self, h: int, w: int) -> tuple[int, int]:
        return tuple(
            (n - 1) * s - 2 * p + d * (k - 1) + 1 + op
            for n, k, s, p, d, op in zip(
                (h, w), self.kernel, self.stride, self.padding, self.dilation, self.output_padding
            )
        )

    def weight_shape(self, transposed: bool = False) -> tuple[int, int, int, int]:
        kh, kw = self.kernel
        if transposed:
            return (self.in_channels, self.out_channels // self.groups, kh, kw)
        return (self.out_channels, self.in_channels // self.groups, kh, kw)


# ---------------------------------------------------------------------------
# im2col / col2im in (C, N, H, W) layout


def _im2col(xp: np.ndarray, kernel, stride, dilation, out_hw) -> np.ndarray:
    c, n = xp.shape[:2]
    (kh, kw), (sh, sw), (dh, dw), (ho, wo) = kernel, stride, dilation, out_hw
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=DTYPE)
    for i in range(kh):
        r0 = i * dh
        for j in range(kw):
            c0 = j * dw
            cols[:, i, j] = xp[:, :, r0 : r0 + sh * (ho - 1) + 1 : sh, c0 : c0 + sw * (wo - 1) + 1 : sw]
    return cols


def _col2im(cols: np.ndarray, padded_hw, stride, dilation) -> np.ndarray:
    c, kh, kw, n, ho, wo = cols.shape
    (sh, sw), (dh, dw) = stride, dilation
    out = np.zeros((c, n) + tuple(padded_hw), dtype=DTYPE)
    for i in range(kh):
        r0 = i * dh
        for j in range(kw):
            c0 = j * dw
            out[:, :, r0 : r0 + sh * (ho - 1) + 1 : sh, c0 : c0 + sw * (wo - 1) + 1 : sw] += cols[:, i, j]
    return out


def _pad_cn(x_cn: np.ndarray, padding) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return x_cn
    return np.pad(x_cn, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _crop_cn(xp: np.ndarray, padding, hw) -> np.ndarray:
    ph, pw = padding
    return xp[:, :, ph : ph + hw[0], pw : pw + hw[1]]


def _check_conv_input(x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec, transposed: bool):
    if x.ndim != 4:
        raise ShapeError(f"expected a 4-D N,C,H,W input, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"channel dimension (dim 1) is {x.shape[1]}, expected in_channels={spec.in_channels}"
        )
    expected = spec.weight_shape(transposed)
    if weight.shape != expected:
        raise ShapeError(f"weight shape {weight.shape} != expected {expected}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} != ({spec.out_channels},)")


def _spec_from(x, weight, transposed, stride, padding, dilation, groups, output_padding=0):
    if transposed:
        cin, cout = weight.shape[0], weight.shape[1] * groups
    else:
        cin, cout = weight.shape[1] * groups, weight.shape[0]
    return ConvSpec(
        in_channels=cin,
        out_channels=cout,
        kernel=weight.shape[2:],
        stride=stride,
        padding=padding,
        dilation=dilation,
        groups=groups,
        output_padding=output_padding,
    )


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride=1,
    padding=0,
    dilation=1,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation with stride, zero padding, dilation and groups.

    ``weight`` has shape ``(Cout, Cin // groups, kh, kw)``.
    """
    spec = _spec_from(x, weight, False, stride, padding, dilation, groups)
    _check_conv_input(x, weight, bias, spec, transposed=False)
    n, _, h, w = x.shape
    ho, wo = spec.output_size(h, w)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output would be empty ({ho}x{wo}) for input {h}x{w}")
    g = spec.groups
    cout = spec.out_channels
    k = (spec.in_channels // g) * spec.kernel[0] * spec.kernel[1]

    xp = _pad_cn(x.data.transpose(1, 0, 2, 3), spec.padding)
    cols = _im2col(xp, spec.kernel, spec.stride, spec.dilation, (ho, wo)).reshape(g, k, -1)
    wr = weight.data.reshape(g, cout // g, k)
    out = np.matmul(wr, cols).reshape(cout, n, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(grad):
        g_r = grad.transpose(1, 0, 2, 3).reshape(g, cout // g, -1)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(g_r, cols.transpose(0, 2, 1)).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = grad.sum(axis=(0, 2, 3), dtype=DTYPE)
        if x.requires_grad:
            dcols = np.matmul(wr.transpose(0, 2, 1), g_r)
            dcols = dcols.reshape((spec.in_channels,) + spec.kernel + (n, ho, wo))
            dxp = _col2im(dcols, xp.shape[2:], spec.stride, spec.dilation)
            gx = np.ascontiguousarray(_crop_cn(dxp, spec.padding, (h, w)).transpose(1, 0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride=1,
    padding=0,
    dilation=1,
    groups: int = 1,
    output_padding=0,
) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d` w.r.t. its input.

    ``weight`` has shape ``(Cin, Cout // groups, kh, kw)``; the output extent is
    ``(H - 1) * s - 2p + d * (k - 1) + 1 + output_padding``.
    """
    spec = _spec_from(x, weight, True, stride, padding, dilation, groups, output_padding)
    _check_conv_input(x, weight, bias, spec, transposed=True)
    if any(op >= max(s, d) for op, s, d in zip(spec.output_padding, spec.stride, spec.dilation)):
        raise ValueError("output_padding must be smaller than stride or dilation")
    n, cin, h, w = x.shape
    ho, wo = spec.transposed_output_size(h, w)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv_transpose2d output would be empty ({ho}x{wo})")
    g = spec.groups
    cout = spec.out_channels
    k = (cout // g) * spec.kernel[0] * spec.kernel[1]
    padded = (ho + 2 * spec.padding[0], wo + 2 * spec.padding[1])

    wr = weight.data.reshape(g, cin // g, k)
    x_r = x.data.transpose(1, 0, 2, 3).reshape(g, cin // g, -1)
    dcols = np.matmul(wr.transpose(0, 2, 1), x_r).reshape((cout,) + spec.kernel + (n, h, w))
    out = _crop_cn(_col2im(dcols, padded, spec.stride, spec.dilation), spec.padding, (ho, wo))
    if bias is not None:
        out = out + bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(grad):
        gp = _pad_cn(grad.transpose(1, 0, 2, 3), spec.padding)
        cols = _im2col(gp, spec.kernel, spec.stride, spec.dilation, (h, w)).reshape(g, k, -1)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(wr, cols).reshape(cin, n, h, w).transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gx)
        if weight.requires_grad:
            gw = np.matmul(x_r, cols.transpose(0, 2, 1)).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = grad.sum(axis=(0, 2, 3), dtype=DTYPE)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv_transpose2d")


# ---------------------------------------------------------------------------
# batch normalization


class BNState:
    """Running statistics of one batch-norm layer (mutated in train mode)."""

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM):
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)
        self.momentum = momentum


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BNState,
    training: bool,
    eps: float = BN_EPS,
) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects N,C,H,W input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm affine params must have shape ({c},)")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)

    if training:
        if m < 2:
            raise ShapeError("batch_norm in train mode needs N*H*W >= 2 (degenerate variance)")
        mu = x.data.mean(axis=axes, dtype=np.float64)
        var = x.data.var(axis=axes, dtype=np.float64)
        mom = state.momentum
        state.running_mean[:] = (1 - mom) * state.running_mean + mom * mu
        state.running_var[:] = (1 - mom) * state.running_var + mom * var * (m / (m - 1))
        mu, var = mu.astype(DTYPE), var.astype(DTYPE)
    else:
        mu, var = state.running_mean.copy(), state.running_var.copy()

    inv_std = (1.0 / np.sqrt(var + DTYPE(eps))).astype(DTYPE)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes, dtype=DTYPE) if gamma.requires_grad else None
        gb = g.sum(axis=axes, dtype=DTYPE) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                s1 = dxhat.sum(axis=axes, keepdims=True, dtype=np.float64).astype(DTYPE)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True, dtype=np.float64).astype(DTYPE)
                gx = (inv_std.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv_std.reshape(bshape)
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), backward, "batch_norm")


# ---------------------------------------------------------------------------
# resampling


def interp_matrix(in_size: int, out_size: int, align_corners: bool = False) -> np.ndarray:
    """Row-stochastic ``(out_size, in_size)`` 1-D linear interpolation matrix."""
    if out_size <= 0 or in_size <= 0:
        raise ValueError(f"sizes must be positive, got in={in_size} out={out_size}")
    dst = np.arange(out_size, dtype=np.float64)
    if align_corners:
        src = dst * ((in_size - 1) / (out_size - 1)) if out_size > 1 else np.zeros_like(dst)
    else:
        src = np.maximum((dst + 0.5) * (in_size / out_size) - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    lam = src - i0
    mat = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(mat, (rows, i0), 1.0 - lam)
    np.add.at(mat, (rows, i1), lam)
    return mat.astype(DTYPE)


def upsample_bilinear(x: Tensor, out_h: int, out_w: int, align_corners: bool = False) -> Tensor:
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear expects N,C,H,W input, got {x.shape}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return make_result(x.data.copy(), (x,), lambda g: (g,), "upsample_bilinear")
    ah = interp_matrix(h, out_h, align_corners)
    aw = interp_matrix(w, out_w, align_corners)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def backward(g):
        return (np.matmul(ah.T, np.matmul(g, aw)),)

    return make_result(out, (x,), backward, "upsample_bilinear")


# ---------------------------------------------------------------------------
# normalization and softmax family


def normalize(x: Tensor, axis: int = 1, order: float = 2.0, eps: float = NORM_EPS) -> Tensor:
    """``x / (||x||_order + eps)`` along ``axis``."""
    if order < 1:
        raise ValueError(f"norm order must be >= 1, got {order}")
    a = x.data.astype(np.float64)
    if order == 2:
        n = np.sqrt((a * a).sum(axis=axis, keepdims=True))
    elif order == 1:
        n = np.abs(a).sum(axis=axis, keepdims=True)
    else:
        n = (np.abs(a) ** order).sum(axis=axis, keepdims=True) ** (1.0 / order)
    denom = n + eps
    out = (a / denom).astype(DTYPE)

    def backward(g):
        g64 = g.astype(np.float64)
        if order == 2:
            dn = np.divide(a, n, out=np.zeros_like(a), where=n > 0)
        elif order == 1:
            dn = np.sign(a)
        else:
            scale_ = np.divide(1.0, n ** (order - 1), out=np.zeros_like(n), where=n > 0)
            dn = np.sign(a) * np.abs(a) ** (order - 1) * scale_
        proj = (g64 * a).sum(axis=axis, keepdims=True)
        return ((g64 / denom - proj / denom**2 * dn).astype(DTYPE),)

    return make_result(out, (x,), backward, "normalize")


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


def softmax(x: np.ndarray, axis: int = 1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(
    logits: Tensor, labels: np.ndarray, ignore_label: int = IGNORE_LABEL
) -> Tensor:
    """Mean over non-ignored pixels of ``-log softmax(logits)[label]``."""
    if logits.ndim != 4:
        raise ShapeError(f"logits must be N,K,H,W, got {logits.shape}")
    labels = np.asarray(labels)
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} != {(n, h, w)}")
    valid = labels != ignore_label
    if np.any((labels[valid] < 0) | (labels[valid] >= k)):
        raise ValueError(f"labels must lie in [0, {k}) or equal {ignore_label}")
    count = int(valid.sum())
    if count == 0:
        raise ValueError("all pixels are ignored; cross entropy is undefined")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked[valid].sum(dtype=np.float64)) / count

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(
            grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1.0, axis=1
        )
        grad *= valid[:, None] * (float(g) / count)
        return (grad.astype(DTYPE),)

    return make_result(np.asarray(loss, dtype=DTYPE), (logits,), backward, "softmax_cross_entropy")
