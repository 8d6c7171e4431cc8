"""Segmentation metrics, analytical cost counting and affinity-map export."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import netpbm
from .distill import affinity_matrix
from .functional import IGNORE_LABEL, interp_matrix
from .nn import LayerCost, Module
from .tensor import ShapeError, Tensor, no_grad

CONV_KINDS = ("conv", "conv_transpose")


# ---------------------------------------------------------------------------
# mIoU


class ConfusionMatrix:
    """``K x K`` counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int, ignore_label: int = IGNORE_LABEL):
        if num_classes < 1:
            raise ValueError("num_classes must be positive")
        self.num_classes = num_classes
        self.ignore_label = ignore_label
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, truth: np.ndarray, pred: np.ndarray) -> "ConfusionMatrix":
        truth = np.asarray(truth).ravel()
        pred = np.asarray(pred).ravel()
        if truth.shape != pred.shape:
            raise ShapeError(f"truth and prediction sizes differ: {truth.size} vs {pred.size}")
        keep = truth != self.ignore_label
        truth, pred = truth[keep].astype(np.int64), pred[keep].astype(np.int64)
        k = self.num_classes
        if truth.size and (truth.min() < 0 or truth.max() >= k):
            raise ValueError(f"ground-truth label outside [0, {k})")
        if pred.size and (pred.min() < 0 or pred.max() >= k):
            raise ValueError(f"predicted label outside [0, {k})")
        self.counts += np.bincount(truth * k + pred, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different class counts")
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def miou(conf: ConfusionMatrix | np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN for classes absent from truth and prediction) and their mean."""
    counts = conf.counts if isinstance(conf, ConfusionMatrix) else np.asarray(conf)
    if counts.sum() == 0:
        raise ValueError("confusion matrix is empty; nothing was scored")
    tp = np.diag(counts).astype(np.float64)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    per_class = np.full(len(tp), np.nan)
    present = union > 0
    per_class[present] = tp[present] / union[present]
    return per_class, float(per_class[present].mean())


# ---------------------------------------------------------------------------
# FLOPs


@dataclass
class FlopsReport:
    layers: list[LayerCost]
    input_hw: tuple[int, int]
    output_stride: Optional[int] = None
    macs: int = field(init=False)
    params: int = field(init=False)
    elementwise: int = field(init=False)

    def __post_init__(self):
        self.macs = sum(c.macs for c in self.layers)
        self.params = sum(c.params for c in self.layers)
        self.elementwise = sum(c.elementwise for c in self.layers)

    @property
    def flops(self) -> int:
        return 2 * self.macs

    def lines(self) -> list[str]:
        out = [f"input={self.input_hw[0]}x{self.input_hw[1]} os={self.output_stride}"]
        for c in self.layers:
            if c.kind in CONV_KINDS:
                shape = "x".join(map(str, c.out_shape))
                out.append(f"{c.name} {c.kind} out={shape} macs={c.macs} params={c.params}")
        out.append(
            f"total macs={self.macs} flops={self.flops} params={self.params} "
            f"elementwise={self.elementwise}"
        )
        return out


def count_flops(net: Module, input_hw: Sequence[int], in_channels: int = 3) -> FlopsReport:
    """Cost of one forward pass of a single image, from shapes alone."""
    h, w = (int(v) for v in input_hw)
    try:
        _, layers = net.trace((1, in_channels, h, w))
    except ValueError as exc:
        raise ShapeError(f"cannot resolve shapes for input {h}x{w}: {exc}") from exc
    # logits are resized back to the input when the net is a segmenter
    if hasattr(net, "num_classes"):
        out = (1, net.num_classes, h, w)
        layers = layers + [LayerCost("upsample", "upsample", out, elementwise=math.prod(out))]
    return FlopsReport(layers, (h, w), getattr(net, "output_stride", None))


# ---------------------------------------------------------------------------
# affinity maps


def affinity_map(features: np.ndarray | Tensor, point: tuple[int, int],
                 out_hw: Optional[tuple[int, int]] = None,
                 path: Optional[str | os.PathLike] = None) -> np.ndarray:
    """Similarity of every position to ``point`` as a uint8 image.

    ``features`` is ``(C, H, W)`` or ``(1, C, H, W)``.  The map is min-max
    scaled to [0, 255], resized bilinearly to ``out_hw`` and optionally
    written as a PGM.
    """
    arr = features.data if isinstance(features, Tensor) else np.asarray(features, np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise ShapeError(f"expected a single feature map, got shape {arr.shape}")
    _, _, h, w = arr.shape
    row, col = point
    if not (0 <= row < h and 0 <= col < w):
        raise IndexError(f"point {point} outside the {h}x{w} feature grid")
    with no_grad():
        a = affinity_matrix(Tensor(arr)).data[0]
    sim = a[row * w + col].reshape(h, w).astype(np.float64)
    lo, hi = sim.min(), sim.max()
    if hi - lo > 0:
        scaled = (sim - lo) / (hi - lo)
    else:
        scaled = np.ones_like(sim)  # every position is equally similar
    if out_hw is not None and tuple(out_hw) != (h, w):
        oh, ow = out_hw
        scaled = interp_matrix(h, oh).astype(np.float64) @ scaled @ interp_matrix(w, ow).T
    img = np.round(np.clip(scaled, 0.0, 1.0) * 255).astype(np.uint8)
    if path is not None:
        netpbm.write(path, img)
    return img


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    per_class: np.ndarray
    miou: float
    confusion: ConfusionMatrix

    def lines(self) -> list[str]:
        out = [f"class_{k} iou={v:.6f}" for k, v in enumerate(self.per_class)]
        out.append(f"miou={self.miou:.6f}")
        return out


def predict(net: Module, images: np.ndarray) -> np.ndarray:
    with no_grad():
        logits = net(Tensor(images)).logits.data
    return logits.argmax(axis=1)


def evaluate(net: Module, dataset, batch_size: int = 10) -> EvalReport:
    """Single-scale evaluation of a segmenter over a whole split."""
    if getattr(net, "num_classes", None) != dataset.num_classes:
        raise ValueError(
            f"network predicts {getattr(net, 'num_classes', None)} classes, "
            f"dataset has {dataset.num_classes}"
        )
    was_training = net.training
    net.eval()
    conf = ConfusionMatrix(dataset.num_classes)
    try:
        for start in range(0, len(dataset), batch_size):
            imgs = dataset.images[start : start + batch_size]
            conf.update(dataset.masks[start : start + batch_size], predict(net, imgs))
    finally:
        net.train(was_training)
    per_class, mean = miou(conf)
    return EvalReport(per_class, mean, conf)
