"""Scaled-down teacher/student segmenters, the feature translator and adapters.

Output stride (OS) is realized per stage: a network has a native stride
layout, and stages whose stride would push the cumulative stride past the
requested OS run at stride 1 with the dilation doubled instead.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np

from . import functional as F
from .functional import ConvSpec
from .nn import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    LayerCost,
    Module,
    ReLU,
    Residual,
    Sequential,
    conv_bn_relu,
)
from .tensor import ShapeError, Tensor

INPUT_MULTIPLE = 32

TEACHER_CHANNELS = (16, 32, 64, 64)
TEACHER_STRIDES = (1, 2, 2, 2)
TEACHER_STEM = 16
TEACHER_OS = (4, 8, 16)

STUDENT_CHANNELS = (8, 16, 32, 32)
STUDENT_STRIDES = (2, 2, 2, 2)
STUDENT_BLOCKS = (1, 1, 3, 6)
STUDENT_STEM = 8
STUDENT_OS = (8, 16, 32)

ARCHITECTURES = ("teacher", "student", "translator", "adapter", "projection")


class UnsupportedStrideError(ValueError):
    pass


def stage_layout(
    output_stride: int, native_strides: Sequence[int], stem_stride: int = 2
) -> list[tuple[int, int]]:
    """Per-stage ``(stride, dilation)`` realizing ``output_stride``.

    Stages are converted from the end: once the cumulative stride reaches the
    target, later stride-2 stages become stride 1 and the dilation doubles.
    """
    max_os = stem_stride * math.prod(native_strides)
    if output_stride > max_os or max_os % output_stride or output_stride < stem_stride:
        raise UnsupportedStrideError(
            f"output stride {output_stride} not reachable from native layout (max {max_os})"
        )
    current, rate = stem_stride, 1
    layout = []
    for s in native_strides:
        if current * s > output_stride:
            rate *= s
            layout.append((1, rate))
        else:
            current *= s
            layout.append((s, rate))
    return layout


def rng_for(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


class SegOutput(NamedTuple):
    features: Tensor
    coarse_logits: Tensor
    logits: Tensor


def _upsample_cost(shape, hw, name) -> LayerCost:
    out = (shape[0], shape[1]) + tuple(hw)
    return LayerCost(name, "upsample", out, elementwise=math.prod(out))


class SegNet(Module):
    """Stem + four stages + 1x1 classifier; logits resized to the input."""

    arch = "segnet"

    def __init__(self, stem: Module, stages: Sequence[Module], feat_channels: int,
                 num_classes: int, output_stride: int, rng):
        super().__init__()
        self.stem = stem
        self.stages = Sequential(*stages)
        self.head = Conv2d(ConvSpec(feat_channels, num_classes, 1), rng, bias=True)
        self.num_classes = num_classes
        self.output_stride = output_stride
        self.feat_channels = feat_channels

    def forward(self, x: Tensor) -> SegOutput:
        check_input_size(x.shape[2], x.shape[3])
        feats = self.stages(self.stem(x))
        coarse = self.head(feats)
        logits = F.upsample_bilinear(coarse, x.shape[2], x.shape[3])
        return SegOutput(feats, coarse, logits)

    def trace(self, shape, name=""):
        check_input_size(shape[2], shape[3])
        shape, costs = self.stem.trace(shape, "stem")
        shape, c = self.stages.trace(shape, "stages")
        costs += c
        shape, c = self.head.trace(shape, "head")
        costs += c
        return shape, costs


class TeacherNet(SegNet):
    arch = "teacher"

    def __init__(self, num_classes: int, output_stride: int = 8, seed=0):
        if output_stride not in TEACHER_OS:
            raise UnsupportedStrideError(
                f"teacher supports output stride {TEACHER_OS}, got {output_stride}"
            )
        rng = rng_for(seed)
        stem = conv_bn_relu(3, TEACHER_STEM, rng, stride=2)
        stages, cin = [], TEACHER_STEM
        for cout, (s, d) in zip(TEACHER_CHANNELS, stage_layout(output_stride, TEACHER_STRIDES)):
            stages.append(Sequential(
                conv_bn_relu(cin, cout, rng, stride=s, dilation=d),
                conv_bn_relu(cout, cout, rng, dilation=d),
            ))
            cin = cout
        super().__init__(stem, stages, cin, num_classes, output_stride, rng)


def separable_block(cin: int, cout: int, rng, stride: int = 1, dilation: int = 1) -> Module:
    """Depthwise 3x3 (BN, ReLU) then pointwise 1x1 (BN, no ReLU).

    The projection stays linear: with a ReLU there, every residual add is
    non-negative and the skip path only ever grows, which stalls training.
    """
    body = Sequential(
        conv_bn_relu(cin, cin, rng, stride=stride, dilation=dilation, groups=cin),
        conv_bn_relu(cin, cout, rng, kernel=1, activation=False),
    )
    if stride == 1 and cin == cout:
        return Residual(body)
    return body


class StudentNet(SegNet):
    arch = "student"

    def __init__(self, num_classes: int, output_stride: int = 16, seed=0,
                 blocks: Sequence[int] = STUDENT_BLOCKS):
        if output_stride not in STUDENT_OS:
            raise UnsupportedStrideError(
                f"student supports output stride {STUDENT_OS}, got {output_stride}"
            )
        rng = rng_for(seed)
        stem = conv_bn_relu(3, STUDENT_STEM, rng, stride=2)
        stages, cin = [], STUDENT_STEM
        layout = stage_layout(output_stride, STUDENT_STRIDES)
        for cout, n, (s, d) in zip(STUDENT_CHANNELS, blocks, layout):
            layers = [separable_block(cin, cout, rng, stride=s, dilation=d)]
            layers += [separable_block(cout, cout, rng, dilation=d) for _ in range(n - 1)]
            stages.append(Sequential(*layers))
            cin = cout
        super().__init__(stem, stages, cin, num_classes, output_stride, rng)


class TranslatorAE(Module):
    """Autoencoder over teacher features: encoder strides (2,1,1), decoder (1,1,2)."""

    arch = "translator"

    def __init__(self, channels: int, seed=0):
        super().__init__()
        rng = rng_for(seed)
        c = channels
        self.channels = c
        self.encoder = Sequential(
            conv_bn_relu(c, c, rng, stride=2),
            conv_bn_relu(c, c, rng),
            conv_bn_relu(c, c, rng),
        )
        self.decoder = Sequential(
            ConvTranspose2d(ConvSpec(c, c, 3, 1, 1), rng), BatchNorm2d(c), ReLU(),
            ConvTranspose2d(ConvSpec(c, c, 3, 1, 1), rng), BatchNorm2d(c), ReLU(),
            ConvTranspose2d(ConvSpec(c, c, 3, 2, 1, output_padding=1), rng, bias=True),
        )

    def encode(self, x: Tensor) -> Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"translator needs even spatial extents, got {x.shape[2:]}")
        return self.encoder(x)

    def decode(self, code: Tensor) -> Tensor:
        return self.decoder(code)

    def forward(self, x):
        return self.decode(self.encode(x))

    def trace(self, shape, name=""):
        mid, costs = self.encoder.trace(shape, "encoder")
        out, c = self.decoder.trace(mid, "decoder")
        return out, costs + c


class Adapter(Module):
    """3x3 conv-BN-ReLU stack mapping student channels to teacher channels."""

    arch = "adapter"

    def __init__(self, in_channels: int, out_channels: int, depth: int = 3, seed=0):
        super().__init__()
        if depth < 1:
            raise ValueError("adapter depth must be >= 1")
        rng = rng_for(seed)
        layers = [conv_bn_relu(in_channels, out_channels, rng)]
        layers += [conv_bn_relu(out_channels, out_channels, rng) for _ in range(depth - 1)]
        self.body = Sequential(*layers)
        self.depth = depth

    def forward(self, x):
        return self.body(x)

    def trace(self, shape, name=""):
        return self.body.trace(shape, "body")


class Projection(Module):
    """1x1 channel projection used by the FitNet baseline."""

    arch = "projection"

    def __init__(self, in_channels: int, out_channels: int, seed=0):
        super().__init__()
        self.conv = Conv2d(ConvSpec(in_channels, out_channels, 1), rng_for(seed), bias=True)

    def forward(self, x):
        return self.conv(x)

    def trace(self, shape, name=""):
        return self.conv.trace(shape, "conv")


def check_input_size(h: int, w: int) -> None:
    if h % INPUT_MULTIPLE or w % INPUT_MULTIPLE:
        ph = (-h) % INPUT_MULTIPLE
        pw = (-w) % INPUT_MULTIPLE
        raise ShapeError(
            f"input {h}x{w} must be divisible by {INPUT_MULTIPLE}; "
            f"pad by {ph} rows and {pw} columns"
        )


def build_network(
    arch: str,
    output_stride: int | None = None,
    num_classes: int = 4,
    seed=0,
    **kwargs,
) -> Module:
    """Construct a freshly initialized network of the given architecture."""
    if arch == "teacher":
        return TeacherNet(num_classes, 8 if output_stride is None else output_stride, seed)
    if arch == "student":
        return StudentNet(num_classes, 16 if output_stride is None else output_stride, seed, **kwargs)
    if arch == "translator":
        return TranslatorAE(kwargs.get("channels", TEACHER_CHANNELS[-1]), seed)
    if arch == "adapter":
        return Adapter(
            kwargs.get("in_channels", STUDENT_CHANNELS[-1]),
            kwargs.get("out_channels", TEACHER_CHANNELS[-1]),
            kwargs.get("depth", 3),
            seed,
        )
    if arch == "projection":
        return Projection(
            kwargs.get("in_channels", STUDENT_CHANNELS[-1]),
            kwargs.get("out_channels", TEACHER_CHANNELS[-1]),
            seed,
        )
    raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")


def forward_features(net: SegNet, images: Tensor) -> tuple[Tensor, Tensor]:
    """Last feature map (pre-classifier) and logits resized to the input."""
    out = net(images)
    return out.features, out.logits


def translate(translator: TranslatorAE, teacher_features: Tensor) -> Tensor:
    """Encode teacher features into the translator's code space."""
    return translator.encode(teacher_features)


def feature_grid(net: SegNet, input_hw: tuple[int, int]) -> tuple[int, int]:
    shape, _ = net.trace((1, 3) + tuple(input_hw))
    return shape[2], shape[3]


def check_alignment(teacher: SegNet, student: SegNet, translator: TranslatorAE,
                    input_hw: tuple[int, int]) -> tuple[int, int]:
    """Assert the translated teacher grid coincides with the student grid."""
    t_hw = feature_grid(teacher, input_hw)
    s_hw = feature_grid(student, input_hw)
    code_shape, _ = translator.encoder.trace((1, teacher.feat_channels) + t_hw)
    if tuple(code_shape[2:]) != tuple(s_hw):
        raise ShapeError(
            f"grid misalignment: translated teacher grid {tuple(code_shape[2:])} "
            f"vs student grid {tuple(s_hw)} (teacher OS {teacher.output_stride}, "
            f"student OS {student.output_stride})"
        )
    return s_hw
