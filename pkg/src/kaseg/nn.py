"""Layer containers with named parameter registries."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .functional import BNState, ConvSpec
from .tensor import DTYPE, Tensor, add, relu


@dataclass
class LayerCost:
    """Cost of one layer at a given input shape (pure shape analysis)."""

    name: str
    kind: str
    out_shape: tuple[int, ...]
    macs: int = 0
    params: int = 0
    elementwise: int = 0


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        return iter(self._modules.items())

    def modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for path, mod in self.modules():
            for name, p in mod._params.items():
                out[f"{path}.{name}" if path else name] = p
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for path, mod in self.modules():
            for name, buf in mod._buffers().items():
                out[f"{path}.{name}" if path else name] = buf
        return out

    def _buffers(self) -> dict[str, np.ndarray]:
        return {}

    def decay_names(self) -> set[str]:
        """Parameters subject to weight decay (convolution kernels only)."""
        out = set()
        for path, mod in self.modules():
            if isinstance(mod, (Conv2d, ConvTranspose2d)):
                out.add(f"{path}.weight" if path else "weight")
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def trace(self, shape: tuple[int, ...], name: str = "") -> tuple[tuple[int, ...], list[LayerCost]]:
        """Propagate an input shape, returning output shape and per-layer costs."""
        raise NotImplementedError(type(self).__name__)


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, bias: bool = False):
        super().__init__()
        self.spec = spec
        kh, kw = spec.kernel
        fan_in = spec.in_channels // spec.groups * kh * kw
        self.weight = Tensor(he_uniform(rng, spec.weight_shape(), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(spec.out_channels), requires_grad=True) if bias else None

    def forward(self, x):
        s = self.spec
        return F.conv2d(x, self.weight, self.bias, s.stride, s.padding, s.dilation, s.groups)

    def trace(self, shape, name=""):
        n, c, h, w = shape
        s = self.spec
        if c != s.in_channels:
            raise ValueError(f"{name}: expected {s.in_channels} input channels, got {c}")
        ho, wo = s.output_size(h, w)
        if ho <= 0 or wo <= 0:
            raise ValueError(f"{name}: empty output for input {h}x{w}")
        kh, kw = s.kernel
        macs = kh * kw * (s.in_channels // s.groups) * s.out_channels * ho * wo
        out = (n, s.out_channels, ho, wo)
        params = self.weight.size + (self.bias.size if self.bias is not None else 0)
        return out, [LayerCost(name, "conv", out, macs=n * macs, params=params)]


class ConvTranspose2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, bias: bool = False):
        super().__init__()
        self.spec = spec
        kh, kw = spec.kernel
        fan_in = spec.out_channels // spec.groups * kh * kw
        self.weight = Tensor(
            he_uniform(rng, spec.weight_shape(transposed=True), fan_in), requires_grad=True
        )
        self.bias = Tensor(np.zeros(spec.out_channels), requires_grad=True) if bias else None

    def forward(self, x):
        s = self.spec
        return F.conv_transpose2d(
            x, self.weight, self.bias, s.stride, s.padding, s.dilation, s.groups, s.output_padding
        )

    def trace(self, shape, name=""):
        n, c, h, w = shape
        s = self.spec
        if c != s.in_channels:
            raise ValueError(f"{name}: expected {s.in_channels} input channels, got {c}")
        ho, wo = s.transposed_output_size(h, w)
        kh, kw = s.kernel
        # every input element is scattered into (Cout/groups)*kh*kw outputs
        macs = kh * kw * (s.out_channels // s.groups) * s.in_channels * h * w
        out = (n, s.out_channels, ho, wo)
        params = self.weight.size + (self.bias.size if self.bias is not None else 0)
        return out, [LayerCost(name, "conv_transpose", out, macs=n * macs, params=params)]


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.state = BNState(channels)

    def forward(self, x):
        return F.batch_norm(x, self.gamma, self.beta, self.state, self.training)

    def _buffers(self):
        return {"running_mean": self.state.running_mean, "running_var": self.state.running_var}

    def trace(self, shape, name=""):
        return shape, [
            LayerCost(name, "batch_norm", shape, params=2 * shape[1], elementwise=math.prod(shape))
        ]


class ReLU(Module):
    def forward(self, x):
        return relu(x)

    def trace(self, shape, name=""):
        return shape, [LayerCost(name, "relu", shape, elementwise=math.prod(shape))]


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i: int) -> Module:
        return list(self._modules.values())[i]

    def forward(self, x):
        for layer in self._modules.values():
            x = layer(x)
        return x

    def trace(self, shape, name=""):
        costs = []
        for key, layer in self._modules.items():
            shape, c = layer.trace(shape, f"{name}.{key}" if name else key)
            costs.extend(c)
        return shape, costs


class Residual(Module):
    """``x + body(x)``; the body must preserve shape."""

    def __init__(self, body: Module):
        super().__init__()
        self.body = body

    def forward(self, x):
        return add(x, self.body(x))

    def trace(self, shape, name=""):
        out, costs = self.body.trace(shape, f"{name}.body" if name else "body")
        if out != shape:
            raise ValueError(f"{name}: residual body changes shape {shape} -> {out}")
        return out, costs + [LayerCost(name, "add", out, elementwise=math.prod(out))]


def conv_bn_relu(
    cin: int,
    cout: int,
    rng: np.random.Generator,
    stride: int = 1,
    dilation: int = 1,
    kernel: int = 3,
    groups: int = 1,
    activation: bool = True,
) -> Sequential:
    pad = dilation * (kernel - 1) // 2
    spec = ConvSpec(cin, cout, kernel, stride, pad, dilation, groups)
    layers: list[Module] = [Conv2d(spec, rng), BatchNorm2d(cout)]
    if activation:
        layers.append(ReLU())
    return Sequential(*layers)
