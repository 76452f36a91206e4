"""Parameter-holding layer wrappers and a parser for compact layer strings.

A layer string such as ``"CR(64,9)-CR(32,7)-TR(32)-CR(16,5)-TR(16)-C(1,1)"``
reads left to right: ``C`` convolution, ``T`` fractionally-strided
convolution, ``M`` 2x2 max-pool, ``R`` ReLU, ``P`` PReLU, ``Sigmoid``.
The first number in braces is the filter count, the second the filter size.
"""

from __future__ import annotations

import re
from typing import Iterator

import numpy as np

from . import layers as L
from .tensor import DEFAULT_DTYPE, Tensor, reshape


class Layer:
    """Base class; subclasses hold their parameters as :class:`Tensor` attributes."""

    param_names: tuple[str, ...] = ()
    frozen = False

    def params(self) -> list[tuple[str, Tensor]]:
        return [(n, getattr(self, n)) for n in self.param_names]

    def freeze(self, flag: bool = True) -> None:
        self.frozen = flag
        for _, p in self.params():
            p.requires_grad = not flag

    def __call__(self, x, train: bool = False, rng=None):
        raise NotImplementedError


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(DEFAULT_DTYPE)


class Conv2d(Layer):
    param_names = ("weight", "bias")

    def __init__(self, spec: L.ConvSpec, rng: np.random.Generator):
        self.spec = spec
        k = spec.kernel
        self.weight = Tensor(_he(rng, (spec.out_channels, spec.in_channels, k, k),
                                 spec.in_channels * k * k), requires_grad=True)
        self.bias = Tensor(np.zeros(spec.out_channels, DEFAULT_DTYPE), requires_grad=True)

    def __call__(self, x, train=False, rng=None):
        return L.conv2d(x, self.weight, self.bias, self.spec.stride, self.spec.padding)

    def __repr__(self):
        s = self.spec
        return f"Conv2d({s.in_channels}->{s.out_channels}, k={s.kernel})"


class TransposedConv2d(Layer):
    param_names = ("weight", "bias")

    def __init__(self, spec: L.TransposedConvSpec, rng: np.random.Generator):
        self.spec = spec
        # each output pixel receives 4 of the 16 taps per input channel
        self.weight = Tensor(_he(rng, (spec.in_channels, spec.out_channels, 4, 4), spec.in_channels * 4),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(spec.out_channels, DEFAULT_DTYPE), requires_grad=True)

    def __call__(self, x, train=False, rng=None):
        return L.transposed_conv2d(x, self.weight, self.bias)

    def __repr__(self):
        return f"TransposedConv2d({self.spec.in_channels}->{self.spec.out_channels})"


class Linear(Layer):
    param_names = ("weight", "bias")

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = Tensor(_he(rng, (n_out, n_in), n_in), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, DEFAULT_DTYPE), requires_grad=True)

    def __call__(self, x, train=False, rng=None):
        if x.data.ndim > 2:
            x = reshape(x, (x.shape[0], -1))
        return L.fully_connected(x, self.weight, self.bias)

    def __repr__(self):
        return f"Linear({self.weight.shape[1]}->{self.weight.shape[0]})"


class PReLU(Layer):
    param_names = ("slope",)

    def __init__(self, channels: int, init: float = 0.25):
        self.slope = Tensor(np.full(channels, init, DEFAULT_DTYPE), requires_grad=True)

    def __call__(self, x, train=False, rng=None):
        return L.prelu(x, self.slope)

    def __repr__(self):
        return f"PReLU({self.slope.size})"


class ReLU(Layer):
    def __call__(self, x, train=False, rng=None):
        return L.relu(x)

    def __repr__(self):
        return "ReLU()"


class Sigmoid(Layer):
    def __call__(self, x, train=False, rng=None):
        return L.sigmoid(x)

    def __repr__(self):
        return "Sigmoid()"


class MaxPool2(Layer):
    def __call__(self, x, train=False, rng=None):
        return L.maxpool2(x)

    def __repr__(self):
        return "MaxPool2()"


class Dropout(Layer):
    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate

    def __call__(self, x, train=False, rng=None):
        return L.dropout(x, self.rate, train, rng)

    def __repr__(self):
        return f"Dropout({self.rate})"


class Sequential:
    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)

    def __call__(self, x, train: bool = False, rng=None):
        for layer in self.layers:
            x = layer(x, train, rng)
        return x

    def __iter__(self) -> Iterator[Layer]:
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            for n, p in layer.params():
                out.append((f"{prefix}{i}.{n}", p))
        return out

    def __repr__(self):
        return "Sequential(" + ", ".join(map(repr, self.layers)) + ")"


_TOKEN = re.compile(r"^([A-Za-z]+?)(?:\((\d+)(?:,(\d+))?\))?$")


def parse_layer_string(text: str, in_channels: int, rng: np.random.Generator,
                       default_kernel: int = 3, width_scale: float = 1.0) -> tuple[Sequential, int]:
    """Build a :class:`Sequential` from a compact layer string.

    ``width_scale`` shrinks every filter count above 1 (toy-scale builds keep
    the layer sequence and shrink widths).  Returns the network and its
    output channel count.
    """
    net: list[Layer] = []
    ch = in_channels
    for raw in text.split("-"):
        tok = raw.strip()
        if tok == "Sigmoid":
            net.append(Sigmoid())
            continue
        m = _TOKEN.match(tok)
        if not m:
            raise ValueError(f"cannot parse layer token {tok!r}")
        letters, nf, ks = m.group(1), m.group(2), m.group(3)
        head, acts = letters[0], letters[1:]
        if head == "M" and not acts and nf is None:
            net.append(MaxPool2())
            continue
        if head not in "CT" or nf is None:
            raise ValueError(f"cannot parse layer token {tok!r}")
        filters = int(nf)
        if filters > 1 and width_scale != 1.0:
            filters = max(1, int(round(filters * width_scale)))
        if head == "C":
            k = int(ks) if ks else default_kernel
            net.append(Conv2d(L.ConvSpec(ch, filters, k), rng))
        else:
            if ks and int(ks) != 4:
                raise ValueError(f"{tok}: fractionally-strided layers use 4x4 kernels")
            net.append(TransposedConv2d(L.TransposedConvSpec(ch, filters), rng))
        ch = filters
        for a in acts:
            if a == "R":
                net.append(ReLU())
            elif a == "P":
                net.append(PReLU(ch))
            else:
                raise ValueError(f"unknown activation {a!r} in {tok!r}")
    return Sequential(net), ch
