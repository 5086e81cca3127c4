"""Convolution, pooling, fully-connected and dropout layers.

Functional primitives live at module level and record themselves on the
tape; the small ``Module`` classes only hold parameters and configuration.
"""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .errors import InvalidRatio, ShapeMismatch
from .tensor import Tensor, apply, as_tensor, matmul, register_primitive, relu


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


@register_primitive("conv2d")
def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeMismatch("conv2d expects NCHW input and OIHW kernel", x.shape, weight.shape)
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeMismatch("conv2d: input channels differ from kernel in_ch", x.shape, weight.shape)
    oh, ow = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeMismatch("conv2d: kernel larger than padded input", x.shape, weight.shape)

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    wd = weight.data
    out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeMismatch("conv2d: bias must have out_ch entries", bias.shape, (o,))
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)
    out = np.ascontiguousarray(out)
    padded_shape = xd.shape

    def bw(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.tensordot(g, wd, axes=([1], [0]))  # N, oh, ow, C, kh, kw
            gxp = np.zeros(padded_shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return apply("conv2d", out, inputs, bw)


def maxpool_forward(x, window: int = 2, stride: int | None = None):
    """Max pooling returning ``(output, argmax)``.

    ``argmax`` holds, per output cell, the flat ``row * W + col`` index of the
    winning input position; ties go to the first position in row-major order.
    """
    x = as_tensor(x)
    stride = window if stride is None else stride
    if x.data.ndim != 4:
        raise ShapeMismatch("maxpool2d expects NCHW input", x.shape)
    h, w = x.shape[2:]
    if window > h or window > w or window < 1 or stride < 1:
        raise ShapeMismatch(f"maxpool2d: window {window} exceeds spatial extent", x.shape)
    out, argmax = kernels.maxpool2d_forward(np.ascontiguousarray(x.data), window, stride)
    dtype = x.data.dtype
    t = apply("maxpool2d", out, (x,),
              lambda g: (kernels.maxpool2d_backward(np.ascontiguousarray(g, dtype=dtype), argmax, h, w),))
    return t, argmax


@register_primitive("maxpool2d")
def maxpool2d(x, window: int = 2, stride: int | None = None) -> Tensor:
    return maxpool_forward(x, window, stride)[0]


@register_primitive("linear")
def linear(x, weight, bias=None) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeMismatch("linear: feature dimension differs from weight rows", x.shape, weight.shape)
    y = matmul(x, weight)
    return y if bias is None else y + bias


@register_primitive("dropout")
def dropout(x, ratio: float = 0.5, train: bool = True, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-ratio)`` so eval mode is the identity."""
    if not 0.0 <= ratio < 1.0:
        raise InvalidRatio(f"dropout ratio must lie in [0, 1), got {ratio}")
    x = as_tensor(x)
    if not train or ratio == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a seeded rng")
    keep = rng.random(x.shape) >= ratio
    mask = keep.astype(x.data.dtype) / x.data.dtype.type(1.0 - ratio)
    return apply("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


# ---------------------------------------------------------------------------
# modules

class Module:
    """Parameter container with ordered, dotted parameter names."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(self.named_parameters())

    def set_parameter(self, dotted: str, value: np.ndarray) -> None:
        head, _, rest = dotted.partition(".")
        if rest:
            self._children[head].set_parameter(rest, value)
        else:
            p = self._params[head]
            p.data = np.array(value, dtype=p.data.dtype).reshape(p.shape)
            p.grad = None

    def train(self, mode: bool = True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming(rng: np.random.Generator, shape, fan_in: int, gain: float = math.sqrt(2.0), dtype=np.float64):
    return (rng.standard_normal(shape) * (gain / math.sqrt(fan_in))).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None, dtype=np.float64, gain: float = math.sqrt(2.0)):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        self.weight = Tensor(kaiming(rng, (out_ch, in_ch, kernel, kernel), fan_in, gain, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding
        self.kernel = kernel

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]

    def output_size(self, size: int) -> int:
        return conv_output_size(size, self.kernel, self.stride, self.padding)

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 dtype=np.float64, gain: float = math.sqrt(2.0)):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(kaiming(rng, (in_dim, out_dim), in_dim, gain, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class MaxPool2d(Module):
    def __init__(self, window: int = 2, stride: int | None = None):
        super().__init__()
        self.window = window
        self.stride = window if stride is None else stride

    def output_size(self, size: int) -> int:
        return (size - self.window) // self.stride + 1

    def forward(self, x):
        return maxpool2d(x, self.window, self.stride)


class ReLU(Module):
    def forward(self, x):
        return relu(x)


class Dropout(Module):
    def __init__(self, ratio: float = 0.5, rng: np.random.Generator | None = None):
        super().__init__()
        if not 0.0 <= ratio < 1.0:
            raise InvalidRatio(f"dropout ratio must lie in [0, 1), got {ratio}")
        self.ratio = ratio
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x):
        return dropout(x, self.ratio, self.training, self.rng)
