"""Dense rank-4 tensor arithmetic: same-padded stride-1 convolution, activations
and channel concatenation.

Tensors are plain numpy arrays laid out as (batch, channel, row, column) in
C order. float32 is the production precision; every op also runs in float64,
which the gradient checks rely on. Convolution kernels are executed by torch's
CPU backend; only the forward/backward primitives are used, never autograd.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DimensionMismatchError

_probes: list[list[int]] = []


@contextlib.contextmanager
def allocation_probe():
    """Record the element count of every tensor produced inside the block.

    Used to check that tiled inference never materialises an activation whose
    size scales with the whole image.
    """
    sizes: list[int] = []
    _probes.append(sizes)
    try:
        yield sizes
    finally:
        _probes.remove(sizes)


def _record(arr: np.ndarray) -> np.ndarray:
    for sizes in _probes:
        sizes.append(arr.size)
    return arr


def as_tensor(data, dtype=np.float32) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != 4:
        raise DimensionMismatchError("tensor must be rank 4 (batch, channels, height, width)",
                                     4, arr.ndim)
    return arr


@dataclass
class ConvLayer:
    """One same-padded, stride-1 2D convolution."""

    kernel: np.ndarray  # (out_channels, in_channels, k, k)
    bias: np.ndarray  # (out_channels,)

    def __post_init__(self):
        if self.kernel.ndim != 4 or self.kernel.shape[2] != self.kernel.shape[3]:
            raise DimensionMismatchError("kernel must be (out, in, k, k)", "(out, in, k, k)",
                                         self.kernel.shape)
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {self.kernel_size}")
        if self.bias.shape != (self.out_channels,):
            raise DimensionMismatchError("bias length must equal out_channels",
                                         (self.out_channels,), self.bias.shape)

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[2]

    @property
    def padding(self) -> int:
        return (self.kernel_size - 1) // 2

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def num_parameters(self) -> int:
        return self.kernel.size + self.bias.size

    def astype(self, dtype) -> "ConvLayer":
        return ConvLayer(self.kernel.astype(dtype), self.bias.astype(dtype))


def _check_input(x: np.ndarray, layer: ConvLayer):
    if x.ndim != 4:
        raise DimensionMismatchError("input must be rank 4", 4, x.ndim)
    if x.shape[1] != layer.in_channels:
        raise DimensionMismatchError(
            "input channels do not match layer in_channels",
            f"(*, {layer.in_channels}, *, *)", x.shape)
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise DimensionMismatchError("spatial dims must be >= 1", ">= 1", x.shape)


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Zero-padded cross-correlation; output keeps the input's spatial shape."""
    _check_input(x, layer)
    out = F.conv2d(torch.from_numpy(np.ascontiguousarray(x)),
                   torch.from_numpy(np.ascontiguousarray(layer.kernel, dtype=x.dtype)),
                   torch.from_numpy(np.ascontiguousarray(layer.bias, dtype=x.dtype)),
                   padding=layer.padding)
    return _record(out.numpy())


def conv2d_backward(x: np.ndarray, layer: ConvLayer, grad_output: np.ndarray):
    """Return (grad_input, grad_kernel, grad_bias) for conv2d_forward(x, layer)."""
    _check_input(x, layer)
    expected = (x.shape[0], layer.out_channels, x.shape[2], x.shape[3])
    if grad_output.shape != expected:
        raise DimensionMismatchError("grad_output shape does not match forward output",
                                     expected, grad_output.shape)
    xt = torch.from_numpy(np.ascontiguousarray(x))
    gt = torch.from_numpy(np.ascontiguousarray(grad_output, dtype=x.dtype))
    wt = torch.from_numpy(np.ascontiguousarray(layer.kernel, dtype=x.dtype))
    p = layer.padding
    grad_input = torch.nn.grad.conv2d_input(xt.shape, wt, gt, padding=p).numpy()
    grad_kernel = torch.nn.grad.conv2d_weight(xt, wt.shape, gt, padding=p).numpy()
    grad_bias = grad_output.sum(axis=(0, 2, 3))
    return _record(grad_input), grad_kernel, grad_bias


def concat_channels(inputs: list[np.ndarray]) -> np.ndarray:
    if not inputs:
        raise DimensionMismatchError("concat_channels needs at least one input", ">= 1", 0)
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise DimensionMismatchError("batch/spatial dims differ", ref, t.shape)
    if len(inputs) == 1:
        return inputs[0]
    return _record(np.concatenate(inputs, axis=1))


def split_channels(grad: np.ndarray, widths: list[int]) -> list[np.ndarray]:
    """Backward of concat_channels: cut ``grad`` at the same channel offsets."""
    if sum(widths) != grad.shape[1]:
        raise DimensionMismatchError("channel widths do not sum to gradient channels",
                                     grad.shape[1], sum(widths))
    offsets = np.cumsum(widths)[:-1]
    return np.split(grad, offsets, axis=1)


def sigmoid(x):
    x = np.asarray(x)
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate(x, kind: str = "relu"):
    if kind == "relu":
        return _record(np.maximum(x, 0))
    if kind == "sigmoid":
        return _record(sigmoid(x))
    raise ConfigError(f"unknown activation {kind!r}")


def activate_backward(x, grad_output, kind: str = "relu"):
    """Gradient of activate(x, kind) given the upstream gradient."""
    if kind == "relu":
        return grad_output * (x > 0)
    if kind == "sigmoid":
        s = sigmoid(x)
        return grad_output * s * (1 - s)
    raise ConfigError(f"unknown activation {kind!r}")


def set_num_threads(n: int):
    """Intra-op thread count; 1 gives the bit-reproducible mode used by tests."""
    torch.set_num_threads(max(1, int(n)))
