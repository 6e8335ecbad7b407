"""Layers with explicit forward/backward passes.

Layers exchange channel-last (N, H, W, C) activations; the functional
:func:`conv2d_forward` / :func:`conv2d_backward` pair takes NCHW. Every layer
computes in the dtype of its parameters (float32 normally, float64 for
gradient checking) and caches what its backward pass needs.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN/inf."""


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {name}")
    return arr


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv_args(x_shape, w_shape, stride, padding):
    n, h, w, c = x_shape
    o, ci, k, k2 = w_shape
    if ci != c:
        raise ValueError(f"input has {c} channels, kernel expects {ci}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square and odd, got {k}x{k2}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"input {h}x{w} too small for kernel {k} with padding {padding}")
    return ho, wo


def conv2d_forward_nhwc(x, weight, bias, stride=1, padding=0):
    """Channel-last convolution used by the layers; see :func:`conv2d_forward`."""
    if x.ndim != 4:
        raise ValueError(f"conv input must be 4-D, got shape {x.shape}")
    ho, wo = _check_conv_args(x.shape, weight.shape, stride, padding)
    n, h, w, c = x.shape
    o, _, k, _ = weight.shape
    dtype = weight.dtype
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.zeros((n, hp, wp, c), dtype=dtype)
    xp[:, padding:padding + h, padding:padding + w, :] = x
    # one kernel row of a receptive field is a contiguous k*c span of a padded row
    rows = xp.reshape(n, hp, wp * c)
    item = xp.itemsize
    spans = as_strided(rows, shape=(n, hp, wo, k * c),
                       strides=(rows.strides[0], rows.strides[1], stride * c * item, item),
                       writeable=False)
    cols = np.empty((n, ho, wo, k, k * c), dtype=dtype)
    for di in range(k):
        cols[:, :, :, di, :] = spans[:, di:di + stride * (ho - 1) + 1:stride]
    cols = cols.reshape(n * ho * wo, k * k * c)
    wmat = np.ascontiguousarray(weight.transpose(2, 3, 1, 0).reshape(k * k * c, o))
    out = cols @ wmat
    if bias is not None:
        out += bias
    cache = (x.shape, xp.shape, cols, wmat, weight.shape, stride, padding, ho, wo)
    return out.reshape(n, ho, wo, o), cache


def conv2d_backward_nhwc(dout, cache):
    x_shape, xp_shape, cols, wmat, w_shape, stride, padding, ho, wo = cache
    o, c, k, _ = w_shape
    n, h, w, _ = x_shape
    dtype = wmat.dtype
    d2 = np.ascontiguousarray(dout, dtype=dtype).reshape(-1, o)
    dweight = np.ascontiguousarray((cols.T @ d2).reshape(k, k, c, o).transpose(3, 2, 0, 1))
    dbias = d2.sum(axis=0, dtype=np.float64).astype(dtype)
    dcols = (d2 @ wmat.T).reshape(n, ho, wo, k, k, c)
    dxp = np.zeros(xp_shape, dtype=dtype)
    for di in range(k):
        for dj in range(k):
            dxp[:, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride, :] += (
                dcols[:, :, :, di, dj, :]
            )
    dx = np.ascontiguousarray(dxp[:, padding:padding + h, padding:padding + w, :])
    return dx, dweight, dbias


def conv2d_forward(x, weight, bias, stride=1, padding=0):
    """Cross-correlate ``x`` (N, C, H, W) with ``weight`` (O, C, k, k).

    Zero padding, odd square kernels; output spatial size is
    ``(in + 2*padding - k) // stride + 1``. Returns ``(out, cache)``.
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"conv input must be 4-D, got shape {x.shape}")
    out, cache = conv2d_forward_nhwc(x.transpose(0, 2, 3, 1), weight, bias, stride, padding)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cache


def conv2d_backward(dout, cache):
    """Gradients ``(dx, dweight, dbias)`` for :func:`conv2d_forward`, NCHW."""
    dx, dweight, dbias = conv2d_backward_nhwc(np.asarray(dout).transpose(0, 2, 3, 1), cache)
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2)), dweight, dbias


class Layer:
    """Base class: named parameters plus matching gradients."""

    def params(self) -> dict:
        return {}

    def grads(self) -> dict:
        return {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


class Conv2D(Layer):
    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=1):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = np.zeros((out_channels, in_channels, kernel_size, kernel_size), np.float32)
        self.bias = np.zeros(out_channels, np.float32)
        self.dweight = np.zeros_like(self.weight)
        self.dbias = np.zeros_like(self.bias)
        self._cache = None

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel_size * self.kernel_size

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def grads(self):
        return {"weight": self.dweight, "bias": self.dbias}

    def forward(self, x):
        out, self._cache = conv2d_forward_nhwc(x, self.weight, self.bias, self.stride, self.padding)
        return out

    def backward(self, dout):
        dx, self.dweight[...], self.dbias[...] = conv2d_backward_nhwc(dout, self._cache)
        return dx


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, dout):
        return dout * self._mask


class ResidualBlock(Layer):
    """``relu(x + conv2(relu(conv1(x))))`` with identity skip."""

    def __init__(self, channels, kernel_size=3):
        pad = kernel_size // 2
        self.conv1 = Conv2D(channels, channels, kernel_size, 1, pad)
        self.relu1 = ReLU()
        self.conv2 = Conv2D(channels, channels, kernel_size, 1, pad)
        self.relu_out = ReLU()

    def children(self):
        return {"conv1": self.conv1, "conv2": self.conv2}

    def forward(self, x):
        branch = self.conv2.forward(self.relu1.forward(self.conv1.forward(x)))
        return self.relu_out.forward(x + branch)

    def backward(self, dout):
        dsum = self.relu_out.backward(dout)
        dbranch = self.conv1.backward(self.relu1.backward(self.conv2.backward(dsum)))
        return dsum + dbranch


class GlobalAvgPool(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(1, 2), dtype=np.float64).astype(x.dtype)

    def backward(self, dout):
        n, h, w, c = self._shape
        return np.broadcast_to((dout / (h * w))[:, None, None, :], self._shape).astype(dout.dtype)


class Linear(Layer):
    def __init__(self, in_features, out_features):
        self.in_features = in_features
        self.weight = np.zeros((out_features, in_features), np.float32)
        self.bias = np.zeros(out_features, np.float32)
        self.dweight = np.zeros_like(self.weight)
        self.dbias = np.zeros_like(self.bias)

    @property
    def fan_in(self) -> int:
        return self.in_features

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def grads(self):
        return {"weight": self.dweight, "bias": self.dbias}

    def forward(self, x):
        self._x = x.astype(self.weight.dtype, copy=False)
        return self._x @ self.weight.T + self.bias

    def backward(self, dout):
        dout = dout.astype(self.weight.dtype, copy=False)
        self.dweight[...] = dout.T @ self._x
        self.dbias[...] = dout.sum(axis=0, dtype=np.float64)
        return dout @ self.weight
