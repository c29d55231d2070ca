"""Layers with cached forward activations and analytic backward passes.

All tensors are numpy arrays laid out ``(batch, channels, height, width)``
for spatial layers and ``(batch, features)`` for fully connected ones.
Only parameters carry gradient accumulators.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import ConfigurationError, StateError


class Parameter:
    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad = np.zeros_like(data)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter(shape={self.data.shape})"


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, Parameter] = {}
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def _pop_cache(self):
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called without a cached forward pass")
        return self._cache

    def clear(self):
        self._cache = None

    def __repr__(self):
        return f"{type(self).__name__}()"


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_ch: int, out_ch: int, k: int = 3, stride: int = 1, pad: int | None = None,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        super().__init__()
        self.in_ch, self.out_ch, self.k, self.stride = in_ch, out_ch, k, stride
        self.pad = k // 2 if pad is None else pad
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * k * k
        self.params["weight"] = Parameter(he_uniform(rng, (out_ch, in_ch, k, k), fan_in, dtype))
        self.params["bias"] = Parameter(np.zeros(out_ch, dtype=dtype))

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise ConfigurationError(f"conv2d expects ({self.in_ch}, H, W), got {in_shape}")
        _, H, W = in_shape
        Ho = (H + 2 * self.pad - self.k) // self.stride + 1
        Wo = (W + 2 * self.pad - self.k) // self.stride + 1
        if Ho < 1 or Wo < 1:
            raise ConfigurationError(f"conv2d input {in_shape} too small for kernel {self.k}")
        return (self.out_ch, Ho, Wo)

    def forward(self, x):
        N, C, H, W = x.shape
        if C != self.in_ch:
            raise ConfigurationError(f"conv2d expects {self.in_ch} channels, got {C}")
        _, Ho, Wo = self.out_shape((C, H, W))
        k, s, p = self.k, self.stride, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * k * k)
        wmat = self.params["weight"].data.reshape(self.out_ch, -1)
        y = cols @ wmat.T + self.params["bias"].data
        self._cache = (x.shape, xp.shape, cols, Ho, Wo)
        return y.reshape(N, Ho, Wo, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, dy):
        x_shape, xp_shape, cols, Ho, Wo = self._pop_cache()
        N, C, H, W = x_shape
        k, s, p = self.k, self.stride, self.pad
        dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        wmat = self.params["weight"].data.reshape(self.out_ch, -1)
        self.params["weight"].grad += (dy2.T @ cols).reshape(self.params["weight"].shape)
        self.params["bias"].grad += dy2.sum(axis=0)
        dcols = (dy2 @ wmat).reshape(N, Ho, Wo, C, k, k)
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        for di in range(k):
            for dj in range(k):
                dxp[:, :, di:di + s * (Ho - 1) + 1:s, dj:dj + s * (Wo - 1) + 1:s] += \
                    dcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + H, p:p + W] if p else dxp

    def __repr__(self):
        return f"Conv2d({self.in_ch}, {self.out_ch}, k={self.k}, stride={self.stride})"


class MaxPool2d(Layer):
    kind = "maxpool2d"

    def __init__(self, k: int = 2):
        super().__init__()
        self.k = k

    def out_shape(self, in_shape):
        C, H, W = in_shape
        if H % self.k or W % self.k:
            raise ConfigurationError(f"maxpool2d({self.k}) needs spatial dims divisible by {self.k}, got {in_shape}")
        return (C, H // self.k, W // self.k)

    def forward(self, x):
        N, C, H, W = x.shape
        self.out_shape((C, H, W))
        k = self.k
        blocks = x.reshape(N, C, H // k, k, W // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H // k, W // k, k * k)
        idx = blocks.argmax(axis=-1)
        self._cache = (x.shape, idx)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        x_shape, idx = self._pop_cache()
        N, C, H, W = x_shape
        k = self.k
        blocks = np.zeros((N, C, H // k, W // k, k * k), dtype=dy.dtype)
        np.put_along_axis(blocks, idx[..., None], dy[..., None], axis=-1)
        return blocks.reshape(N, C, H // k, W // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(x_shape)

    def __repr__(self):
        return f"MaxPool2d({self.k})"


class Upsample2x(Layer):
    """Nearest-neighbour upsampling by two."""

    kind = "upsample2x"

    def out_shape(self, in_shape):
        C, H, W = in_shape
        return (C, 2 * H, 2 * W)

    def forward(self, x):
        self._cache = x.shape
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, dy):
        N, C, H, W = self._pop_cache()
        return dy.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5))


class Linear(Layer):
    """Fully connected layer; spatial inputs are flattened."""

    kind = "fully_connected"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = Parameter(he_uniform(rng, (out_features, in_features), in_features, dtype))
        self.params["bias"] = Parameter(np.zeros(out_features, dtype=dtype))

    def out_shape(self, in_shape):
        if int(np.prod(in_shape)) != self.in_features:
            raise ConfigurationError(f"fully_connected expects {self.in_features} features, got {in_shape}")
        return (self.out_features,)

    def forward(self, x):
        x2 = x.reshape(x.shape[0], -1)
        if x2.shape[1] != self.in_features:
            raise ConfigurationError(f"fully_connected expects {self.in_features} features, got {x2.shape[1]}")
        self._cache = (x.shape, x2)
        return x2 @ self.params["weight"].data.T + self.params["bias"].data

    def backward(self, dy):
        x_shape, x2 = self._pop_cache()
        self.params["weight"].grad += dy.T @ x2
        self.params["bias"].grad += dy.sum(axis=0)
        return (dy @ self.params["weight"].data).reshape(x_shape)

    def __repr__(self):
        return f"Linear({self.in_features}, {self.out_features})"


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._pop_cache()


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        y = np.exp(-np.logaddexp(0.0, -x))
        self._cache = y
        return y

    def backward(self, dy):
        y = self._pop_cache()
        return dy * y * (1.0 - y)


LAYER_KINDS = {cls.kind: cls for cls in (Conv2d, MaxPool2d, Upsample2x, Linear, ReLU, Sigmoid)}
