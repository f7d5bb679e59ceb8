"""Conventional layers used around the adaptive convolutions.

Every layer offers ``forward(x, train) -> (out, cache)`` and
``backprop(cache, d_out, need_input_grad) -> (d_input, grads)`` where
``grads`` maps parameter names to gradient arrays.
"""
from __future__ import annotations

import numpy as np

from . import tensor
from .adaptive import glorot_uniform


class Conv2d:
    kind = "fixed-conv"

    def __init__(self, in_channels, filters, k=5, dtype=np.float32, rng=None, padding="same"):
        if padding not in ("same", "valid"):
            raise ValueError(f"unknown padding {padding!r}")
        rng = np.random.default_rng() if rng is None else rng
        self.padding = padding
        self.weights = glorot_uniform(rng, (filters, in_channels, k, k), in_channels * k * k, filters * k * k, dtype)
        self.bias = np.zeros(filters, dtype=dtype)

    @property
    def k(self):
        return self.weights.shape[-1]

    def params(self):
        return {"weights": self.weights, "bias": self.bias}

    def forward(self, x, train=False):
        conv = tensor.conv2d_same if self.padding == "same" else tensor.conv2d
        return conv(x, self.weights, self.bias), x

    def backward(self, cache, d_out, need_input_grad=True):
        back = tensor.conv2d_same_backward if self.padding == "same" else tensor.conv2d_backward
        return back(cache, self.weights, d_out, need_input_grad)

    def backprop(self, cache, d_out, need_input_grad=True):
        d_w, d_b, d_x = self.backward(cache, d_out, need_input_grad)
        return d_x, {"weights": d_w, "bias": d_b}


class MaxPool2x2:
    kind = "maxpool"

    def params(self):
        return {}

    def forward(self, x, train=False):
        out, idx = tensor.maxpool2x2(x)
        return out, idx

    def backprop(self, cache, d_out, need_input_grad=True):
        return tensor.maxpool2x2_backward(d_out, cache), {}


def dropout_forward(x, rate, mode, rng):
    """Inverted dropout. Returns ``(out, mask)`` with a 0/1 mask."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = np.asarray(x)
    if mode == "eval" or rate == 0:
        return x, np.ones_like(x)
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype)
    return x * mask * x.dtype.type(1.0 / (1.0 - rate)), mask


class Dropout:
    kind = "dropout"

    def __init__(self, rate=0.5, rng=None):
        self.rate = rate
        self.rng = np.random.default_rng() if rng is None else rng

    def params(self):
        return {}

    def forward(self, x, train=False):
        out, mask = dropout_forward(x, self.rate, "train" if train else "eval", self.rng)
        return out, mask

    def backprop(self, cache, d_out, need_input_grad=True):
        if self.rate == 0:
            return d_out, {}
        return d_out * cache * d_out.dtype.type(1.0 / (1.0 - self.rate)), {}


class Flatten:
    kind = "flatten"

    def params(self):
        return {}

    def forward(self, x, train=False):
        return x.reshape(x.shape[0], -1), x.shape

    def backprop(self, cache, d_out, need_input_grad=True):
        return d_out.reshape(cache), {}


class Dense:
    kind = "fully-connected"

    def __init__(self, n_in, n_out, dtype=np.float32, rng=None):
        rng = np.random.default_rng() if rng is None else rng
        self.weights = glorot_uniform(rng, (n_out, n_in), n_in, n_out, dtype)
        self.bias = np.zeros(n_out, dtype=dtype)

    def params(self):
        return {"weights": self.weights, "bias": self.bias}

    def forward(self, x, train=False):
        return tensor.fully_connected(x, self.weights, self.bias), x

    def backprop(self, cache, d_out, need_input_grad=True):
        grads = {"weights": d_out.T @ cache, "bias": d_out.sum(axis=0)}
        return (d_out @ self.weights if need_input_grad else None), grads


class ReLU:
    kind = "relu"

    def params(self):
        return {}

    def forward(self, x, train=False):
        mask = x > 0
        return x * mask, mask

    def backprop(self, cache, d_out, need_input_grad=True):
        return d_out * cache, {}


def sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class Sigmoid:
    kind = "sigmoid"

    def params(self):
        return {}

    def forward(self, x, train=False):
        y = sigmoid(x)
        return y, y

    def backprop(self, cache, d_out, need_input_grad=True):
        return d_out * cache * (1 - cache), {}
