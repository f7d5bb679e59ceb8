"""Convolution whose kernels are masked by a learnable Gaussian envelope.

Each output filter ``f`` owns one covariance triple; its envelope ``U_f``
is shared by all input channels, and the kernel actually convolved is
``W'[f, c] = W[f, c] * U_f``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from .envelope import (
    EnvelopeParams,
    GridSpec,
    envelope_bank,
    envelope_grad_bank,
    project_bank,
)


@dataclass
class LayerGradients:
    d_weights: np.ndarray
    d_sigma: np.ndarray
    d_bias: np.ndarray
    d_input: np.ndarray | None


@dataclass
class AdaptiveCache:
    layer_id: int
    x: np.ndarray
    sigma: np.ndarray
    envelopes: np.ndarray
    masked: np.ndarray


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape).astype(dtype)


class AdaptiveConv2d:
    """Same-padded adaptive convolution over an ``n x n`` base grid."""

    kind = "adaptive-conv"

    def __init__(self, in_channels, filters, n=11, dtype=np.float32, rng=None, padding="same"):
        self.grid = GridSpec(n)
        if padding not in ("same", "valid"):
            raise ValueError(f"unknown padding {padding!r}")
        self.padding = padding
        rng = np.random.default_rng() if rng is None else rng
        # identity covariance at start
        self.sigma = np.tile(np.array([1.0, 1.0, 0.0], dtype=dtype), (filters, 1))
        # Glorot fans count the cells the envelope lets through (sum of U^2),
        # not the whole grid, otherwise masked kernels start ~n/3 times too small
        energy = float((envelope_bank(n, self.sigma[:1]) ** 2).sum())
        self.weights = glorot_uniform(
            rng, (filters, in_channels, n, n), in_channels * energy, filters * energy, dtype
        )
        self.bias = np.zeros(filters, dtype=dtype)
        # test hook: when set, every envelope is replaced by ones
        self.freeze_envelope = False

    @property
    def n(self):
        return self.grid.n

    @property
    def filters(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[1]

    def params(self):
        return {"weights": self.weights, "bias": self.bias, "sigma": self.sigma}

    def envelope_params(self):
        return [EnvelopeParams.from_array(s, self.n) for s in self.sigma]

    def envelopes(self):
        if self.freeze_envelope:
            return np.ones((self.filters, self.n, self.n))
        return envelope_bank(self.n, self.sigma)

    def masked_weights(self):
        u = self.envelopes().astype(self.weights.dtype)
        return self.weights * u[:, None]

    def project(self, eps):
        project_bank(self.sigma, eps)

    def forward(self, x, train=False):
        x = np.asarray(x)
        c_in = x.shape[-3]
        if c_in != self.in_channels:
            raise ValueError(f"channel mismatch: layer expects {self.in_channels}, input has {c_in}")
        u = self.envelopes()
        masked = self.weights * u.astype(self.weights.dtype)[:, None]
        conv = tensor.conv2d_same if self.padding == "same" else tensor.conv2d
        out = conv(x, masked, self.bias)
        return out, AdaptiveCache(id(self), x, self.sigma.copy(), u, masked)

    def backward(self, cache, d_out, need_input_grad=True):
        if not isinstance(cache, AdaptiveCache) or cache.layer_id != id(self):
            raise ValueError("cache does not belong to this layer")
        if not np.array_equal(cache.sigma, self.sigma):
            raise ValueError("stale cache: envelope parameters changed since forward")
        back = tensor.conv2d_same_backward if self.padding == "same" else tensor.conv2d_backward
        d_masked, d_bias, d_input = back(cache.x, cache.masked, d_out, need_input_grad)
        u = cache.envelopes
        d_weights = d_masked * u.astype(d_masked.dtype)[:, None]
        if self.freeze_envelope:
            d_sigma = np.zeros_like(self.sigma)
        else:
            upstream = (d_masked.astype(np.float64) * self.weights).sum(axis=1)
            d_sigma = envelope_grad_bank(self.n, self.sigma, upstream).astype(self.sigma.dtype)
        return LayerGradients(d_weights, d_sigma, d_bias, d_input)

    def backprop(self, cache, d_out, need_input_grad=True):
        g = self.backward(cache, d_out, need_input_grad)
        return g.d_input, {"weights": g.d_weights, "bias": g.d_bias, "sigma": g.d_sigma}

    def effective_size(self, f, threshold):
        if not 0 < threshold:
            raise ValueError("threshold must be positive")
        return int(np.count_nonzero(self.envelopes()[f] >= threshold))


def effective_size(layer, f, threshold):
    return layer.effective_size(f, threshold)
