"""Mini-batch SGD with classical momentum."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .datasets import batches
from .envelope import DEFAULT_PD_EPS, CovarianceSummary, eigen_summary_array, is_positive_definite
from .network import Network

log = logging.getLogger(__name__)


@dataclass
class TrainerConfig:
    learning_rate: float = 0.01
    momentum: float = 0.95
    batch_size: int = 500
    epochs: int = 10
    seed: int = 0
    precision: str = "single"
    eps_pd: float = DEFAULT_PD_EPS
    record_time: bool = True
    # verify positive definiteness after every epoch
    debug_checks: bool = False

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    test_error_pct: float
    seconds: float
    covariance: list = field(default_factory=list)


class NonFiniteLossError(RuntimeError):
    """Training diverged; ``network`` holds the last finite parameters."""

    def __init__(self, message, network=None, metrics=None):
        super().__init__(message)
        self.network = network
        self.metrics = metrics or []


class MomentumSGD:
    """``v <- momentum * v - lr * grad``; ``param += v``."""

    def __init__(self, learning_rate, momentum):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = {}

    def step(self, params, grads):
        for key, p in params.items():
            g = grads[key]
            v = self.velocity.get(key)
            if v is None:
                v = self.velocity[key] = np.zeros_like(p)
            v *= p.dtype.type(self.momentum)
            v -= p.dtype.type(self.learning_rate) * g.astype(p.dtype, copy=False)
            p += v


def covariance_summaries(sigma):
    lmax, lmin, theta = eigen_summary_array(sigma)
    s = np.asarray(sigma, dtype=np.float64)
    det = s[:, 0] * s[:, 1] - s[:, 2] ** 2
    return [CovarianceSummary(float(a), float(b), float(c), float(d)) for a, b, c, d in zip(lmax, lmin, theta, det)]


def error_percent(network, dataset, batch_size=500):
    if len(dataset) == 0:
        raise ValueError("empty evaluation set")
    pred = network.predict(dataset.images(network.dtype), batch_size)
    return 100.0 * float(np.mean(pred != dataset.labels))


def train(spec, train_set, test_set, config, network=None, on_epoch=None):
    """Train ``spec`` (or an existing ``network``) and return ``(network, metrics)``."""
    if len(train_set) == 0 or len(test_set) == 0:
        raise ValueError("training and test sets must be non-empty")
    if network is None:
        network = Network(spec, config.precision, seed=config.seed)
    if tuple(train_set.shape) != tuple(network.spec.input_shape):
        raise ValueError(f"data shape {train_set.shape} does not match network input {network.spec.input_shape}")
    params = {(i, name): arr for i, name, arr in network.named_params()}
    opt = MomentumSGD(config.learning_rate, config.momentum)
    metrics = []
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        total, seen = 0.0, 0
        for idx in batches(len(train_set), config.batch_size, config.seed, epoch):
            snapshot = {k: v.copy() for k, v in params.items()}
            loss, grads = network.loss_and_grads(train_set.images(network.dtype, idx), train_set.labels[idx], train=True)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                for k, v in snapshot.items():
                    params[k][...] = v
                raise NonFiniteLossError(f"non-finite loss in epoch {epoch}", network, metrics)
            opt.step(params, grads)
            network.project(config.eps_pd)
            total += loss * len(idx)
            seen += len(idx)
        err = error_percent(network, test_set)
        seconds = time.perf_counter() - start if config.record_time else 0.0
        sigma = network.covariance()
        if config.debug_checks and network.is_adaptive:
            for layer in network.adaptive_layers:
                assert np.all(is_positive_definite(layer.sigma)), "envelope left the PD cone"
        m = EpochMetrics(epoch, total / seen, err, seconds, covariance_summaries(sigma) if sigma is not None else [])
        log.info("epoch %d loss %.5f test error %.2f%% (%.1fs)", epoch, m.train_loss, err, seconds)
        metrics.append(m)
        if on_epoch is not None:
            on_epoch(m, network)
    return network, metrics
