"""Network descriptions, the three benchmark presets, and the loss."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .adaptive import AdaptiveConv2d
from .layers import Conv2d, Dense, Dropout, Flatten, MaxPool2x2, ReLU, Sigmoid
from .tensor import as_dtype

PRESETS = ("acnn-11", "cnn-5", "cnn-11")
DATASET_SHAPES = {
    "mnist": (1, 28, 28),
    "mnist-cluttered": (1, 60, 60),
    "cifar10": (3, 32, 32),
}
LAYER_KINDS = ("adaptive-conv", "fixed-conv", "maxpool", "dropout", "fully-connected")
ACTIVATIONS = ("relu", "sigmoid", "none")
CE_EPS = 1e-7


@dataclass
class LayerSpec:
    kind: str
    filters: int = 0
    size: int = 0
    units: int = 0
    rate: float = 0.0
    activation: str = "none"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class NetworkSpec:
    input_shape: tuple
    layers: list = field(default_factory=list)
    name: str = ""
    dataset: str = ""

    def shapes(self):
        """Per-layer output shapes; raises if adjacent layers do not compose."""
        shape = tuple(self.input_shape)
        out = []
        for i, ls in enumerate(self.layers):
            if ls.kind in ("adaptive-conv", "fixed-conv"):
                if len(shape) != 3:
                    raise ValueError(f"layer {i}: convolution needs [C,H,W] input, got {shape}")
                if ls.size % 2 == 0 or ls.size < 1:
                    raise ValueError(f"layer {i}: kernel size must be odd, got {ls.size}")
                shape = (ls.filters, shape[1], shape[2])
            elif ls.kind == "maxpool":
                if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                    raise ValueError(f"layer {i}: maxpool needs even [C,H,W], got {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif ls.kind == "fully-connected":
                shape = (ls.units,)
            out.append(shape)
        return out

    @property
    def output_size(self):
        return int(np.prod(self.shapes()[-1]))

    def to_dict(self):
        return {
            "name": self.name,
            "dataset": self.dataset,
            "input_shape": list(self.input_shape),
            "layers": [asdict(ls) for ls in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            input_shape=tuple(d["input_shape"]),
            layers=[LayerSpec(**ls) for ls in d["layers"]],
            name=d.get("name", ""),
            dataset=d.get("dataset", ""),
        )


def build_preset(name, dataset):
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}, expected one of {PRESETS}")
    if dataset not in DATASET_SHAPES:
        raise ValueError(f"unknown dataset {dataset!r}, expected one of {tuple(DATASET_SHAPES)}")
    filters = 16 if dataset == "cifar10" else 8
    kind = "adaptive-conv" if name == "acnn-11" else "fixed-conv"
    size = 5 if name == "cnn-5" else 11
    layers = [
        LayerSpec(kind, filters=filters, size=size, activation="relu"),
        LayerSpec("maxpool"),
        LayerSpec(kind, filters=filters, size=size, activation="relu"),
        LayerSpec("maxpool"),
        LayerSpec("dropout", rate=0.5),
        LayerSpec("fully-connected", units=256, activation="relu"),
        LayerSpec("fully-connected", units=10, activation="sigmoid"),
    ]
    spec = NetworkSpec(DATASET_SHAPES[dataset], layers, name=name, dataset=dataset)
    spec.shapes()
    return spec


def cross_entropy(predictions, target, eps=CE_EPS):
    """Binary cross-entropy summed over independent sigmoid outputs.

    ``predictions`` is ``[K]`` or ``[N, K]``; ``target`` a class index or
    ``[N]`` indices. Returns ``(loss, d_predictions)``, with the loss averaged
    over the batch and the gradient scaled to match.
    """
    p = np.asarray(predictions, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    t = one_hot(np.atleast_1d(target), p.shape[1])
    pc = np.clip(p, eps, 1 - eps)
    per_sample = -(t * np.log(pc) + (1 - t) * np.log(1 - pc)).sum(axis=1)
    grad = (-(t / pc) + (1 - t) / (1 - pc)) / p.shape[0]
    return float(per_sample.mean()), (grad[0] if single else grad)


def one_hot(labels, k=10):
    labels = np.asarray(labels)
    t = np.zeros((labels.shape[0], k))
    t[np.arange(labels.shape[0]), labels] = 1.0
    return t


class Network:
    """Sequential stack realised from a :class:`NetworkSpec`.

    Activations become their own layers, and a ``Flatten`` is inserted
    before the first fully-connected layer.
    """

    def __init__(self, spec, precision="single", seed=0):
        spec.shapes()
        self.spec = spec
        self.precision = precision
        self.dtype = as_dtype(precision)
        rng = np.random.default_rng(seed)
        self.dropout_rng = np.random.default_rng(rng.integers(2**63))
        self.layers = []
        shape = tuple(spec.input_shape)
        for ls in spec.layers:
            if ls.kind in ("adaptive-conv", "fixed-conv"):
                cls = AdaptiveConv2d if ls.kind == "adaptive-conv" else Conv2d
                self.layers.append(cls(shape[0], ls.filters, ls.size, dtype=self.dtype, rng=rng))
                shape = (ls.filters,) + shape[1:]
            elif ls.kind == "maxpool":
                self.layers.append(MaxPool2x2())
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif ls.kind == "dropout":
                self.layers.append(Dropout(ls.rate, self.dropout_rng))
            else:
                if len(shape) != 1:
                    self.layers.append(Flatten())
                    shape = (int(np.prod(shape)),)
                self.layers.append(Dense(shape[0], ls.units, dtype=self.dtype, rng=rng))
                shape = (ls.units,)
            if ls.activation == "relu":
                self.layers.append(ReLU())
            elif ls.activation == "sigmoid":
                self.layers.append(Sigmoid())

    @property
    def adaptive_layers(self):
        return [layer for layer in self.layers if isinstance(layer, AdaptiveConv2d)]

    @property
    def is_adaptive(self):
        return bool(self.adaptive_layers)

    def named_params(self):
        """``(layer_index, name, array)`` for every trainable array."""
        return [(i, name, arr) for i, layer in enumerate(self.layers) for name, arr in layer.params().items()]

    def parameter_count(self):
        return sum(arr.size for _, _, arr in self.named_params())

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=self.dtype)
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, train)
            caches.append(cache)
        return x, caches

    def predict(self, x, batch_size=500):
        out = [self.forward(x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
        return np.concatenate(out).argmax(axis=1)

    def loss_and_grads(self, x, labels, train=True):
        """Mean cross-entropy over the batch and gradients for every parameter.

        With a sigmoid output the loss gradient is taken w.r.t. the logits
        directly (``p - t``), which stays informative when outputs saturate.
        """
        out, caches = self.forward(x, train)
        loss, d = cross_entropy(out, labels)
        layers = self.layers
        if isinstance(layers[-1], Sigmoid):
            n = out.shape[0]
            d = (out.astype(np.float64) - one_hot(labels, out.shape[1])) / n
            layers = layers[:-1]
            caches = caches[:-1]
        d = d.astype(self.dtype)
        grads = {}
        for i in range(len(layers) - 1, -1, -1):
            d, g = layers[i].backprop(caches[i], d, need_input_grad=i > 0)
            for name, arr in g.items():
                grads[(i, name)] = arr
        return loss, grads

    def project(self, eps):
        for layer in self.adaptive_layers:
            layer.project(eps)

    def covariance(self):
        """Covariance triples of the first adaptive layer, or None."""
        layers = self.adaptive_layers
        return layers[0].sigma.copy() if layers else None
