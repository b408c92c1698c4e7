"""Encoder (autoencoder-shaped MLP), MIL pooling heads and the bag classifier."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Value
from .errors import ConfigError, EmptyBagError, ShapeError

POOLINGS = ("mean", "max", "attention")


class Linear:
    """y = x @ W + b with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init."""

    def __init__(self, n_in, n_out, rng, name, group):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Parameter(Value(rng.uniform(-bound, bound, (n_in, n_out))), f"{name}.weight", group)
        self.bias = Parameter(Value(rng.uniform(-bound, bound, n_out)), f"{name}.bias", group)

    @property
    def n_in(self):
        return self.weight.data.shape[0]

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.weight.value), self.bias.value)

    def parameters(self):
        return [self.weight, self.bias]


class MLP:
    """Linear layers with ReLU between them and a linear output."""

    def __init__(self, sizes, rng, name, group):
        if len(sizes) < 2:
            raise ConfigError(f"{name}: need at least input and output sizes, got {sizes}")
        self.sizes = tuple(int(s) for s in sizes)
        self.layers = [
            Linear(a, b, rng, f"{name}.{i}", group) for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x):
        if x.shape[-1] != self.sizes[0]:
            raise ShapeError(f"expected input width {self.sizes[0]}, got {x.shape[-1]}")
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


class EncoderNet(MLP):
    def __init__(self, sizes, rng):
        super().__init__(sizes, rng, "encoder", "encoder")
        if sizes[0] != sizes[-1]:
            raise ConfigError(f"encoder must map d -> d, got sizes {sizes}")

    def encode(self, x):
        if not isinstance(x, Value):
            x = Value(x)
        return self(x)


class PoolingHead:
    """One of mean / max / attention pooling followed by a d -> hdim -> C classifier."""

    def __init__(self, kind, d, hdim, n_classes, rng, attention_dim=64):
        if kind not in POOLINGS:
            raise ConfigError(f"unknown pooling {kind!r}; choose from {POOLINGS}")
        self.kind = kind
        self.d = d
        self.n_classes = n_classes
        if kind == "attention":
            bound = 1.0 / np.sqrt(d)
            self.attn_v = Parameter(Value(rng.uniform(-bound, bound, (d, attention_dim))), "head.attn_v", "task")
            bound = 1.0 / np.sqrt(attention_dim)
            self.attn_w = Parameter(Value(rng.uniform(-bound, bound, attention_dim)), "head.attn_w", "task")
        self.classifier = MLP((d, hdim, n_classes), rng, "head.classifier", "task")

    def attention_weights(self, h, mask):
        scores = ad.matmul(ad.tanh(ad.matmul(h, self.attn_v.value)), self.attn_w.value)
        return ad.masked_softmax(scores, mask)

    def pool(self, h, mask=None):
        if mask is None:
            mask = np.ones(h.shape[0], dtype=bool)
        mask = np.asarray(mask).astype(bool)
        if not mask.any():
            raise EmptyBagError("pool: bag has no unmasked instances")
        if self.kind == "mean":
            return ad.masked_mean(h, mask)
        if self.kind == "max":
            return ad.masked_max(h, mask)
        a = self.attention_weights(h, mask)
        return ad.matmul(a, h)

    def classify(self, z):
        return self.classifier(z)

    def __call__(self, h, mask=None):
        return self.classify(self.pool(h, mask))

    def parameters(self):
        extra = [self.attn_v, self.attn_w] if self.kind == "attention" else []
        return extra + self.classifier.parameters()
