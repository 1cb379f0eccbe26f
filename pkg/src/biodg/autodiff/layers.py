"""Layer library and a shape-checked sequential container.

Tensors are channels-last: conv inputs are (N, H, W, C). Every layer is
described by a JSON-able spec dict (``kind`` plus hyperparameters) so that
networks can be rebuilt from a checkpoint descriptor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ShapeError
from . import tensor as T
from .tensor import Tensor


@dataclass
class Pass:
    """Per-forward context. ``rng`` set means sampled (stochastic) layers draw noise.

    ``noise`` lets tests freeze the draws: a mapping from layer name to the
    arrays that layer would otherwise sample.
    """

    rng: np.random.Generator | None = None
    noise: dict | None = None
    record: dict = field(default_factory=dict)


DETERMINISTIC = Pass()


def he_uniform(rng, shape, fan_in, dtype):
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    kind = "layer"

    def __init__(self):
        self.name = None
        self.params: dict[str, Tensor] = {}
        self.in_shape = None
        self.out_shape = None

    def build(self, in_shape, rng, dtype):
        self.in_shape = tuple(in_shape)
        self.out_shape = self.infer(self.in_shape)
        return self.out_shape

    def infer(self, in_shape):
        return in_shape

    def spec(self) -> dict:
        return {"kind": self.kind}

    def __call__(self, x: Tensor, ctx: Pass = DETERMINISTIC) -> Tensor:
        if self.in_shape is not None and tuple(x.shape[1:]) != self.in_shape:
            raise ShapeError(
                f"layer {self.name or self.kind!r} expects per-example shape {self.in_shape}, got {tuple(x.shape[1:])}"
            )
        return self.forward(x, ctx)

    def forward(self, x, ctx):
        raise NotImplementedError


def conv_out_shape(layer, in_shape):
    if len(in_shape) != 3:
        raise ShapeError(f"{layer.kind} layer {layer.name!r} needs (H, W, C) input, got {in_shape}")
    h, w, _ = in_shape
    kh, kw = layer.kernel
    sh, sw = layer.stride
    if h < kh or w < kw:
        raise ShapeError(f"{layer.kind} layer {layer.name!r}: kernel {layer.kernel} larger than input {in_shape[:2]}")
    return ((h - kh) // sh + 1, (w - kw) // sw + 1, layer.filters)


class Dense(Layer):
    kind = "dense"

    def __init__(self, units):
        super().__init__()
        self.units = int(units)

    def infer(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"dense layer {self.name!r} needs flat input, got {in_shape}")
        return (self.units,)

    def build(self, in_shape, rng, dtype):
        out = super().build(in_shape, rng, dtype)
        fan_in = in_shape[0]
        self.params = {
            "kernel": Tensor(he_uniform(rng, (fan_in, self.units), fan_in, dtype), requires_grad=True),
            "bias": Tensor(np.zeros(self.units, dtype=dtype), requires_grad=True),
        }
        return out

    def forward(self, x, ctx):
        return T.add(T.matmul(x, self.params["kernel"]), self.params["bias"])

    def spec(self):
        return {"kind": self.kind, "units": self.units}


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, filters, kernel=(3, 3), stride=(1, 1)):
        super().__init__()
        self.filters = int(filters)
        self.kernel = tuple(int(k) for k in kernel)
        self.stride = tuple(int(s) for s in stride)

    def infer(self, in_shape):
        return conv_out_shape(self, in_shape)

    def build(self, in_shape, rng, dtype):
        out = super().build(in_shape, rng, dtype)
        kh, kw = self.kernel
        c = in_shape[2]
        fan_in = kh * kw * c
        self.params = {
            "kernel": Tensor(he_uniform(rng, (kh, kw, c, self.filters), fan_in, dtype), requires_grad=True),
            "bias": Tensor(np.zeros(self.filters, dtype=dtype), requires_grad=True),
        }
        return out

    def forward(self, x, ctx):
        return T.conv2d(x, self.params["kernel"], self.stride, bias=self.params["bias"])

    def spec(self):
        return {"kind": self.kind, "filters": self.filters, "kernel": list(self.kernel),
                "stride": list(self.stride)}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, ctx):
        return T.relu(x)


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, ctx):
        return T.sigmoid(x)


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, ctx):
        return T.softmax(x)


class L2Normalize(Layer):
    kind = "l2_normalize"

    def forward(self, x, ctx):
        return T.l2_normalize(x)


class Flatten(Layer):
    kind = "flatten"

    def infer(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, ctx):
        return T.flatten(x)


class MaxPool2D(Layer):
    kind = "max_pool"

    def __init__(self, pool=(2, 2)):
        super().__init__()
        self.pool = tuple(int(p) for p in pool)

    def infer(self, in_shape):
        h, w, c = in_shape
        ph, pw = self.pool
        if h < ph or w < pw:
            raise ShapeError(f"max_pool layer {self.name!r}: window {self.pool} larger than input {in_shape[:2]}")
        return (h // ph, w // pw, c)

    def forward(self, x, ctx):
        return T.max_pool2d(x, *self.pool)

    def spec(self):
        return {"kind": self.kind, "pool": list(self.pool)}


LAYER_KINDS = {
    cls.kind: cls for cls in (Dense, Conv2D, ReLU, Sigmoid, Softmax, L2Normalize, Flatten, MaxPool2D)
}


def register_layer(cls):
    LAYER_KINDS[cls.kind] = cls
    return cls


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind")
    try:
        cls = LAYER_KINDS[kind]
    except KeyError:
        raise ConfigError(f"unknown layer kind {kind!r}") from None
    return cls(**spec)


class Sequential:
    """Ordered layers; ``build`` propagates and validates shapes up front."""

    def __init__(self, layers, name="net"):
        self.layers = list(layers)
        self.name = name
        self.in_shape = None
        self.out_shape = None

    @classmethod
    def from_specs(cls, specs, name="net"):
        return cls([layer_from_spec(s) for s in specs], name=name)

    def build(self, in_shape, rng, dtype=np.float32):
        shape = tuple(in_shape)
        self.in_shape = shape
        for i, layer in enumerate(self.layers):
            layer.name = f"{self.name}.{i}.{layer.kind}"
            shape = layer.build(shape, rng, dtype)
        self.out_shape = shape
        return shape

    def __call__(self, x, ctx: Pass = DETERMINISTIC):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        for layer in self.layers:
            x = layer(x, ctx)
        return x

    def named_params(self):
        for layer in self.layers:
            for pname, p in layer.params.items():
                yield f"{layer.name}.{pname}", p

    def specs(self):
        return [layer.spec() for layer in self.layers]
