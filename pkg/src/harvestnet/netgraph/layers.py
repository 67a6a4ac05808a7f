"""Layer primitives and shape propagation."""
from __future__ import annotations

import enum
from dataclasses import dataclass

from ..errors import ValidationError


class LayerKind(enum.Enum):
    CONV2D = "Conv2D"
    FULLY_CONNECTED = "FullyConnected"
    RELU = "ReLU"
    MAX_POOL = "MaxPool"
    ADAPTIVE_AVG_POOL = "AdaptiveAvgPool"
    RESIDUAL_ADD = "ResidualAdd"
    DENSE_CONCAT = "DenseConcat"
    FLATTEN = "Flatten"
    SOFTMAX = "Softmax"


PARAMETRIC = (LayerKind.CONV2D, LayerKind.FULLY_CONNECTED)
MULTI_INPUT = (LayerKind.RESIDUAL_ADD, LayerKind.DENSE_CONCAT)


@dataclass(frozen=True)
class LayerSpec:
    """One node of the graph.

    ``inputs`` names earlier layers (or ``"input"``). An empty tuple means
    "the previous layer"; the network resolves it when it is assembled.
    Hyperparameters irrelevant to ``kind`` stay at their defaults.
    """

    name: str
    kind: LayerKind
    inputs: tuple[str, ...] = ()
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 1
    stride: int = 1
    padding: int = 0
    in_features: int = 0
    out_features: int = 0
    output_size: int = 1
    bias: bool = True

    @property
    def is_parametric(self) -> bool:
        return self.kind in PARAMETRIC

    def weight_shape(self) -> tuple[int, ...]:
        if self.kind is LayerKind.CONV2D:
            return (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)
        if self.kind is LayerKind.FULLY_CONNECTED:
            return (self.out_features, self.in_features)
        raise ValidationError(f"layer {self.name!r} ({self.kind.value}) has no weights")

    def bias_shape(self) -> tuple[int, ...] | None:
        if not self.is_parametric or not self.bias:
            return None
        return (self.out_channels,) if self.kind is LayerKind.CONV2D else (self.out_features,)

    def param_count(self) -> int:
        if not self.is_parametric:
            return 0
        n = 1
        for d in self.weight_shape():
            n *= d
        b = self.bias_shape()
        return n + (b[0] if b else 0)

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind.value}
        if self.inputs:
            d["inputs"] = list(self.inputs)
        k = self.kind
        if k is LayerKind.CONV2D:
            d.update(in_channels=self.in_channels, out_channels=self.out_channels,
                     kernel_size=self.kernel_size, stride=self.stride, padding=self.padding, bias=self.bias)
        elif k is LayerKind.FULLY_CONNECTED:
            d.update(in_features=self.in_features, out_features=self.out_features, bias=self.bias)
        elif k is LayerKind.MAX_POOL:
            d.update(kernel_size=self.kernel_size, stride=self.stride)
        elif k is LayerKind.ADAPTIVE_AVG_POOL:
            d.update(output_size=self.output_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        try:
            kind = LayerKind(d.pop("kind"))
            name = d.pop("name")
        except KeyError as e:
            raise ValidationError(f"layer entry missing key {e.args[0]!r}") from None
        except ValueError as e:
            raise ValidationError(str(e)) from None
        inputs = tuple(d.pop("inputs", ()))
        allowed = set(cls.__dataclass_fields__) - {"name", "kind", "inputs"}
        unknown = set(d) - allowed
        if unknown:
            raise ValidationError(f"layer {name!r}: unknown keys {sorted(unknown)}")
        return cls(name=name, kind=kind, inputs=inputs, **d)


def conv_out(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def infer_shape(layer: LayerSpec, in_shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
    """Output shape of ``layer`` for the given input shapes; raises on mismatch."""
    k = layer.kind
    name = layer.name

    def fail(msg):
        raise ValidationError(f"layer {name!r} ({k.value}): {msg}")

    if k in MULTI_INPUT:
        if len(in_shapes) < 2:
            fail("needs at least two inputs")
    elif len(in_shapes) != 1:
        fail(f"expects one input, got {len(in_shapes)}")
    x = in_shapes[0]

    if k is LayerKind.CONV2D:
        if len(x) != 3:
            fail(f"expects (C,H,W) input, got {x}")
        if min(layer.in_channels, layer.out_channels, layer.kernel_size, layer.stride) < 1 or layer.padding < 0:
            fail("channels, kernel_size and stride must be positive, padding non-negative")
        if x[0] != layer.in_channels:
            fail(f"in_channels={layer.in_channels} but input has {x[0]} channels")
        h = conv_out(x[1], layer.kernel_size, layer.stride, layer.padding)
        w = conv_out(x[2], layer.kernel_size, layer.stride, layer.padding)
        if h < 1 or w < 1:
            fail(f"kernel does not fit input {x}")
        return (layer.out_channels, h, w)
    if k is LayerKind.FULLY_CONNECTED:
        if len(x) != 1:
            fail(f"expects flat input, got {x}")
        if layer.in_features < 1 or layer.out_features < 1:
            fail("features must be positive")
        if x[0] != layer.in_features:
            fail(f"in_features={layer.in_features} but input has {x[0]}")
        return (layer.out_features,)
    if k in (LayerKind.RELU, LayerKind.SOFTMAX):
        return x
    if k is LayerKind.MAX_POOL:
        if len(x) != 3:
            fail(f"expects (C,H,W) input, got {x}")
        if layer.kernel_size < 1 or layer.stride < 1:
            fail("kernel_size and stride must be positive")
        h = conv_out(x[1], layer.kernel_size, layer.stride, 0)
        w = conv_out(x[2], layer.kernel_size, layer.stride, 0)
        if h < 1 or w < 1:
            fail(f"window does not fit input {x}")
        return (x[0], h, w)
    if k is LayerKind.ADAPTIVE_AVG_POOL:
        if len(x) != 3:
            fail(f"expects (C,H,W) input, got {x}")
        o = layer.output_size
        if o < 1 or o > min(x[1], x[2]):
            fail(f"output_size {o} invalid for input {x}")
        return (x[0], o, o)
    if k is LayerKind.FLATTEN:
        n = 1
        for d in x:
            n *= d
        return (n,)
    if k is LayerKind.RESIDUAL_ADD:
        if any(s != x for s in in_shapes):
            fail(f"operand shapes differ: {in_shapes}")
        return x
    if k is LayerKind.DENSE_CONCAT:
        if any(len(s) != 3 or s[1:] != x[1:] for s in in_shapes):
            fail(f"spatial shapes differ: {in_shapes}")
        return (sum(s[0] for s in in_shapes),) + tuple(x[1:])
    fail("unsupported layer kind")  # pragma: no cover


def macs_for(layer: LayerSpec, out_shape: tuple[int, ...]) -> int:
    """Multiply-accumulates for one forward pass (batch of one)."""
    if layer.kind is LayerKind.CONV2D:
        k = layer.kernel_size
        return k * k * layer.in_channels * layer.out_channels * out_shape[1] * out_shape[2]
    if layer.kind is LayerKind.FULLY_CONNECTED:
        return layer.in_features * layer.out_features
    return 0


def conv(name, cin, cout, k=3, stride=1, padding=None, bias=True, inputs=()):
    if padding is None:
        padding = k // 2
    return LayerSpec(name, LayerKind.CONV2D, tuple(inputs), in_channels=cin, out_channels=cout,
                     kernel_size=k, stride=stride, padding=padding, bias=bias)


def fc(name, fin, fout, bias=True, inputs=()):
    return LayerSpec(name, LayerKind.FULLY_CONNECTED, tuple(inputs), in_features=fin, out_features=fout, bias=bias)


def relu(name, inputs=()):
    return LayerSpec(name, LayerKind.RELU, tuple(inputs))


def maxpool(name, k=2, stride=None, inputs=()):
    return LayerSpec(name, LayerKind.MAX_POOL, tuple(inputs), kernel_size=k, stride=stride or k)


def avgpool(name, output_size=1, inputs=()):
    return LayerSpec(name, LayerKind.ADAPTIVE_AVG_POOL, tuple(inputs), output_size=output_size)


def flatten(name, inputs=()):
    return LayerSpec(name, LayerKind.FLATTEN, tuple(inputs))


def add(name, inputs):
    return LayerSpec(name, LayerKind.RESIDUAL_ADD, tuple(inputs))


def concat(name, inputs):
    return LayerSpec(name, LayerKind.DENSE_CONCAT, tuple(inputs))

