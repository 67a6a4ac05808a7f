"""Inference engine: FP32 float path and Q8/Q4 integer-code path.

In the quantized path every Conv2D/FullyConnected layer quantizes its input
activation with frozen per-layer parameters, multiplies integer codes against
integer weight codes, and converts the wide accumulator back to a real
output. With real weight ``w = qw*sw + zw`` and activation ``a = qa*sa + za``
summed over the ``n`` valid taps of a receptive field::

    y = (sw*sa)*Σqw*qa + (sw*za)*Σqw + (zw*sa)*Σqa + (zw*za)*n + bias

Padded taps hold real zero and are excluded from every sum. Parameter-free
layers operate on the real values in between.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError
from ..quantizer import (
    BitWidth,
    QuantParams,
    QuantTensor,
    RangeObserver,
    affine_quantize,
    calibrate_tensor,
    compute_qparams,
    dequantize,
    observe,
)
from . import ops
from .graph import INPUT, MultiExitNetwork
from .layers import LayerKind, LayerSpec

ACT_SAMPLE_LIMIT = 200_000


@dataclass
class WeightSet:
    """Parameters for one precision.

    ``tensors`` maps ``"<layer>.weight"`` / ``"<layer>.bias"`` to arrays; at
    Q8/Q4 weights are :class:`QuantTensor` and biases stay real.
    ``act_params`` maps each parametric layer to the parameters of its input
    activation (quantized precisions only).
    """

    precision: BitWidth
    tensors: dict = field(default_factory=dict)
    act_params: dict = field(default_factory=dict)

    def weight(self, name: str):
        return self.tensors[f"{name}.weight"]

    def bias(self, name: str):
        return self.tensors.get(f"{name}.bias")

    def real_weight(self, name: str) -> np.ndarray:
        w = self.weight(name)
        return dequantize(w) if isinstance(w, QuantTensor) else w

    def validate(self, net: MultiExitNetwork) -> None:
        expected = set()
        for layer in net.parametric_layers():
            key = f"{layer.name}.weight"
            expected.add(key)
            if key not in self.tensors:
                raise ValidationError(f"missing weights for layer {layer.name!r}")
            w = self.tensors[key]
            if tuple(w.shape) != layer.weight_shape():
                raise ValidationError(f"{key}: shape {tuple(w.shape)} != graph {layer.weight_shape()}")
            quantized = isinstance(w, QuantTensor)
            if self.precision is BitWidth.FP32 and quantized:
                raise ValidationError(f"{key}: FP32 weight set holds a quantized tensor")
            if self.precision is not BitWidth.FP32:
                if not quantized or w.params.bit_width is not self.precision:
                    raise ValidationError(f"{key}: expected {self.precision.name} codes")
                if layer.name not in self.act_params:
                    raise ValidationError(f"missing activation parameters for layer {layer.name!r}")
            bshape = layer.bias_shape()
            if bshape is not None:
                bkey = f"{layer.name}.bias"
                expected.add(bkey)
                if bkey not in self.tensors:
                    raise ValidationError(f"missing bias for layer {layer.name!r}")
                if tuple(self.tensors[bkey].shape) != bshape:
                    raise ValidationError(f"{bkey}: shape {self.tensors[bkey].shape} != graph {bshape}")
        extra = set(self.tensors) - expected
        if extra:
            raise ValidationError(f"weight set has tensors unknown to the graph: {sorted(extra)[:5]}")


def init_weights(net: MultiExitNetwork, seed: int = 0, zero: bool = False) -> WeightSet:
    """He-normal weights and zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for layer in net.parametric_layers():
        shape = layer.weight_shape()
        fan_in = int(np.prod(shape[1:]))
        tensors[f"{layer.name}.weight"] = (
            np.zeros(shape) if zero else rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        )
        if layer.bias_shape():
            tensors[f"{layer.name}.bias"] = np.zeros(layer.bias_shape())
    return WeightSet(BitWidth.FP32, tensors)


def _inputs_of(layer: LayerSpec, acts: dict):
    try:
        return [acts[s] for s in layer.inputs]
    except KeyError as e:
        raise ValidationError(f"layer {layer.name!r}: input {e.args[0]!r} not computed") from None


def _quant_conv(x, layer, wq: QuantTensor, b, ap: QuantParams, record):
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    n = x.shape[0]
    qa = affine_quantize(x, ap).codes.astype(np.float64)
    cols_q, ho, wo = ops.im2col(qa, k, s, p)
    cols_m, _, _ = ops.im2col(np.ones_like(qa), k, s, p)
    wflat = wq.codes.reshape(wq.shape[0], -1).astype(np.float64)
    # integer-valued float64 products and sums are exact well below 2**53
    acc = cols_q @ wflat.T
    sum_w = cols_m @ wflat.T
    sum_a = cols_q.sum(axis=1, keepdims=True)
    taps = cols_m.sum(axis=1, keepdims=True)
    y = _requant(acc, sum_w, sum_a, taps, wq.params, ap, b)
    if record is not None:
        record[layer.name] = {"codes": qa.astype(np.int64), "acc": acc.astype(np.int64)}
    return y.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)


def _quant_linear(x, layer, wq: QuantTensor, b, ap: QuantParams, record):
    qa = affine_quantize(x, ap).codes.astype(np.float64)
    wf = wq.codes.astype(np.float64)
    acc = qa @ wf.T
    sum_w = wf.sum(axis=1)[None, :]
    sum_a = qa.sum(axis=1, keepdims=True)
    taps = np.full_like(sum_a, float(x.shape[1]))
    y = _requant(acc, sum_w, sum_a, taps, wq.params, ap, b)
    if record is not None:
        record[layer.name] = {"codes": qa.astype(np.int64), "acc": acc.astype(np.int64)}
    return y


def _requant(acc, sum_w, sum_a, taps, wp: QuantParams, ap: QuantParams, b):
    sw, zw, sa, za = wp.scale, wp.zero_point, ap.scale, ap.zero_point
    y = (sw * sa) * acc + (sw * za) * sum_w + (zw * sa) * sum_a + (zw * za) * taps
    if b is not None:
        y = y + b
    return y


def apply_layer(layer: LayerSpec, xs: list, weights: WeightSet, quantized: bool, record=None):
    k = layer.kind
    if k is LayerKind.CONV2D or k is LayerKind.FULLY_CONNECTED:
        x = xs[0]
        b = weights.bias(layer.name)
        if quantized:
            ap = weights.act_params[layer.name]
            wq = weights.weight(layer.name)
            if k is LayerKind.CONV2D:
                return _quant_conv(x, layer, wq, b, ap, record)
            return _quant_linear(x, layer, wq, b, ap, record)
        w = weights.real_weight(layer.name)
        if k is LayerKind.CONV2D:
            return ops.conv2d(x, w, b, layer.stride, layer.padding)
        return ops.linear(x, w, b)
    if k is LayerKind.RELU:
        return ops.relu(xs[0])
    if k is LayerKind.MAX_POOL:
        return ops.maxpool2d(xs[0], layer.kernel_size, layer.stride)
    if k is LayerKind.ADAPTIVE_AVG_POOL:
        return ops.adaptive_avgpool2d(xs[0], layer.output_size)
    if k is LayerKind.FLATTEN:
        return xs[0].reshape(xs[0].shape[0], -1)
    if k is LayerKind.RESIDUAL_ADD:
        out = xs[0]
        for t in xs[1:]:
            out = out + t
        return out
    if k is LayerKind.DENSE_CONCAT:
        return np.concatenate(xs, axis=1)
    if k is LayerKind.SOFTMAX:
        return ops.softmax(xs[0], axis=1)
    raise ValidationError(f"unsupported layer kind {k}")  # pragma: no cover


class SegmentRunner:
    """Runs one input through the network a segment at a time.

    ``advance()`` computes the next backbone segment and its exit head and
    returns that exit's logits, so adaptive inference only pays for the
    segments it actually reaches.
    """

    def __init__(self, net: MultiExitNetwork, weights: WeightSet, x, precision, record=None):
        precision = BitWidth.parse(precision)
        x = np.asarray(x, dtype=np.float64)
        if x.shape == net.input_shape:
            x = x[None]
            self.batched = False
        elif x.ndim == 4 and x.shape[1:] == net.input_shape:
            self.batched = True
        else:
            raise ValidationError(f"input shape {x.shape} does not match network input {net.input_shape}")
        if precision is not BitWidth.FP32 and weights.precision is not precision:
            raise ValidationError(
                f"running at {precision.name} needs {precision.name} weights, got {weights.precision.name}"
            )
        self.net = net
        self.weights = weights
        self.precision = precision
        self.quantized = precision is not BitWidth.FP32
        self.acts = {INPUT: x}
        self.done = 0
        self.record = record

    def _run(self, layers):
        for layer in layers:
            self.acts[layer.name] = apply_layer(
                layer, _inputs_of(layer, self.acts), self.weights, self.quantized, self.record
            )

    def advance(self) -> np.ndarray:
        if self.done >= 3:
            raise ValidationError("all three exits already evaluated")
        i = self.done
        self._run(self.net.segments[i])
        head = self.net.heads[i]
        self._run(head)
        logits = self.acts[head[-1].name]
        self.done += 1
        return logits if self.batched else logits[0]


def forward_to_exit(net: MultiExitNetwork, weights: WeightSet, x, exit_index: int, precision, record=None):
    """Raw logits at ``exit_index`` (1, 2 or 3); no softmax."""
    if exit_index not in (1, 2, 3):
        raise ValidationError(f"exit index must be 1, 2 or 3, got {exit_index!r}")
    weights.validate(net)
    runner = SegmentRunner(net, weights, x, precision, record)
    out = None
    for _ in range(exit_index):
        out = runner.advance()
    return out


def forward_all_exits(net, weights, x, precision):
    runner = SegmentRunner(net, weights, x, precision)
    return [runner.advance() for _ in range(3)]


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    bad = ~np.isfinite(z)
    if bad.any():
        raise ValidationError(f"non-finite logit at index {int(np.argwhere(bad)[0][0])}")
    return ops.softmax(z, axis=-1)


def collect_layer_inputs(net: MultiExitNetwork, weights: WeightSet, inputs) -> dict:
    """FP32 forward over ``inputs`` returning every parametric layer's input."""
    runner = SegmentRunner(net, weights, inputs, BitWidth.FP32)
    for _ in range(3):
        runner.advance()
    return {l.name: runner.acts[l.inputs[0]] for l in net.parametric_layers()}


def activation_params(samples: np.ndarray, bw: BitWidth, observer: RangeObserver | None = None) -> QuantParams:
    obs = observer or RangeObserver.for_bit_width(bw)
    obs = observe(obs, samples)
    flat = samples.ravel()
    if flat.size > ACT_SAMPLE_LIMIT:
        flat = flat[:: int(np.ceil(flat.size / ACT_SAMPLE_LIMIT))]
    return compute_qparams(obs, bw, flat)


def quantize_weights(net: MultiExitNetwork, fp32: WeightSet, bw, calib_inputs=None, act_params=None) -> WeightSet:
    """Post-training quantization of an FP32 weight set.

    Weight ranges come from each tensor itself (min/max at Q8, MSE search at
    Q4). Activation parameters are either passed in (e.g. frozen QAT
    observers) or measured on ``calib_inputs`` with an FP32 pass.
    """
    bw = BitWidth.parse(bw)
    if bw is BitWidth.FP32:
        return fp32
    if fp32.precision is not BitWidth.FP32:
        raise ValidationError("quantize_weights expects an FP32 weight set")
    tensors = {}
    for key, t in fp32.tensors.items():
        if key.endswith(".weight"):
            tensors[key] = affine_quantize(t, calibrate_tensor(t, bw))
        else:
            tensors[key] = np.array(t, dtype=np.float64)
    if act_params is None:
        if calib_inputs is None:
            raise ValidationError("need calibration inputs or explicit activation parameters")
        layer_inputs = collect_layer_inputs(net, fp32, calib_inputs)
        act_params = {name: activation_params(a, bw) for name, a in layer_inputs.items()}
    ws = WeightSet(bw, tensors, dict(act_params))
    ws.validate(net)
    return ws
