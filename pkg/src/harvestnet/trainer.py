"""Quantization-aware training of multi-exit networks at toy scale.

The loss is a weighted sum of per-exit cross-entropies. In QAT mode every
parametric layer sees fake-quantized weights (parameters recomputed from the
current weights each step) and a fake-quantized input activation whose
range observer runs during the first epoch and is then frozen. Gradients
pass through the fake-quant nodes with the clipped straight-through
estimator. Backprop is written out per layer kind; optimisation is plain SGD.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .container import read_container, write_container
from .errors import DivergenceError, ValidationError
from .netgraph import ops
from .netgraph.engine import WeightSet, apply_layer, forward_all_exits, init_weights, quantize_weights
from .netgraph.graph import INPUT, MultiExitNetwork
from .netgraph.layers import LayerKind
from .quantizer import (
    BitWidth,
    QuantParams,
    QuantTensor,
    RangeObserver,
    calibrate_tensor,
    compute_qparams,
    fake_quantize,
    observe,
    ste_gradient,
)

SPLITS = ("train", "val", "test")
DATASET_SCHEMA = "harvestnet.dataset/1"
OBSERVER_SAMPLE_LIMIT = 20_000


# ---------------------------------------------------------------- datasets

@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    splits: np.ndarray | None = None  # index into SPLITS per sample; None means all train

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValidationError("inputs and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            bad = int(np.argmax((self.labels < 0) | (self.labels >= self.num_classes)))
            raise ValidationError(f"label {self.labels[bad]} at sample {bad} outside [0, {self.num_classes})")
        if self.splits is None:
            self.splits = np.zeros(len(self.labels), dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=np.int64)
        if self.splits.shape != self.labels.shape or np.any((self.splits < 0) | (self.splits >= len(SPLITS))):
            raise ValidationError("split tags must be one of train/val/test per sample")

    def __len__(self):
        return len(self.labels)

    def split(self, name: str) -> "LabeledDataset":
        if name not in SPLITS:
            raise ValidationError(f"unknown split {name!r}")
        m = self.splits == SPLITS.index(name)
        return LabeledDataset(self.inputs[m], self.labels[m], self.num_classes, self.splits[m])


def _assign_splits(n, fractions, rng):
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or fr.sum() <= 0:
        raise ValidationError("split fractions need three non-negative values")
    counts = np.floor(fr / fr.sum() * n).astype(int)
    counts[0] += n - counts.sum()
    tags = np.repeat(np.arange(3), counts)
    return tags[rng.permutation(n)]


def synth_separable(n: int, input_shape, seed: int = 0, margin: float = 0.25, splits=(1.0, 0.0, 0.0)) -> LabeledDataset:
    """Two classes decided by the sign of the mean input intensity.

    Noise is centred per sample and then shifted by ``±(margin + u)``, so the
    rule ``mean(x) > 0`` classifies every sample correctly.
    """
    if n <= 0:
        raise ValidationError("n must be positive")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, *input_shape))
    x -= x.mean(axis=tuple(range(1, x.ndim)), keepdims=True)
    y = rng.integers(0, 2, n)
    shift = (2 * y - 1) * (margin + rng.random(n))
    x += shift.reshape(-1, *([1] * len(input_shape)))
    return LabeledDataset(x, y, 2, _assign_splits(n, splits, rng))


def synth_blobs(n: int, input_shape, num_classes: int, seed: int = 0, noise: float = 1.0,
                splits=(0.6, 0.2, 0.2)) -> LabeledDataset:
    """Gaussian clusters around random class prototypes; ``noise`` sets overlap."""
    if n <= 0 or num_classes < 2:
        raise ValidationError("need n > 0 and at least two classes")
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((num_classes, *input_shape))
    y = rng.integers(0, num_classes, n)
    x = protos[y] + noise * rng.standard_normal((n, *input_shape))
    return LabeledDataset(x, y, num_classes, _assign_splits(n, splits, rng))


def save_dataset(ds: LabeledDataset, path) -> None:
    write_container(path, {"inputs": ds.inputs, "labels": ds.labels, "splits": ds.splits},
                    {"schema": DATASET_SCHEMA, "num_classes": ds.num_classes, "split_names": list(SPLITS)})


def load_dataset(path) -> LabeledDataset:
    tensors, meta = read_container(path)
    if meta.get("schema") != DATASET_SCHEMA:
        raise ValidationError(f"{path}: not a dataset container")
    try:
        return LabeledDataset(tensors["inputs"], tensors["labels"], int(meta["num_classes"]), tensors.get("splits"))
    except KeyError as e:
        raise ValidationError(f"{path}: dataset missing {e.args[0]!r}") from None


# ---------------------------------------------------------------- config

@dataclass
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 0.05
    batch_size: int = 32
    bit_width: BitWidth = BitWidth.FP32
    exit_loss_weights: tuple = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        self.bit_width = BitWidth.parse(self.bit_width)
        self.exit_loss_weights = tuple(float(v) for v in self.exit_loss_weights)
        if len(self.exit_loss_weights) != 3:
            raise ValidationError("exit_loss_weights needs three values")
        if min(self.exit_loss_weights) < 0 or sum(self.exit_loss_weights) == 0:
            raise ValidationError("exit_loss_weights must be non-negative and not all zero")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValidationError("epochs must be >= 0 and batch_size > 0")
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bit_width"] = self.bit_width.name
        d["exit_loss_weights"] = list(self.exit_loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        allowed = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - allowed - {"schema"}
        if unknown:
            raise ValidationError(f"unknown training config key(s): {', '.join(sorted(unknown))}")
        return cls(**{k: v for k, v in d.items() if k != "schema"})


# ---------------------------------------------------------------- forward / backward

class QuantContext:
    """Fake-quant state for one QAT run: per-layer activation observers."""

    def __init__(self, bw, act_params: dict | None = None, weight_params: dict | None = None):
        self.bw = BitWidth.parse(bw)
        # fixed per-layer weight params; absent entries are recomputed every step
        self.weight_params = dict(weight_params or {})
        if self.bw is BitWidth.FP32:
            raise ValidationError("QuantContext needs Q8 or Q4")
        self.observers = {}
        self.act_params = dict(act_params or {})
        self.frozen = act_params is not None

    def activation(self, name: str, x: np.ndarray) -> QuantParams:
        if self.frozen:
            return self.act_params[name]
        obs = self.observers.get(name) or RangeObserver.for_bit_width(self.bw)
        obs = observe(obs, x)
        self.observers[name] = obs
        flat = x.ravel()
        if flat.size > OBSERVER_SAMPLE_LIMIT:
            flat = flat[:: int(np.ceil(flat.size / OBSERVER_SAMPLE_LIMIT))]
        self.act_params[name] = compute_qparams(obs, self.bw, flat)
        return self.act_params[name]

    def weight(self, name: str, w: np.ndarray) -> QuantParams:
        if name in self.weight_params:
            return self.weight_params[name]
        return calibrate_tensor(w, self.bw)

    def freeze(self):
        self.frozen = True


def _order(net: MultiExitNetwork):
    out = []
    for seg, head in zip(net.segments, net.heads):
        out += list(seg) + list(head)
    return out


def forward_train(net: MultiExitNetwork, tensors: dict, x: np.ndarray, qctx: QuantContext | None = None):
    """Batched forward returning the three exits' logits and a backprop cache."""
    acts = {INPUT: x}
    cache = {}
    for layer in _order(net):
        xs = [acts[s] for s in layer.inputs]
        k = layer.kind
        if k in (LayerKind.CONV2D, LayerKind.FULLY_CONNECTED):
            w = tensors[f"{layer.name}.weight"]
            b = tensors.get(f"{layer.name}.bias")
            x_in = xs[0]
            if qctx is not None:
                wp = qctx.weight(layer.name, w)
                ap = qctx.activation(layer.name, x_in)
                w_used, x_used = fake_quantize(w, wp), fake_quantize(x_in, ap)
            else:
                wp = ap = None
                w_used, x_used = w, x_in
            if k is LayerKind.CONV2D:
                y = ops.conv2d(x_used, w_used, b, layer.stride, layer.padding)
            else:
                y = ops.linear(x_used, w_used, b)
            cache[layer.name] = (x_used, w_used, wp, ap)
        else:
            y = apply_layer(layer, xs, None, False)
        acts[layer.name] = y
    logits = [acts[h[-1].name] for h in net.heads]
    return logits, (acts, cache)


def backward_train(net: MultiExitNetwork, tensors: dict, state, dlogits) -> dict:
    acts, cache = state
    grads = {key: np.zeros_like(v) for key, v in tensors.items()}
    d = {}
    for h, g in zip(net.heads, dlogits):
        d[h[-1].name] = d.get(h[-1].name, 0) + g

    def push(name, g):
        if name in d:
            d[name] = d[name] + g
        else:
            d[name] = g

    for layer in reversed(_order(net)):
        dy = d.pop(layer.name, None)
        if dy is None:
            continue
        k = layer.kind
        src = layer.inputs
        if k in (LayerKind.CONV2D, LayerKind.FULLY_CONNECTED):
            x_used, w_used, wp, ap = cache[layer.name]
            wkey, bkey = f"{layer.name}.weight", f"{layer.name}.bias"
            with_bias = bkey in tensors
            if k is LayerKind.CONV2D:
                dx, dw, db = ops.conv2d_backward(dy, x_used, w_used, layer.stride, layer.padding, with_bias)
            else:
                dx, dw, db = ops.linear_backward(dy, x_used, w_used, with_bias)
            if wp is not None:
                dw = ste_gradient(dw, tensors[wkey], wp)
                dx = ste_gradient(dx, acts[src[0]], ap)
            grads[wkey] += dw
            if with_bias:
                grads[bkey] += db
            push(src[0], dx)
        elif k is LayerKind.RELU:
            push(src[0], ops.relu_backward(dy, acts[src[0]]))
        elif k is LayerKind.MAX_POOL:
            push(src[0], ops.maxpool2d_backward(dy, acts[src[0]], layer.kernel_size, layer.stride))
        elif k is LayerKind.ADAPTIVE_AVG_POOL:
            push(src[0], ops.adaptive_avgpool2d_backward(dy, acts[src[0]].shape, layer.output_size))
        elif k is LayerKind.FLATTEN:
            push(src[0], dy.reshape(acts[src[0]].shape))
        elif k is LayerKind.RESIDUAL_ADD:
            for s in src:
                push(s, dy)
        elif k is LayerKind.DENSE_CONCAT:
            off = 0
            for s in src:
                c = acts[s].shape[1]
                push(s, dy[:, off:off + c])
                off += c
        elif k is LayerKind.SOFTMAX:
            p = acts[layer.name]
            push(src[0], p * (dy - (dy * p).sum(axis=1, keepdims=True)))
        else:  # pragma: no cover
            raise ValidationError(f"no gradient for layer kind {k}")
    return grads


def _check_labels(y, num_classes):
    y = np.asarray(y, dtype=np.int64)
    bad = (y < 0) | (y >= num_classes)
    if bad.any():
        i = int(np.argmax(bad))
        raise ValidationError(f"label {y[i]} at position {i} outside [0, {num_classes})")
    return y


def loss_from_logits(logits, y, exit_weights):
    """Weighted per-exit mean cross-entropy and its gradient w.r.t. each logit tensor."""
    n = len(y)
    total = 0.0
    dl = []
    for z, w in zip(logits, exit_weights):
        ls = ops.log_softmax(z, axis=1)
        total += w * float(-ls[np.arange(n), y].mean())
        g = np.exp(ls)
        g[np.arange(n), y] -= 1.0
        dl.append(g * (w / n))
    return total, dl


def loss_and_grads(net, tensors, x, y, exit_weights=(1.0, 1.0, 1.0), qctx=None):
    y = _check_labels(y, net.num_classes)
    logits, state = forward_train(net, tensors, np.asarray(x, dtype=np.float64), qctx)
    loss, dl = loss_from_logits(logits, y, exit_weights)
    return loss, backward_train(net, tensors, state, dl), logits


def _batch_context(net, weights: WeightSet, bit_width):
    """Real tensors and a quantization context for evaluating ``weights``."""
    bw = BitWidth.parse(bit_width)
    tensors = {k: weights.real_weight(k[:-len(".weight")]) if k.endswith(".weight") else v
               for k, v in weights.tensors.items()}
    if bw is BitWidth.FP32:
        return tensors, None
    fixed = {k[:-len(".weight")]: v.params for k, v in weights.tensors.items()
             if isinstance(v, QuantTensor) and v.params.bit_width is bw}
    return tensors, QuantContext(bw, weights.act_params or None, fixed)


def qat_loss(net, weights: WeightSet, batch, bit_width=None, exit_weights=(1.0, 1.0, 1.0)) -> float:
    """Weighted cross-entropy over all exits with fake-quantized weights.

    ``batch`` is ``(inputs, labels)``. Activation ranges come from the
    weight set if it carries them, otherwise from the batch itself.
    """
    x, y = batch
    if len(y) == 0:
        raise ValidationError("batch is empty")
    bw = weights.precision if bit_width is None else BitWidth.parse(bit_width)
    tensors, qctx = _batch_context(net, weights, bw)
    y = _check_labels(y, net.num_classes)
    logits, _ = forward_train(net, tensors, np.asarray(x, dtype=np.float64), qctx)
    return loss_from_logits(logits, y, exit_weights)[0]


def grad_check(net, weights: WeightSet, batch, epsilon: float = 1e-5, samples_per_tensor: int = 6,
               seed: int = 0, exit_weights=(1.0, 1.0, 1.0)) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs the FP32 path. A random subset of entries of every tensor is checked.
    """
    if weights.precision is not BitWidth.FP32:
        raise ValidationError("grad_check runs on FP32 weights")
    x, y = batch
    tensors = {k: np.array(v, dtype=np.float64) for k, v in weights.tensors.items()}
    _, grads, _ = loss_and_grads(net, tensors, x, y, exit_weights)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for key in sorted(tensors):
        t = tensors[key]
        flat = t.reshape(-1)
        idx = rng.choice(flat.size, size=min(samples_per_tensor, flat.size), replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + epsilon
            lp, _ = loss_from_logits(forward_train(net, tensors, x)[0], y, exit_weights)
            flat[i] = old - epsilon
            lm, _ = loss_from_logits(forward_train(net, tensors, x)[0], y, exit_weights)
            flat[i] = old
            num = (lp - lm) / (2 * epsilon)
            ana = grads[key].reshape(-1)[i]
            denom = max(abs(num), abs(ana), 1e-6)
            worst = max(worst, abs(num - ana) / denom)
    return worst


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    weights: WeightSet  # FP32 master weights
    quantized: WeightSet | None  # integer weight set at the training bit width
    log: list = field(default_factory=list)
    config: TrainConfig | None = None

    def deployable(self) -> WeightSet:
        return self.quantized if self.quantized is not None else self.weights


def accuracy(net, weights: WeightSet, inputs, labels, precision=None) -> tuple:
    """Per-exit accuracy through the inference engine."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        return (float("nan"),) * 3
    precision = weights.precision if precision is None else BitWidth.parse(precision)
    outs = forward_all_exits(net, weights, np.asarray(inputs, dtype=np.float64), precision)
    return tuple(float(np.mean(o.argmax(axis=1) == labels)) for o in outs)


def train(net: MultiExitNetwork, dataset: LabeledDataset, config: TrainConfig, initial: WeightSet | None = None) -> TrainResult:
    ds = dataset.split("train")
    if len(ds) == 0:
        raise ValidationError("dataset has no train split")
    if tuple(ds.inputs.shape[1:]) != net.input_shape:
        raise ValidationError(f"dataset inputs {ds.inputs.shape[1:]} do not match network {net.input_shape}")
    if ds.num_classes != net.num_classes:
        raise ValidationError(f"dataset has {ds.num_classes} classes, network {net.num_classes}")
    rng = np.random.default_rng(config.seed)
    start = initial if initial is not None else init_weights(net, config.seed)
    tensors = {k: np.array(v, dtype=np.float64) for k, v in start.tensors.items()}
    qctx = None if config.bit_width is BitWidth.FP32 else QuantContext(config.bit_width)
    log = []
    history = []
    n = len(ds)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for step, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            # overflow is caught below as divergence, not warned about
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads, logits = loss_and_grads(net, tensors, ds.inputs[idx], ds.labels[idx],
                                                     config.exit_loss_weights, qctx)
            history.append(loss)
            if not np.isfinite(loss) or any(not np.all(np.isfinite(g)) for g in grads.values()):
                raise DivergenceError(epoch, step, history[-20:])
            for k in tensors:
                tensors[k] -= config.learning_rate * grads[k]
            total += loss * len(idx)
            correct += int(np.sum(logits[-1].argmax(axis=1) == ds.labels[idx]))
        if qctx is not None and epoch == 1:
            qctx.freeze()
        log.append({"epoch": epoch, "loss": total / n, "accuracy": correct / n})

    fp32 = WeightSet(BitWidth.FP32, tensors)
    quantized = None
    if qctx is not None:
        if not qctx.act_params:
            # no epochs ran; measure activations on the training inputs instead
            quantized = quantize_weights(net, fp32, config.bit_width, calib_inputs=ds.inputs)
        else:
            quantized = quantize_weights(net, fp32, config.bit_width, act_params=qctx.act_params)
    return TrainResult(fp32, quantized, log, config)


def write_log(result: TrainResult, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"config": result.config.to_dict() if result.config else None, "epochs": result.log}, f, indent=1)
        f.write("\n")
