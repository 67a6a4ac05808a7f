"""Scaled-down residual and dense backbones with three exits.

Both follow the usual placement: early exits after the first and second
feature groups, the main exit after the third. Batch norm is assumed folded
into the convolutions, so the graphs carry biases instead.
"""
from __future__ import annotations

from ..errors import ValidationError
from .graph import MultiExitNetwork
from .layers import add, avgpool, concat, conv, fc, flatten, maxpool, relu


def _head(prefix, channels, num_classes):
    return (
        avgpool(f"{prefix}.pool", 1),
        flatten(f"{prefix}.flatten"),
        fc(f"{prefix}.fc", channels, num_classes),
    )


def _basic_block(prefix, cin, cout, stride, src):
    layers = [
        conv(f"{prefix}.conv1", cin, cout, 3, stride, inputs=(src,)),
        relu(f"{prefix}.relu1"),
        conv(f"{prefix}.conv2", cout, cout, 3, 1),
    ]
    skip = src
    if stride != 1 or cin != cout:
        layers.append(conv(f"{prefix}.down", cin, cout, 1, stride, padding=0, inputs=(src,)))
        skip = f"{prefix}.down"
    layers.append(add(f"{prefix}.add", (f"{prefix}.conv2", skip)))
    layers.append(relu(f"{prefix}.out"))
    return layers


def resnet_mini(num_classes: int, input_shape, width: int = 16) -> MultiExitNetwork:
    c = input_shape[0]
    w1, w2, w3 = width, 2 * width, 4 * width
    s1 = [conv("stem.conv", c, w1, 3, 1), relu("stem.relu")] + _basic_block("layer1", w1, w1, 1, "stem.relu")
    s2 = _basic_block("layer2", w1, w2, 2, "layer1.out")
    s3 = _basic_block("layer3", w2, w3, 2, "layer2.out")
    return MultiExitNetwork(
        segments=(tuple(s1), tuple(s2), tuple(s3)),
        heads=(_head("ee1", w1, num_classes), _head("ee2", w2, num_classes), _head("me", w3, num_classes)),
        num_classes=num_classes,
        input_shape=tuple(input_shape),
        name="resnet_mini",
    )


def _dense_block(prefix, cin, growth, n_layers, src):
    layers = []
    channels = cin
    cur = src
    for j in range(n_layers):
        p = f"{prefix}.l{j + 1}"
        layers += [
            relu(f"{p}.relu", inputs=(cur,)),
            conv(f"{p}.conv", channels, growth, 3, 1),
            concat(f"{p}.cat", (cur, f"{p}.conv")),
        ]
        cur = f"{p}.cat"
        channels += growth
    return layers, channels, cur


def _transition(prefix, cin, src):
    cout = cin // 2
    return [
        relu(f"{prefix}.relu", inputs=(src,)),
        conv(f"{prefix}.conv", cin, cout, 1, 1, padding=0),
        maxpool(f"{prefix}.pool", 2),
    ], cout, f"{prefix}.pool"


def densenet_mini(num_classes: int, input_shape, growth: int = 12, n_layers: int = 4) -> MultiExitNetwork:
    c = input_shape[0]
    stem = [conv("stem.conv", c, 2 * growth, 3, 1)]
    b1, ch1, out = _dense_block("block1", 2 * growth, growth, n_layers, "stem.conv")
    t1, ch, tout = _transition("trans1", ch1, out)
    b2, ch2, out2 = _dense_block("block2", ch, growth, n_layers, tout)
    t2, ch, tout = _transition("trans2", ch2, out2)
    b3, ch3, out3 = _dense_block("block3", ch, growth, n_layers, tout)
    s3 = t2 + b3 + [relu("final.relu", inputs=(out3,))]
    return MultiExitNetwork(
        segments=(tuple(stem + b1), tuple(t1 + b2), tuple(s3)),
        heads=(
            (relu("ee1.relu"),) + _head("ee1", ch1, num_classes),
            (relu("ee2.relu"),) + _head("ee2", ch2, num_classes),
            _head("me", ch3, num_classes),
        ),
        num_classes=num_classes,
        input_shape=tuple(input_shape),
        name="densenet_mini",
    )


PRESETS = {"resnet_mini": resnet_mini, "densenet_mini": densenet_mini}


def build_preset(name: str, num_classes: int, input_shape, **kwargs) -> MultiExitNetwork:
    try:
        builder = PRESETS[name]
    except KeyError:
        raise ValidationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    if num_classes < 2:
        raise ValidationError(f"num_classes must be >= 2, got {num_classes}")
    input_shape = tuple(int(d) for d in input_shape)
    if len(input_shape) != 3 or min(input_shape) < 1:
        raise ValidationError(f"input_shape must be three positive ints, got {input_shape}")
    return builder(num_classes, input_shape, **kwargs)
