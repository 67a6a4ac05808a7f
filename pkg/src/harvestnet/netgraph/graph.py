"""Multi-exit network container and its JSON description format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..errors import ParseError, ValidationError
from .layers import LayerKind, LayerSpec, infer_shape, macs_for

GRAPH_SCHEMA = "harvestnet.graph/1"
INPUT = "input"
EXIT_NAMES = ("EE1", "EE2", "ME")


@dataclass(frozen=True)
class MultiExitNetwork:
    """Backbone split into three segments, with one exit head after each.

    Exit ``i`` (1-based) consumes the output of segment ``i``. Layer names are
    unique across the whole network; ``"input"`` names the network input.
    """

    segments: tuple[tuple[LayerSpec, ...], ...]
    heads: tuple[tuple[LayerSpec, ...], ...]
    num_classes: int
    input_shape: tuple[int, int, int]
    name: str = "custom"
    shapes: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if len(self.segments) != 3 or len(self.heads) != 3:
            raise ValidationError("a multi-exit network needs exactly three segments and three exit heads")
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        shape = tuple(int(d) for d in self.input_shape)
        if len(shape) != 3 or min(shape) < 1:
            raise ValidationError(f"input_shape must be three positive ints, got {self.input_shape}")
        object.__setattr__(self, "input_shape", shape)
        segs, heads, shapes = _resolve(self.segments, self.heads, shape)
        object.__setattr__(self, "segments", segs)
        object.__setattr__(self, "heads", heads)
        object.__setattr__(self, "shapes", shapes)
        for i, head in enumerate(heads):
            out = shapes[head[-1].name]
            if out != (self.num_classes,):
                raise ValidationError(
                    f"exit {EXIT_NAMES[i]} produces shape {out}, expected ({self.num_classes},)"
                )

    def segment_output(self, i: int) -> str:
        """Name of the last layer of segment ``i`` (1-based)."""
        return self.segments[i - 1][-1].name

    def layers(self):
        for seg in self.segments:
            yield from seg
        for head in self.heads:
            yield from head

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers():
            if layer.name == name:
                return layer
        raise KeyError(name)

    def parametric_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers() if l.is_parametric]

    def layer_macs(self, layer: LayerSpec) -> int:
        return macs_for(layer, self.shapes[layer.name])

    def to_dict(self) -> dict:
        return {
            "schema": GRAPH_SCHEMA,
            "name": self.name,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "segments": [[l.to_dict() for l in seg] for seg in self.segments],
            "exits": [
                {"exit": EXIT_NAMES[i], "after_segment": i + 1, "layers": [l.to_dict() for l in head]}
                for i, head in enumerate(self.heads)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MultiExitNetwork":
        if d.get("schema") != GRAPH_SCHEMA:
            raise ValidationError(f"graph schema must be {GRAPH_SCHEMA!r}, got {d.get('schema')!r}")
        try:
            exits = sorted(d["exits"], key=lambda e: e["after_segment"])
            if [e["after_segment"] for e in exits] != [1, 2, 3]:
                raise ValidationError("exits must attach after segments 1, 2 and 3")
            return cls(
                segments=tuple(tuple(LayerSpec.from_dict(l) for l in seg) for seg in d["segments"]),
                heads=tuple(tuple(LayerSpec.from_dict(l) for l in e["layers"]) for e in exits),
                num_classes=int(d["num_classes"]),
                input_shape=tuple(d["input_shape"]),
                name=d.get("name", "custom"),
            )
        except KeyError as e:
            raise ValidationError(f"graph description missing key {e.args[0]!r}") from None
        except TypeError as e:
            raise ValidationError(f"malformed graph description: {e}") from None


def _resolve(segments, heads, input_shape):
    shapes = {INPUT: input_shape}
    backbone_scope = [INPUT]
    out_segs = []
    prev = INPUT
    seg_outputs = []
    for si, seg in enumerate(segments):
        seg = tuple(seg)
        if not seg:
            raise ValidationError(f"segment {si + 1} is empty")
        resolved = []
        for layer in seg:
            layer, prev = _resolve_layer(layer, prev, backbone_scope, shapes)
            backbone_scope.append(layer.name)
            resolved.append(layer)
        seg_outputs.append(prev)
        out_segs.append(tuple(resolved))

    out_heads = []
    for hi, head in enumerate(heads):
        head = tuple(head)
        if not head:
            raise ValidationError(f"exit head {EXIT_NAMES[hi]} is empty")
        # a head may read anything computed up to its own segment
        cut = backbone_scope.index(seg_outputs[hi]) + 1
        scope = list(backbone_scope[:cut])
        prev = seg_outputs[hi]
        resolved = []
        for layer in head:
            layer, prev = _resolve_layer(layer, prev, scope, shapes)
            scope.append(layer.name)
            resolved.append(layer)
        out_heads.append(tuple(resolved))
    return tuple(out_segs), tuple(out_heads), shapes


def _resolve_layer(layer, prev, scope, shapes):
    if layer.name in shapes or layer.name == INPUT:
        raise ValidationError(f"duplicate layer name {layer.name!r}")
    inputs = layer.inputs or (prev,)
    for src in inputs:
        if src not in scope:
            raise ValidationError(f"layer {layer.name!r} reads {src!r}, which is not available at that point")
    layer = replace(layer, inputs=tuple(inputs))
    shapes[layer.name] = infer_shape(layer, [shapes[s] for s in inputs])
    return layer, layer.name


def save_graph(net: MultiExitNetwork, path) -> None:
    Path(path).write_text(json.dumps(net.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_graph(path) -> MultiExitNetwork:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot read graph: {e.strerror}", path) from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, path, e.lineno) from None
    return MultiExitNetwork.from_dict(d)


__all__ = ["MultiExitNetwork", "EXIT_NAMES", "INPUT", "save_graph", "load_graph", "LayerKind"]
