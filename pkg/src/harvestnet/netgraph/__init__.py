"""Layer primitives, multi-exit graphs, the inference engine and MAC counting."""
from .counting import (
    bytes_for_params,
    count_macs,
    count_params,
    count_table,
    head_macs,
    param_bytes,
    segment_macs,
    stage_macs,
)
from .engine import (
    SegmentRunner,
    WeightSet,
    forward_all_exits,
    forward_to_exit,
    init_weights,
    quantize_weights,
    softmax,
)
from .graph import EXIT_NAMES, MultiExitNetwork, load_graph, save_graph
from .layers import LayerKind, LayerSpec
from .presets import PRESETS, build_preset

__all__ = [
    "EXIT_NAMES", "LayerKind", "LayerSpec", "MultiExitNetwork", "PRESETS", "SegmentRunner", "WeightSet",
    "build_preset", "bytes_for_params", "count_macs", "count_params", "count_table", "forward_all_exits",
    "forward_to_exit", "head_macs", "init_weights", "load_graph", "param_bytes", "quantize_weights",
    "save_graph", "segment_macs", "softmax", "stage_macs",
]
