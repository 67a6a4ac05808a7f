"""Static MAC and parameter accounting per exit."""
from __future__ import annotations

import math

from ..errors import ValidationError
from ..quantizer import BitWidth
from .graph import MultiExitNetwork


def _check_exit(e: int) -> int:
    if e not in (1, 2, 3):
        raise ValidationError(f"exit index must be 1, 2 or 3, got {e!r}")
    return e


def segment_macs(net: MultiExitNetwork, i: int) -> int:
    return sum(net.layer_macs(l) for l in net.segments[_check_exit(i) - 1])


def head_macs(net: MultiExitNetwork, i: int) -> int:
    return sum(net.layer_macs(l) for l in net.heads[_check_exit(i) - 1])


def count_macs(net: MultiExitNetwork, up_to_exit: int) -> int:
    """Cumulative MACs of a forward pass that returns at ``up_to_exit``.

    Counts backbone segments ``1..up_to_exit`` plus that exit's head only.
    """
    e = _check_exit(up_to_exit)
    return sum(segment_macs(net, i) for i in range(1, e + 1)) + head_macs(net, e)


def stage_macs(net: MultiExitNetwork) -> tuple[int, int, int]:
    """MACs spent between consecutive exit checks during adaptive inference.

    Stage ``i`` is backbone segment ``i`` plus head ``i``: the work needed to
    move from one confidence check to the next.
    """
    return tuple(segment_macs(net, i) + head_macs(net, i) for i in (1, 2, 3))


def count_params(net: MultiExitNetwork, up_to_exit: int | None = None) -> int:
    """Weight plus bias elements; the whole graph when ``up_to_exit`` is None."""
    if up_to_exit is None:
        return sum(l.param_count() for l in net.layers())
    e = _check_exit(up_to_exit)
    n = sum(l.param_count() for seg in net.segments[:e] for l in seg)
    return n + sum(l.param_count() for l in net.heads[e - 1])


def bytes_for_params(params: int, bw) -> int:
    bw = BitWidth.parse(bw)
    if bw is BitWidth.FP32:
        return params * 4
    if bw is BitWidth.Q8:
        return params
    return math.ceil(params / 2)


def param_bytes(net: MultiExitNetwork, bw, up_to_exit: int | None = None) -> int:
    return bytes_for_params(count_params(net, up_to_exit), bw)


def count_table(net: MultiExitNetwork) -> list[dict]:
    """Per-exit summary rows: cumulative and stage MACs, params, byte sizes."""
    rows = []
    stages = stage_macs(net)
    for e, label in zip((1, 2, 3), ("EE1", "EE2", "ME")):
        p = count_params(net, e)
        rows.append({
            "stage": label,
            "cumulative_macs": count_macs(net, e),
            "segment_macs": segment_macs(net, e),
            "head_macs": head_macs(net, e),
            "stage_macs": stages[e - 1],
            "params": p,
            "bytes_fp32": bytes_for_params(p, BitWidth.FP32),
            "bytes_q8": bytes_for_params(p, BitWidth.Q8),
            "bytes_q4": bytes_for_params(p, BitWidth.Q4),
        })
    p = count_params(net)
    rows.append({
        "stage": "Full",
        "cumulative_macs": sum(segment_macs(net, i) + head_macs(net, i) for i in (1, 2, 3)),
        "segment_macs": sum(segment_macs(net, i) for i in (1, 2, 3)),
        "head_macs": sum(head_macs(net, i) for i in (1, 2, 3)),
        "stage_macs": sum(stages),
        "params": p,
        "bytes_fp32": bytes_for_params(p, BitWidth.FP32),
        "bytes_q8": bytes_for_params(p, BitWidth.Q8),
        "bytes_q4": bytes_for_params(p, BitWidth.Q4),
    })
    return rows
