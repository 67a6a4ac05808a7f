import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from harvestnet.netgraph import build_preset, init_weights, quantize_weights
from harvestnet.netgraph.graph import INPUT, MultiExitNetwork
from harvestnet.netgraph.layers import add, avgpool, concat, conv, fc, flatten, maxpool, relu
from harvestnet.quantizer import BitWidth

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def _head(prefix, c, k):
    return (avgpool(f"{prefix}.pool", 1), flatten(f"{prefix}.flat"), fc(f"{prefix}.fc", c, k))


def random_network(rng: np.random.Generator) -> MultiExitNetwork:
    """Small random three-exit graph with three or four backbone layers.

    Single-layer slots draw from conv (k 1 or 3, stride 1 or 2, random
    padding), relu and maxpool. A two-layer slot may instead hold a residual
    add around a conv or a dense concat with a conv.
    """
    c = int(rng.integers(1, 4))
    h = int(rng.integers(4, 8))
    w = int(rng.integers(4, 8))
    classes = int(rng.integers(2, 5))
    sizes = [1, 1, 1]
    if rng.random() < 0.6:
        sizes[int(rng.integers(0, 3))] += 1
    segs, heads = [], []
    state = {"cur": INPUT, "ch": c, "h": h, "w": w, "uid": 0}

    def single(seg):
        state["uid"] += 1
        name = f"l{state['uid']}"
        ch, hh, ww = state["ch"], state["h"], state["w"]
        choice = rng.choice(["conv", "relu", "pool"])
        if choice == "pool" and min(hh, ww) < 2:
            choice = "conv"
        if choice == "conv":
            k = int(rng.choice([1, 3])) if min(hh, ww) >= 3 else 1
            st = int(rng.choice([1, 2])) if min(hh, ww) >= 3 else 1
            p = int(rng.integers(0, k // 2 + 1))
            cout = int(rng.integers(1, 4))
            seg.append(conv(name, ch, cout, k, st, padding=p, bias=bool(rng.integers(0, 2)), inputs=(state["cur"],)))
            state.update(ch=cout, h=(hh + 2 * p - k) // st + 1, w=(ww + 2 * p - k) // st + 1)
        elif choice == "relu":
            seg.append(relu(name, inputs=(state["cur"],)))
        else:
            seg.append(maxpool(name, 2, inputs=(state["cur"],)))
            state.update(h=hh // 2, w=ww // 2)
        state["cur"] = name

    def pair(seg):
        state["uid"] += 1
        name = f"l{state['uid']}"
        ch, cur = state["ch"], state["cur"]
        if rng.random() < 0.5:
            seg.append(conv(f"{name}.c", ch, ch, 3, 1, inputs=(cur,)))
            seg.append(add(name, (f"{name}.c", cur)))
        else:
            g = int(rng.integers(1, 3))
            seg.append(conv(f"{name}.c", ch, g, 3, 1, inputs=(cur,)))
            seg.append(concat(name, (cur, f"{name}.c")))
            state["ch"] = ch + g
        state["cur"] = name

    for s, n in enumerate(sizes):
        seg = []
        if n == 2 and rng.random() < 0.6:
            pair(seg)
        else:
            for _ in range(n):
                single(seg)
        segs.append(tuple(seg))
        heads.append(_head(f"h{s + 1}", state["ch"], classes))
    return MultiExitNetwork(tuple(segs), tuple(heads), classes, (c, h, w), name="random")


def random_weights(net, rng, bias_scale=0.1):
    ws = init_weights(net, int(rng.integers(0, 2**31)))
    for k, v in ws.tensors.items():
        if k.endswith(".bias"):
            ws.tensors[k] = rng.normal(0, bias_scale, v.shape)
    return ws


def weight_sets(net, fp32, calib):
    return {
        BitWidth.FP32: fp32,
        BitWidth.Q8: quantize_weights(net, fp32, BitWidth.Q8, calib),
        BitWidth.Q4: quantize_weights(net, fp32, BitWidth.Q4, calib),
    }


@pytest.fixture(scope="session")
def tiny_net():
    return build_preset("resnet_mini", 3, (1, 8, 8), width=2)


@pytest.fixture(scope="session")
def tiny_weights(tiny_net):
    rng = np.random.default_rng(7)
    fp32 = random_weights(tiny_net, rng)
    calib = rng.standard_normal((16, 1, 8, 8))
    return weight_sets(tiny_net, fp32, calib)


# acceptance criteria register one line each; printed after the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
