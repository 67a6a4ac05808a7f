import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from harvestnet.errors import DivergenceError, ValidationError
from harvestnet.netgraph import MultiExitNetwork, WeightSet, build_preset, init_weights, quantize_weights
from harvestnet.netgraph.layers import fc, flatten, relu
from harvestnet.quantizer import BitWidth, QuantParams, ste_gradient
from harvestnet.trainer import (
    TrainConfig,
    accuracy,
    grad_check,
    load_dataset,
    loss_from_logits,
    qat_loss,
    save_dataset,
    synth_blobs,
    synth_separable,
    train,
    write_log,
)
from conftest import random_network, random_weights
from oracles import ScalarForward, ce_loop


def fc_net(d=6, k=3):
    # relu trunk on a (d, 1, 1) input, one linear classifier per exit
    segs = tuple((relu(f"r{i}"),) for i in range(3))
    heads = tuple((flatten(f"{p}.flat"), fc(f"{p}.fc", d, k)) for p in "abc")
    return MultiExitNetwork(segs, heads, k, (d, 1, 1), name="fc")


def test_uniform_logits_give_log_k():
    for k in (2, 3, 10):
        z = [np.zeros((5, k))] * 3
        loss, _ = loss_from_logits(z, np.arange(5) % k, (1.0, 0.0, 0.0))
        assert abs(loss - math.log(k)) < 1e-9


def test_confident_correct_logits_give_zero_loss():
    z = np.full((4, 3), -1e3)
    y = np.array([0, 1, 2, 1])
    z[np.arange(4), y] = 1e3
    loss, grads = loss_from_logits([z, z, z], y, (1.0, 1.0, 1.0))
    assert loss == 0.0 and all(np.all(g == 0) for g in grads)


@pytest.mark.parametrize("bw", list(BitWidth))
def test_qat_loss_matches_scalar_oracle(tiny_net, tiny_weights, bw):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, *tiny_net.input_shape))
    y = rng.integers(0, 3, 4)
    got = qat_loss(tiny_net, tiny_weights[bw], (x, y), exit_weights=(0.3, 0.5, 1.0))
    oracle = ScalarForward(tiny_net, tiny_weights[bw], bw is not BitWidth.FP32)
    logits = [[], [], []]
    for xi in x:
        for j, z in enumerate(oracle.run(xi)):
            logits[j].append(list(z))
    assert abs(got - ce_loop(logits, list(y), (0.3, 0.5, 1.0))) < 1e-6


def test_grad_check_fc():
    net = fc_net()
    rng = np.random.default_rng(0)
    ws = random_weights(net, rng, 0.5)
    batch = (rng.standard_normal((5, 6, 1, 1)), rng.integers(0, 3, 5))
    assert grad_check(net, ws, batch, samples_per_tensor=50) < 1e-4


@pytest.mark.parametrize("preset,kw", [("resnet_mini", {"width": 2}), ("densenet_mini", {"growth": 2, "n_layers": 2})])
def test_grad_check_presets(preset, kw):
    shape = (2, 8, 8)
    net = build_preset(preset, 4, shape, **kw)
    rng = np.random.default_rng(1)
    ws = random_weights(net, rng, 0.3)
    batch = (rng.standard_normal((3, *shape)), rng.integers(0, 4, 3))
    assert grad_check(net, ws, batch, samples_per_tensor=8) < 1e-4


@settings(max_examples=8)
@given(st.integers(0, 2**31 - 1))
def test_grad_check_random_graphs(seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng)
    ws = random_weights(net, rng, 0.3)
    batch = (rng.standard_normal((2, *net.input_shape)), rng.integers(0, net.num_classes, 2))
    assert grad_check(net, ws, batch, samples_per_tensor=4, seed=seed) < 1e-4


def test_symmetric_zero_weights_give_zero_feature_grads():
    # all-zero weights: every hidden unit sees zero gradient, only final biases move
    net = fc_net()
    ws = WeightSet(BitWidth.FP32, {k: np.zeros_like(v) for k, v in init_weights(net, 0).tensors.items()})
    batch = (np.random.default_rng(0).standard_normal((4, 6, 1, 1)), np.array([0, 1, 2, 0]))
    assert grad_check(net, ws, batch, samples_per_tensor=50) < 1e-4


def test_separable_trains_at_fp32_and_q8():
    net = build_preset("resnet_mini", 2, (1, 8, 8), width=4)
    ds = synth_separable(200, (1, 8, 8), seed=0)
    cfg = dict(epochs=8, learning_rate=0.1, batch_size=16, seed=0)
    fp = train(net, ds, TrainConfig(**cfg))
    acc_fp = accuracy(net, fp.weights, ds.inputs, ds.labels)[2]
    q8 = train(net, ds, TrainConfig(bit_width="Q8", **cfg))
    acc_q8 = accuracy(net, q8.deployable(), ds.inputs, ds.labels)[2]
    assert acc_fp >= 0.95
    assert acc_q8 >= acc_fp - 0.05
    assert q8.deployable().precision is BitWidth.Q8
    assert fp.log[-1]["loss"] < fp.log[0]["loss"]


def test_zero_learning_rate_keeps_weights():
    net = build_preset("resnet_mini", 2, (1, 8, 8), width=2)
    ds = synth_separable(20, (1, 8, 8), seed=1)
    init = init_weights(net, 3)
    res = train(net, ds, TrainConfig(epochs=2, learning_rate=0.0, batch_size=8), initial=init)
    for k, v in init.tensors.items():
        assert np.array_equal(res.weights.tensors[k], v)


def test_training_is_seed_deterministic(tmp_path):
    net = build_preset("resnet_mini", 3, (1, 6, 6), width=2)
    ds = synth_blobs(30, (1, 6, 6), 3, seed=4)
    cfg = TrainConfig(epochs=2, learning_rate=0.05, batch_size=8, bit_width="Q4", seed=9)
    a, b = train(net, ds, cfg), train(net, ds, cfg)
    for k in a.weights.tensors:
        assert np.array_equal(a.weights.tensors[k], b.weights.tensors[k])
    assert a.quantized.act_params == b.quantized.act_params
    write_log(a, tmp_path / "a.json")
    write_log(b, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    c = train(net, ds, TrainConfig(epochs=2, learning_rate=0.05, batch_size=8, bit_width="Q4", seed=10))
    assert any(not np.array_equal(a.weights.tensors[k], c.weights.tensors[k]) for k in a.weights.tensors)


def test_ste_blocks_gradient_outside_range():
    # a weight far outside the others gets clipped by a fixed range; its STE grad is zero
    p = QuantParams(0.1, 0.0, BitWidth.Q4)  # representable range [-0.8, 0.7]
    w = np.array([-0.8, 0.0, 0.7, 0.75, 5.0, -3.0])
    g = ste_gradient(np.ones_like(w), w, p)
    assert list(g) == [1, 1, 1, 0, 0, 0]


def test_divergence_is_reported():
    net = build_preset("resnet_mini", 2, (1, 8, 8), width=2)
    ds = synth_separable(32, (1, 8, 8), seed=0)
    with pytest.raises(DivergenceError) as e:
        train(net, ds, TrainConfig(epochs=5, learning_rate=1e12, batch_size=8))
    assert e.value.epoch >= 1 and len(e.value.history) > 0


def test_label_out_of_range():
    net = fc_net()
    ws = init_weights(net, 0)
    with pytest.raises(ValidationError, match="label 5"):
        qat_loss(net, ws, (np.zeros((2, 6, 1, 1)), np.array([0, 5])))


def test_dataset_io_and_splits(tmp_path):
    ds = synth_blobs(50, (2, 4, 4), 4, seed=3)
    assert sum(len(ds.split(s)) for s in ("train", "val", "test")) == 50
    save_dataset(ds, tmp_path / "d.json")
    back = load_dataset(tmp_path / "d.json")
    assert np.array_equal(back.labels, ds.labels) and back.num_classes == 4
    assert np.allclose(back.inputs, ds.inputs, atol=1e-6)
    with pytest.raises(ValidationError):
        ds.split("holdout")


def test_train_config_keys():
    with pytest.raises(ValidationError, match="momentum"):
        TrainConfig.from_dict({"epochs": 1, "momentum": 0.9})
    cfg = TrainConfig.from_dict({"epochs": 3, "bit_width": "Q8"})
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValidationError):
        TrainConfig(exit_loss_weights=(0, 0, 0))


def test_train_rejects_mismatched_dataset():
    net = build_preset("resnet_mini", 3, (1, 8, 8), width=2)
    with pytest.raises(ValidationError, match="classes"):
        train(net, synth_separable(10, (1, 8, 8)), TrainConfig(epochs=1))
    with pytest.raises(ValidationError, match="match"):
        train(net, synth_blobs(10, (1, 6, 6), 3, splits=(1, 0, 0)), TrainConfig(epochs=1))


def test_quantized_training_result_runs_through_engine():
    net = build_preset("resnet_mini", 2, (1, 8, 8), width=2)
    ds = synth_separable(24, (1, 8, 8), seed=2)
    res = train(net, ds, TrainConfig(epochs=1, batch_size=8, bit_width="Q4"))
    ptq = quantize_weights(net, res.weights, BitWidth.Q4, act_params=res.quantized.act_params)
    a = accuracy(net, res.quantized, ds.inputs, ds.labels)
    b = accuracy(net, ptq, ds.inputs, ds.labels)
    assert a == b
