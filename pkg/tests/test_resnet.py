import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _gradcheck import max_relative_error, random_instance
from resnet_scaling.datasets import generate_synthetic
from resnet_scaling.resnet import (TRAINING_DEFAULTS, Architecture, CheckpointChecksumError,
                                   CheckpointTruncatedError, CheckpointVersionError, NonFiniteStateError,
                                   ResNet, TrainConfig, backward, checkpoint_bytes, forward, init_network,
                                   load_checkpoint, loss, parse_checkpoint, save_checkpoint, sgd_train)

SETUPS = [("tanh", "shared"), ("relu", "per_layer")]


def test_init_variances():
    net = init_network(Architecture(100, 10, "relu", "per_layer"), seed=0)
    assert net.A.var() == pytest.approx(1 / (100 * 100), rel=0.10)
    assert net.b.var() == pytest.approx(1 / (100 * 10), rel=0.10)
    assert net.delta.var() == pytest.approx(1 / 100, rel=0.3)
    shared = init_network(Architecture(100, 10), seed=0)
    assert float(shared.delta) == 0.1


@pytest.mark.parametrize("activation,mode", SETUPS)
def test_init_deterministic(activation, mode):
    arch = Architecture(7, 3, activation, mode)
    assert init_network(arch, 4).same_parameters(init_network(arch, 4))
    assert not init_network(arch, 4).same_parameters(init_network(arch, 5))


def test_zero_weights_identity():
    net = ResNet(Architecture(5, 3), np.zeros((5, 3, 3)), np.zeros((5, 3)), np.array(0.7))
    x = np.array([0.3, -1.0, 2.0])
    assert np.array_equal(forward(net, x)[-1], x)


def test_forward_by_hand():
    net = ResNet(Architecture(1, 1), np.ones((1, 1, 1)), np.zeros((1, 1)), np.array(0.5))
    assert forward(net, np.array([1.0]))[1, 0] == pytest.approx(1 + 0.5 * math.tanh(1), abs=1e-15)
    assert forward(net, np.array([1.0]))[1, 0] == pytest.approx(1.3807971, abs=1e-7)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_relu_homogeneity(seed):
    rng = np.random.default_rng(seed)
    net = init_network(Architecture(6, 4, "relu", "per_layer"), seed)
    net = net.replace(delta=rng.normal(0, 2, 6))
    scale = np.abs(net.delta)
    moved = net.replace(A=scale[:, None, None] * net.A, b=scale[:, None] * net.b, delta=np.sign(net.delta))
    x = rng.normal(size=(8, 4))
    assert np.max(np.abs(forward(net, x) - forward(moved, x))) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_tanh_sign_absorption(seed):
    rng = np.random.default_rng(seed)
    arch = Architecture(6, 4, "tanh", "per_layer")
    net = init_network(arch, seed).replace(delta=rng.normal(0, 1, 6))
    flipped = net.replace(A=-net.A, b=-net.b, delta=-net.delta)
    x = rng.normal(size=(8, 4))
    assert np.max(np.abs(forward(net, x) - forward(flipped, x))) <= 1e-12


def test_overflow_reports_layer():
    net = ResNet(Architecture(4, 1, "relu", "per_layer"), np.full((4, 1, 1), 1e200), np.zeros((4, 1)),
                 np.array([1.0, 1e200, 1.0, 1.0]))
    with pytest.raises(NonFiniteStateError) as exc:
        forward(net, np.array([1.0]))
    assert exc.value.layer == 2


def test_loss_examples():
    net = ResNet(Architecture(2, 2), np.zeros((2, 2, 2)), np.zeros((2, 2)), np.array(0.3))
    X = np.array([[1.0, 1.0]])
    assert loss(net, X, np.array([[0.0, 0.0]])) == 1.0
    assert loss(net, X, X) == 0.0


def test_loss_permutation_invariant():
    net, X, Y = random_instance("tanh", "shared", 3, n=12)
    perm = np.random.default_rng(0).permutation(12)
    assert loss(net, X[perm], Y[perm]) == pytest.approx(loss(net, X, Y), abs=1e-15)


@pytest.mark.parametrize("activation,mode", SETUPS)
def test_zero_residual_zero_gradient(activation, mode):
    net, X, _ = random_instance(activation, mode, 1)
    Y = forward(net, X)[-1]
    g = backward(net, X, Y)
    assert not np.any(g.A) and not np.any(g.b) and not np.any(g.delta)


@pytest.mark.parametrize("activation,mode", SETUPS)
@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(activation, mode, seed):
    net, X, Y = random_instance(activation, mode, seed)
    assert max_relative_error(net, X, Y) < 1e-5


def test_shared_delta_gradient_is_sum_of_layers():
    net, X, Y = random_instance("tanh", "shared", 11)
    untied = ResNet(Architecture(3, 4, "tanh", "per_layer"), net.A, net.b, np.full(3, float(net.delta)))
    tied, free = backward(net, X, Y), backward(untied, X, Y)
    assert float(tied.delta) == pytest.approx(free.delta.sum(), rel=1e-14)


def _data(n=64, d=10):
    ds = generate_synthetic(0, n, d)
    return ds.inputs, ds.targets


def test_huge_epsilon_stops_after_one_update():
    X, Y = _data()
    net = init_network(Architecture(4, 10), 0)
    for eps in (1e9, 1e-12):
        _, hist = sgd_train(net, X, Y, TrainConfig(early_stop=eps, max_updates=1))
        assert hist.updates == 1
        assert hist.converged == (hist.losses[0] < eps)
    _, hist = sgd_train(net, X, Y, TrainConfig(early_stop=1e9, max_updates=50))
    assert hist.updates == 1 and hist.converged


def test_zero_learning_rate_keeps_parameters():
    X, Y = _data()
    net = init_network(Architecture(4, 10), 0)
    trained, hist = sgd_train(net, X, Y, TrainConfig(learning_rate=0.0, early_stop=0.0, max_updates=20))
    assert hist.updates == 20
    assert trained.same_parameters(net)


def test_training_deterministic():
    X, Y = _data()
    for activation, mode in SETUPS:
        net = init_network(Architecture(5, 10, activation, mode), 2)
        a, ha = sgd_train(net, X, Y, TrainConfig(max_updates=30, seed=2))
        b, hb = sgd_train(net, X, Y, TrainConfig(max_updates=30, seed=2))
        assert a.same_parameters(b) and ha.losses == hb.losses
        assert math.isfinite(ha.max_hidden_norm)


def test_shared_tanh_delta_clamped_nonnegative():
    X, Y = _data()
    net = init_network(Architecture(3, 10), 0).replace(delta=np.array(1e-6))
    # targets pointing away from the identity push delta down
    trained, _ = sgd_train(net, X, X - 5 * np.tanh(X), TrainConfig(learning_rate=0.5, max_updates=20))
    assert float(trained.delta) >= 0.0


@pytest.mark.xfail(strict=True, reason="160 updates at learning rate 0.01 leave the L=16 tanh loss near 0.2; "
                                       "about 665 updates are needed (see the decisions ledger)")
def test_default_hyperparameters_reach_early_stop_at_depth_16():
    t = TRAINING_DEFAULTS["synthetic"]
    ds = generate_synthetic(0, t["n"], 10)
    cfg = TrainConfig(t["batch_size"], t["learning_rate"], t["early_stop"], t["max_updates"], seed=0)
    _, hist = sgd_train(init_network(Architecture(16, 10), 0), ds.inputs, ds.targets, cfg)
    assert hist.final_loss < 0.01


def test_depth_16_reaches_early_stop_with_longer_budget():
    t = TRAINING_DEFAULTS["synthetic"]
    ds = generate_synthetic(0, t["n"], 10)
    cfg = TrainConfig(t["batch_size"], t["learning_rate"], t["early_stop"], 2000, seed=0)
    _, hist = sgd_train(init_network(Architecture(16, 10), 0), ds.inputs, ds.targets, cfg)
    assert hist.converged and hist.final_loss < 0.01


@pytest.mark.parametrize("activation,mode", SETUPS)
def test_checkpoint_round_trip(tmp_path, activation, mode):
    net = init_network(Architecture(9, 3, activation, mode), 1)
    net.info.update(loss_final=0.123456789, converged=True)
    save_checkpoint(net, tmp_path / "n.rslb")
    back = load_checkpoint(tmp_path / "n.rslb")
    assert back.same_parameters(net)
    assert back.info == net.info


def test_checkpoint_payload_size():
    L, d = 100, 10
    net = init_network(Architecture(L, d, "relu", "per_layer"), 0)
    raw = checkpoint_bytes(net)
    (hlen,) = struct.unpack("<I", raw[8:12])
    assert len(raw) - 12 - hlen - 8 == L * (d * d + d + 1) * 8


def test_checkpoint_corruption():
    raw = checkpoint_bytes(init_network(Architecture(3, 2), 0))
    with pytest.raises(CheckpointVersionError):
        parse_checkpoint(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointVersionError):
        parse_checkpoint(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(CheckpointTruncatedError):
        parse_checkpoint(raw[:-3])
    flipped = bytearray(raw)
    flipped[-12] ^= 1
    with pytest.raises(CheckpointChecksumError):
        parse_checkpoint(bytes(flipped))


def test_resnet_validation():
    with pytest.raises(ValueError):
        ResNet(Architecture(2, 2), np.zeros((2, 2, 2)), np.zeros((2, 2)), np.array(-0.1))
    with pytest.raises(ValueError):
        ResNet(Architecture(2, 2), np.zeros((3, 2, 2)), np.zeros((2, 2)), np.array(0.1))
    with pytest.raises(ValueError):
        Architecture(0, 2)
