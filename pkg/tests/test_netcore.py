import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from seva.netcore import (DimensionError, Layer, NetParams, NumericError, TrainConfig, backward,
                          check_gradients, forward, init_params, interpolate_losses,
                          read_params, sgd_step, softmax, softmax_ce, write_params)


def test_single_linear_layer():
    net = NetParams([Layer(np.array([[2.0]]), np.array([1.0]), "linear")])
    assert forward(net, np.array([3.0])).output.tolist() == [7.0]


def test_relu_layer():
    net = NetParams([Layer(np.eye(2), np.zeros(2), "relu")])
    assert forward(net, np.array([-1.0, 2.0])).output.tolist() == [0.0, 2.0]


def test_two_layer_matches_straight_line_arithmetic():
    rng = np.random.default_rng(1)
    net = init_params([5, 4, 3], ["relu", "sigmoid"], rng)
    net.layers[0].bias[:] = rng.normal(size=4)
    x = rng.normal(size=(6, 5))
    w1, b1 = net.layers[0].weight, net.layers[0].bias
    w2, b2 = net.layers[1].weight, net.layers[1].bias
    expected = np.empty((6, 3))
    for n in range(6):
        h = [max(0.0, sum(w1[i, j] * x[n, j] for j in range(5)) + b1[i]) for i in range(4)]
        for k in range(3):
            z = sum(w2[k, i] * h[i] for i in range(4)) + b2[k]
            expected[n, k] = 1.0 / (1.0 + math.exp(-z))
    np.testing.assert_allclose(forward(net, x).output, expected, rtol=0, atol=1e-12)


def test_forward_dimension_error_names_layer():
    net = init_params([3, 2], "relu", np.random.default_rng(0))
    with pytest.raises(DimensionError, match="layer 0"):
        forward(net, np.zeros(4))


def test_layers_must_chain():
    rng = np.random.default_rng(0)
    with pytest.raises(DimensionError):
        NetParams([Layer(rng.normal(size=(3, 2)), np.zeros(3)),
                   Layer(rng.normal(size=(2, 4)), np.zeros(2))])


def test_grad_buffers_match_params():
    net = init_params([4, 3, 2], "relu", np.random.default_rng(0))
    for layer, (gw, gb) in zip(net.layers, net.grads):
        assert gw.shape == layer.weight.shape and gb.shape == layer.bias.shape


def test_glorot_bounds():
    net = init_params([30, 20], "relu", np.random.default_rng(0))
    limit = math.sqrt(6 / 50)
    assert np.all(np.abs(net.layers[0].weight) <= limit)
    assert not np.any(net.layers[0].bias)


def test_softmax_ce_uniform():
    loss, _ = softmax_ce(np.zeros(2), 0)
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_softmax_ce_stationary_at_soft_target():
    logits = np.array([0.3, -1.2, 2.0])
    _, grad = softmax_ce(logits, softmax(logits))
    np.testing.assert_allclose(grad, 0.0, atol=1e-15)


def test_softmax_ce_finite_difference():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=4)
    _, grad = softmax_ce(logits, 2)
    h = 1e-5
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        num = (softmax_ce(logits + e, 2)[0] - softmax_ce(logits - e, 2)[0]) / (2 * h)
        assert abs(num - grad[i]) / max(abs(num), abs(grad[i])) < 1e-5


def test_softmax_ce_rejects_nonfinite_and_bad_targets():
    with pytest.raises(NumericError):
        softmax_ce(np.array([np.nan, 0.0]), 0)
    with pytest.raises(ValueError):
        softmax_ce(np.zeros(2), np.array([0.7, 0.7]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-700, 700)))
def test_softmax_is_a_distribution(logits):
    p = softmax(logits)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-9


def test_interpolate_losses_footnote_weights():
    w = {"tri": 1 / 3, "mono": 1 / 3, "seve": 1 / 3}
    v = interpolate_losses(w, {"tri": 3.0, "mono": 6.0, "seve": 9.0})
    assert v.scalar == pytest.approx(6.0, rel=1e-12)
    assert v.per_head == {"tri": 3.0, "mono": 6.0, "seve": 9.0}


def test_interpolate_losses_zero_and_half():
    assert interpolate_losses({"a": 0.5, "b": 0.5}, {"a": 0.0, "b": 0.0}).scalar == 0.0
    a, b = 1.234, 5.678
    assert interpolate_losses({"a": 0.5, "b": 0.5}, {"a": a, "b": b}).scalar == \
        pytest.approx(0.5 * a + 0.5 * b, rel=1e-12)


def test_interpolate_losses_missing_component():
    with pytest.raises(KeyError):
        interpolate_losses({"a": 0.5, "b": 0.5}, {"a": 1.0})
    assert interpolate_losses({"a": 1.0, "b": 0.0}, {"a": 2.0}).scalar == 2.0


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 10), st.floats(0.01, 10), st.floats(-100, 100), st.floats(-100, 100))
def test_interpolate_losses_linear_in_weight(wa, wb, la, lb):
    base = interpolate_losses({"a": wa, "b": wb}, {"a": la, "b": lb}).scalar
    doubled = interpolate_losses({"a": 2 * wa, "b": wb}, {"a": la, "b": lb}).scalar
    assert doubled - base == pytest.approx(wa * la, rel=1e-12, abs=1e-12)


def test_sgd_step():
    p = np.array([1.0])
    sgd_step([p], [np.array([2.0])], 0.1)
    assert p[0] == pytest.approx(0.8, abs=1e-15)
    q = np.array([1.5, -2.0])
    sgd_step([q], [np.zeros(2)], 0.3)
    assert q.tolist() == [1.5, -2.0]


def test_sgd_step_matches_elementwise_and_checks_shapes():
    rng = np.random.default_rng(0)
    ps = [rng.normal(size=(3, 4)), rng.normal(size=5)]
    gs = [rng.normal(size=(3, 4)), rng.normal(size=5)]
    expected = [[p_ - 0.05 * g_ for p_, g_ in zip(p.ravel(), g.ravel())] for p, g in zip(ps, gs)]
    sgd_step(ps, gs, 0.05)
    for p, e in zip(ps, expected):
        np.testing.assert_array_equal(p.ravel(), e)
    with pytest.raises(DimensionError):
        sgd_step([np.zeros(2)], [np.zeros(3)], 0.1)
    with pytest.raises(ValueError):
        sgd_step([np.zeros(2)], [np.zeros(2)], 0.0)


def test_check_gradients_quadratic():
    p = np.array([3.0])
    report = check_gradients(lambda: (0.5 * p[0] ** 2, [p.copy()]), [p])
    assert report.passed and report.max_rel_error < 1e-6


def _ce_net_loss(net, x, y):
    def fn():
        net.zero_grad()
        acts = forward(net, x)
        loss, g = softmax_ce(acts.output, y)
        backward(net, acts, g)
        return loss, net.grad_arrays()
    return fn


def test_check_gradients_softmax_ce_net():
    rng = np.random.default_rng(5)
    net = init_params([6, 8, 4], ["sigmoid", "linear"], rng)
    x, y = rng.normal(size=(10, 6)), rng.integers(0, 4, size=10)
    report = check_gradients(_ce_net_loss(net, x, y), net.arrays(), n_coords=100)
    assert report.passed, report


def test_check_gradients_detects_corruption():
    p = np.array([3.0, -1.0])
    report = check_gradients(lambda: (0.5 * float(p @ p), [p * 1.5]), [p])
    assert not report.passed


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(loss_weights={"a": 0.0})
    with pytest.raises(ValueError):
        TrainConfig(seed=-1)


def test_checkpoint_roundtrip():
    net = init_params([3, 5, 2], ["relu", "sigmoid"], np.random.default_rng(0))
    buf = io.BytesIO()
    write_params(buf, net)
    raw = buf.getvalue()
    assert raw[:4] == b"SEVA"
    assert int.from_bytes(raw[4:8], "little") == 1 and int.from_bytes(raw[8:12], "little") == 2
    back = read_params(io.BytesIO(raw))
    for a, b in zip(net.layers, back.layers):
        np.testing.assert_array_equal(a.weight, b.weight)
        np.testing.assert_array_equal(a.bias, b.bias)
        assert a.activation == b.activation
