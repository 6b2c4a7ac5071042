import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seva.hybrid_am import (FrameBatch, HybridAcousticModel, LhucParams, forward_am, head_weights,
                            init_hybrid, lhuc_scale, mtl_loss_dnn, mtl_objective, read_hybrid,
                            state_priors, train_am, write_hybrid, xi)
from seva.netcore import DimensionError, TrainConfig, check_gradients, softmax


def small_model(input_dim=5, seed=0, hidden=6, n_hidden=3):
    return init_hybrid(input_dim, n_states=6, n_phones=2, hidden_dim=hidden, n_hidden=n_hidden,
                       seed=seed)


def test_lhuc_examples():
    h = np.array([1.0, 2.0])
    np.testing.assert_array_equal(lhuc_scale(h, np.zeros(2), np.zeros(2)), h)
    np.testing.assert_allclose(lhuc_scale(h, np.full(2, math.log(3)), np.zeros(2)), [1.5, 3.0],
                               atol=1e-12)
    np.testing.assert_allclose(lhuc_scale(h, np.full(2, 40.0), np.full(2, 40.0)), 4 * h,
                               rtol=1e-12)
    with pytest.raises(DimensionError):
        lhuc_scale(h, np.zeros(3), np.zeros(2))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8), st.integers(0, 1000))
def test_lhuc_factor_range(r, seed):
    r_s = np.array(r)
    r_v = np.random.default_rng(seed).normal(size=len(r)) * 10
    f = xi(r_s) * xi(r_v)
    assert np.all(f > 0) and np.all(f < 4)


def test_zero_lhuc_matches_unadapted():
    model = small_model()
    lhuc = LhucParams(model.lhuc_dim, ["s1"])
    x = np.random.default_rng(1).normal(size=(7, 5))
    plain = forward_am(model, x)
    adapted = forward_am(model, x, lhuc=lhuc, condition=("s1", 2))
    for k in plain:
        np.testing.assert_allclose(adapted[k], plain[k], rtol=0, atol=1e-12)
        np.testing.assert_allclose(plain[k].sum(axis=1), 1.0, atol=1e-9)


def test_single_frame_manual_oracle():
    model = small_model(hidden=4, n_hidden=2)
    lhuc = LhucParams(model.lhuc_dim, ["s"])
    rng = np.random.default_rng(2)
    lhuc.r_spkr_table[0] = rng.normal(size=4)
    lhuc.r_seve_table[1] = rng.normal(size=4)
    x = rng.normal(size=5)
    z = (x - model.feature_mean) / model.feature_scale
    l1, l2 = model.trunk.layers
    h1 = np.maximum(0, l1.weight @ z + l1.bias)
    h1 = h1 * (2 / (1 + np.exp(-lhuc.r_spkr_table[0]))) * (2 / (1 + np.exp(-lhuc.r_seve_table[1])))
    h2 = np.maximum(0, l2.weight @ h1 + l2.bias)
    tri = model.tri_head.layers[0]
    logits = tri.weight @ h2 + tri.bias
    expected = np.exp(logits - logits.max())
    expected /= expected.sum()
    got = forward_am(model, x[None, :], lhuc=lhuc, condition=("s", 1))["tri"][0]
    np.testing.assert_allclose(got, expected, atol=1e-10)


def test_aux_required_and_unknown_keys():
    model = small_model(input_dim=7)
    with pytest.raises(DimensionError, match="auxiliary"):
        forward_am(model, np.zeros((3, 5)))
    out = forward_am(model, np.zeros((3, 5)), aux=np.ones(2))
    assert out["tri"].shape == (3, 6)
    lhuc = LhucParams(model.lhuc_dim, ["a"])
    with pytest.raises(KeyError):
        forward_am(model, np.zeros((3, 5)), aux=np.ones(2), lhuc=lhuc, condition=("b", 0))
    with pytest.raises(KeyError):
        forward_am(model, np.zeros((3, 5)), aux=np.ones(2), lhuc=lhuc, condition=(None, 7))


def test_frame_independence():
    model = small_model()
    x = np.random.default_rng(3).normal(size=(10, 5))
    whole = forward_am(model, x)["tri"]
    parts = np.vstack([forward_am(model, x[:4])["tri"], forward_am(model, x[4:])["tri"]])
    np.testing.assert_allclose(whole, parts, atol=1e-14)


def test_mtl_loss_examples():
    s, m = 6, 2
    tri = np.array([0, 3, 5])
    mono = tri // 3
    seve = np.array([1, 1, 1])
    onehot = {"tri": np.eye(s)[tri], "mono": np.eye(m)[mono], "seve": np.eye(4)[seve]}
    targets = {"tri": tri, "mono": mono, "seve": seve}
    assert mtl_loss_dnn(onehot, targets).scalar == 0.0
    uniform = {"tri": np.full((3, s), 1 / s), "mono": np.full((3, m), 1 / m),
               "seve": np.full((3, 4), 1 / 4)}
    assert mtl_loss_dnn(uniform, targets).scalar == pytest.approx(
        (math.log(s) + math.log(m) + math.log(4)) / 3, abs=1e-12)


def test_mtl_loss_matches_per_head_oracle():
    rng = np.random.default_rng(4)
    post = {k: softmax(rng.normal(size=(5, n))) for k, n in (("tri", 6), ("mono", 2), ("seve", 4))}
    targets = {"tri": rng.integers(0, 6, 5), "mono": rng.integers(0, 2, 5),
               "seve": rng.integers(0, 4, 5)}
    per_head = {k: -np.mean([math.log(post[k][i, targets[k][i]]) for i in range(5)])
                for k in post}
    w = {"tri": 0.2, "mono": 0.3, "seve": 0.5}
    assert mtl_loss_dnn(post, targets, w).scalar == pytest.approx(
        sum(w[k] * per_head[k] for k in w), abs=1e-12)
    two = mtl_loss_dnn(post, targets, {"tri": 0.5, "mono": 0.5, "seve": 0.0}).scalar
    assert two == pytest.approx(0.5 * per_head["tri"] + 0.5 * per_head["mono"], abs=1e-12)


def test_head_weights_redistribute():
    assert head_weights(True) == pytest.approx({"tri": 1 / 3, "mono": 1 / 3, "seve": 1 / 3})
    assert head_weights(False) == pytest.approx({"tri": 0.5, "mono": 0.5, "seve": 0.0})


def test_mtl_gradient_with_lhuc():
    rng = np.random.default_rng(5)
    model = small_model(seed=5)
    lhuc = LhucParams(model.lhuc_dim, ["a", "b"])
    lhuc.r_spkr_table[:] = rng.normal(size=lhuc.r_spkr_table.shape) * 0.5
    lhuc.r_seve_table[:] = rng.normal(size=lhuc.r_seve_table.shape) * 0.5
    n = 12
    tri = rng.integers(0, 6, n)
    batch = FrameBatch(rng.normal(size=(n, 5)), tri, tri // 3, rng.integers(0, 4, n),
                       rng.integers(0, 2, n), rng.integers(0, 4, n))

    def fn():
        model.zero_grad()
        lhuc.zero_grad()
        v = mtl_objective(model, batch, head_weights(True), lhuc)
        grads = [g for net in model.nets().values() for g in net.grad_arrays()]
        return v.scalar, grads + [lhuc.g_spkr, lhuc.g_seve]
    params = [a for net in model.nets().values() for a in net.arrays()]
    report = check_gradients(fn, params + [lhuc.r_spkr_table, lhuc.r_seve_table], n_coords=150)
    assert report.passed, report


def toy_batch(n=240, seed=0):
    rng = np.random.default_rng(seed)
    centres = np.random.default_rng(42).normal(size=(6, 5)) * 2
    tri = rng.integers(0, 6, n)
    sev = rng.integers(0, 4, n)
    return FrameBatch(centres[tri] + 0.5 * rng.normal(size=(n, 5)), tri, tri // 3, sev,
                      None, sev)


def test_train_am_all_options_and_determinism():
    data = toy_batch()
    cfg = TrainConfig(learning_rate=0.05, epochs=3, batch_size=32, seed=3)
    kw = dict(n_states=6, n_phones=2, hidden_dim=8, n_hidden=3)
    h1, h2 = [], []
    m1, l1 = train_am(data, cfg, use_seve_head=True, use_lhuc_seve=True, history=h1, **kw)
    m2, l2 = train_am(data, cfg, use_seve_head=True, use_lhuc_seve=True, history=h2, **kw)
    assert h1 == h2 and h1[-1] < h1[0]
    np.testing.assert_array_equal(l1.r_seve_table, l2.r_seve_table)
    assert np.any(l1.r_seve_table)
    with pytest.raises(ValueError):
        train_am(FrameBatch(data.features, data.tri, data.mono), cfg, use_lhuc_seve=True, **kw)


def test_state_priors_floor():
    p = state_priors(np.array([0, 0, 1]), 4)
    assert p[2] == 1e-6 and p[0] == pytest.approx(2 / 3)


def test_checkpoint_roundtrip():
    model = small_model()
    model.feature_mean = np.arange(5.0)
    model.feature_scale = np.arange(1.0, 6.0)
    lhuc = LhucParams(model.lhuc_dim, ["VL01", "H02"])
    lhuc.r_spkr_table[:] = np.random.default_rng(0).normal(size=lhuc.r_spkr_table.shape)
    lhuc.r_seve_table[2] = 0.5
    buf = io.BytesIO()
    write_hybrid(buf, model, lhuc)
    back, back_lhuc = read_hybrid(io.BytesIO(buf.getvalue()))
    x = np.random.default_rng(1).normal(size=(4, 5))
    np.testing.assert_allclose(forward_am(back, x, lhuc=back_lhuc, condition=("H02", 2))["tri"],
                               forward_am(model, x, lhuc=lhuc, condition=("H02", 2))["tri"],
                               atol=1e-12)
    assert back_lhuc.speakers == ["VL01", "H02"]


def test_estimator_wrapper():
    data = toy_batch()
    est = HybridAcousticModel(n_states=6, n_phones=2, hidden_dim=8, n_hidden=2, epochs=20,
                              batch_size=32, learning_rate=0.2)
    est.fit(data.features, data.tri, mono=data.mono)
    assert est.get_params()["hidden_dim"] == 8
    proba = est.predict_proba(data.features)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-9)
    assert np.mean(est.predict(data.features) == data.tri) > 0.9
