import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cloudmask import layers as L
from cloudmask.errors import ConfigError, DataError, ShapeError
from cloudmask.gradcheck import NETWORK_TOL, check_network
from cloudmask.model import backward, build_mlp, forward
from cloudmask.training import AdamState, TrainConfig, adam_step, bce_loss, patch_loss, train

from oracles import central_difference


def test_bce_half():
    loss, _ = bce_loss(np.array([0.5]), np.array([1.0]))
    assert abs(loss - math.log(2)) < 1e-12


def test_bce_perfect():
    loss, _ = bce_loss(np.array([1 - 1e-12]), np.array([1.0]))
    assert loss < 1e-11


def test_bce_matches_loop_and_fd(rng):
    h = rng.uniform(0.01, 0.99, 20)
    y = rng.integers(0, 2, 20).astype(float)
    loss, grad = bce_loss(h, y)
    total = 0.0
    for hi, yi in zip(h, y):
        total += -(yi * math.log(hi) + (1 - yi) * math.log(1 - hi))
    assert abs(loss - total / 20) < 1e-12
    num = central_difference(lambda: bce_loss(h, y)[0], h, step=1e-7)
    assert np.max(np.abs(grad - num) / np.abs(num)) < 1e-6


def test_bce_finite_at_extremes():
    loss, grad = bce_loss(np.array([0.0, 1.0]), np.array([1.0, 0.0]))
    assert np.isfinite(loss) and np.all(np.isfinite(grad))


def test_bce_shape_mismatch():
    with pytest.raises(ShapeError):
        bce_loss(np.zeros(3), np.zeros(4))


@pytest.mark.parametrize("seed", range(5))
def test_sigmoid_bce_combined_gradient(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((16, 81)) * 3
    y = rng.integers(0, 2, z.shape).astype(float)
    h, cache = L.activation_forward("sigmoid", z)
    _, dh = bce_loss(h, y)
    dz, _ = L.layer_backward("sigmoid", cache, dh)
    assert np.max(np.abs(dz - (h - y) / h.size)) < 1e-10


def test_patch_loss_constant():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, (3, 81)).astype(float)
    assert patch_loss(np.full((3, 81), 0.5), y) == pytest.approx(math.log(2), abs=1e-12)


def test_patch_loss_perfect():
    y = np.random.default_rng(1).integers(0, 2, (2, 81)).astype(float)
    h = np.where(y == 1, 1 - 1e-12, 1e-12)
    assert patch_loss(h, y) < 1e-11


def test_patch_loss_decomposes(rng):
    h = rng.uniform(0.05, 0.95, (2, 81))
    y = rng.integers(0, 2, (2, 81)).astype(float)
    parts = [bce_loss(h[i], y[i])[0] for i in range(2)]
    assert abs(patch_loss(h, y) - np.mean(parts)) < 1e-12


def test_patch_loss_shape():
    with pytest.raises(ShapeError):
        patch_loss(np.zeros((2, 80)), np.zeros((2, 80)))


def test_adam_zero_gradient():
    params = {"w": np.array([1.0, -2.0])}
    state = AdamState.for_params(params)
    new, state = adam_step(params, {"w": np.zeros(2)}, state)
    assert np.array_equal(new["w"], params["w"]) and state.t == 1


def test_adam_first_step_is_lr_sign():
    params = {"w": np.array([0.0, 0.0])}
    g = np.array([0.3, -5.0])
    state = AdamState.for_params(params, lr=0.01)
    new, _ = adam_step(params, {"w": g}, state)
    # t=1: m_hat = g, v_hat = g^2, step = lr * g / (|g| + eps)
    assert np.allclose(new["w"], -0.01 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)
    assert np.allclose(new["w"], [-0.01, 0.01], atol=1e-9)


def test_adam_trajectory_on_quadratic():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    # hand-rolled reference
    w, m, v = 1.0, 0.0, 0.0
    ref = []
    for t in range(1, 4):
        g = 2 * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        ref.append(w)
    params = {"w": np.array([1.0])}
    state = AdamState.for_params(params, lr=lr)
    got = []
    for _ in range(3):
        params, state = adam_step(params, {"w": 2 * params["w"]}, state)
        got.append(params["w"][0])
    assert np.max(np.abs(np.array(got) - ref)) < 1e-12


def test_adam_is_pure():
    params = {"w": np.array([0.5])}
    state = AdamState.for_params(params)
    a, sa = adam_step(params, {"w": np.array([0.2])}, state)
    b, sb = adam_step(params, {"w": np.array([0.2])}, state)
    assert a["w"] == b["w"] and sa.t == sb.t == 1 and state.t == 0 and params["w"][0] == 0.5


def test_adam_shape_mismatch():
    params = {"w": np.zeros(2)}
    with pytest.raises(ShapeError):
        adam_step(params, {"w": np.zeros(3)}, AdamState.for_params(params))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_adam_second_moment_nonnegative(gs):
    params = {"w": np.zeros(1)}
    state = AdamState.for_params(params)
    for g in gs:
        params, state = adam_step(params, {"w": np.array([g])}, state)
        assert state.v["w"][0] >= 0 and np.isfinite(params["w"][0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=10), st.data())
def test_bce_always_finite(hs, data):
    ys = data.draw(st.lists(st.sampled_from([0.0, 1.0]), min_size=len(hs), max_size=len(hs)))
    loss, grad = bce_loss(np.array(hs), np.array(ys))
    assert np.isfinite(loss) and np.all(np.isfinite(grad))


def _toy():
    x = np.array([[1.0, 0.5], [-1.0, -0.5]])
    y = np.array([1, 0])
    return x, y


def test_train_loss_decreases():
    x, y = _toy()
    spec, w = build_mlp(2, [4], 0)
    _, hist = train(spec, w, x, y, TrainConfig(batch_size=2, epochs=10, lr=0.05, seed=0))
    losses = [h["train_loss"] for h in hist]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert set(hist[0]) == {"epoch", "train_loss", "train_oa", "seconds"}


def test_train_lr_zero_freezes():
    with pytest.raises(ConfigError):
        TrainConfig(lr=-1e-3)
    x, y = _toy()
    spec, w = build_mlp(2, [4], 0)
    w2, _ = train(spec, w, x, y, TrainConfig(batch_size=1, epochs=3, lr=0.0, seed=0))
    assert all(np.array_equal(w[k], w2[k]) for k in w.tensors)


def test_train_deterministic(rng):
    x = rng.standard_normal((40, 3))
    y = (x[:, 0] > 0).astype(int)
    spec, w = build_mlp(3, [5], 0)
    a, _ = train(spec, w, x, y, TrainConfig(batch_size=8, epochs=3, seed=4))
    b, _ = train(spec, w, x, y, TrainConfig(batch_size=8, epochs=3, seed=4))
    assert all(np.array_equal(a[k], b[k]) for k in a.tensors)


def test_train_keeps_partial_batch(rng):
    x = rng.standard_normal((5, 3))
    y = np.array([0, 1, 0, 1, 1])
    spec, w = build_mlp(3, [], 0)
    _, hist = train(spec, w, x, y, TrainConfig(batch_size=4, epochs=1, seed=0))
    assert hist[0]["train_oa"] * 5 == round(hist[0]["train_oa"] * 5)


def test_train_errors(rng):
    spec, w = build_mlp(3, [], 0)
    with pytest.raises(DataError):
        train(spec, w, np.zeros((0, 3)), np.zeros(0), TrainConfig(epochs=1))
    with pytest.raises(DataError):
        train(spec, w, np.zeros((4, 3)), np.zeros((4, 81)), TrainConfig(epochs=1))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(output_mode="patch5")


@pytest.mark.parametrize("seed", range(10))
def test_end_to_end_gradient(seed):
    assert check_network(seed).max_error < NETWORK_TOL


def test_mlp_backward_matches_fd(rng):
    spec, w = build_mlp(3, [4, 3], 2)
    x = rng.standard_normal((6, 3))
    y = rng.integers(0, 2, (6, 1)).astype(float)
    pred, caches = forward(spec, w, x, training=True)
    grads = backward(spec, caches, bce_loss(pred, y)[1])
    for name in ("fc1.weight", "fc2.bias", "out.weight"):
        num = central_difference(lambda: bce_loss(forward(spec, w, x, training=True)[0], y)[0], w.tensors[name])
        assert np.max(np.abs(grads[name] - num)) < 1e-8
