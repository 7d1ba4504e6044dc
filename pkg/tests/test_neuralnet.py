import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from equirouter.neuralnet import (
    DenseLayer,
    adam_step,
    backward,
    forward,
    grad_check,
    init_adam,
    init_dense,
    load_checkpoint,
    save_checkpoint,
)
from equirouter.rng import make_rng


# ---------------------------------------------------------------------------
# forward


def test_forward_identity():
    layer = DenseLayer(weight=np.eye(3), bias=np.zeros(3))
    x = np.array([[1.0, -2.0, 3.0]])
    assert np.array_equal(forward(layer, x), x)


def test_forward_relu():
    layer = DenseLayer(weight=np.eye(2), bias=np.zeros(2), activation="relu")
    assert np.array_equal(forward(layer, np.array([[-1.0, 2.0]])), [[0.0, 2.0]])


def test_forward_hand_product():
    layer = DenseLayer(weight=np.array([[1.0, 1.0]]), bias=np.array([1.0]))
    out = forward(layer, np.array([[2.0, 3.0]]))
    assert out.shape == (1, 1) and out[0, 0] == pytest.approx(6.0)


def test_forward_shape_mismatch():
    layer = DenseLayer(weight=np.eye(3), bias=np.zeros(3))
    with pytest.raises(ValueError):
        forward(layer, np.zeros((1, 4)))


# ---------------------------------------------------------------------------
# backward


def test_backward_zero_grad_out():
    rng = make_rng(0, 1)
    layer = init_dense(rng, 4, 3, "relu")
    x = rng.standard_normal((5, 4))
    gx, gw, gb = backward(layer, x, np.zeros((5, 3)))
    assert not gx.any() and not gw.any() and not gb.any()


def test_backward_scalar_product_rule():
    layer = DenseLayer(weight=np.array([[2.0]]), bias=np.array([0.0]))
    x = np.array([[3.0]])
    _, gw, _ = backward(layer, x, np.array([[5.0]]))
    assert gw[0, 0] == pytest.approx(15.0)  # grad_w = grad_out * x


def _fd_layer_grads(layer, x, grad_out, h=1e-5):
    def loss(w, b):
        probe = DenseLayer(weight=w, bias=b, activation=layer.activation)
        return float(np.sum(forward(probe, x) * grad_out))

    gw = np.zeros_like(layer.weight)
    for i in np.ndindex(*layer.weight.shape):
        wp, wm = layer.weight.copy(), layer.weight.copy()
        wp[i] += h
        wm[i] -= h
        gw[i] = (loss(wp, layer.bias) - loss(wm, layer.bias)) / (2 * h)
    gb = np.zeros_like(layer.bias)
    for i in range(layer.bias.size):
        bp, bm = layer.bias.copy(), layer.bias.copy()
        bp[i] += h
        bm[i] -= h
        gb[i] = (loss(layer.weight, bp) - loss(layer.weight, bm)) / (2 * h)
    return gw, gb


def test_backward_matches_finite_differences():
    rng = make_rng(2, 1)
    layer = init_dense(rng, 4, 3, "relu")
    x = rng.standard_normal((5, 4))
    grad_out = rng.standard_normal((5, 3))
    _, gw, gb = backward(layer, x, grad_out)
    fw, fb = _fd_layer_grads(layer, x, grad_out)
    assert np.max(np.abs(gw - fw) / np.maximum(np.abs(fw), 1e-6)) < 1e-4
    assert np.max(np.abs(gb - fb) / np.maximum(np.abs(fb), 1e-6)) < 1e-4


@settings(max_examples=25, deadline=None)
@given(
    n_in=st.integers(1, 6),
    n_out=st.integers(1, 6),
    batch=st.integers(1, 4),
    act=st.sampled_from(["identity", "relu"]),
    seed=st.integers(0, 1000),
)
def test_backward_matches_fd_any_shape(n_in, n_out, batch, act, seed):
    rng = make_rng(seed, 3)
    layer = init_dense(rng, n_in, n_out, act)
    layer.bias = rng.standard_normal(n_out)  # move relu kinks off zero inputs
    x = rng.standard_normal((batch, n_in))
    grad_out = rng.standard_normal((batch, n_out))
    _, gw, gb = backward(layer, x, grad_out)
    fw, fb = _fd_layer_grads(layer, x, grad_out)
    assert np.max(np.abs(gw - fw) / np.maximum(np.abs(fw), 1e-4)) < 1e-3
    assert np.max(np.abs(gb - fb) / np.maximum(np.abs(fb), 1e-4)) < 1e-3


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_grads_is_identity():
    params = [np.array([1.0, -2.0]), np.array([[3.0]])]
    state = init_adam(params, learning_rate=0.1, weight_decay=0.0)
    out = adam_step(state, params, [np.zeros(2), np.zeros((1, 1))])
    assert np.array_equal(out[0], params[0]) and np.array_equal(out[1], params[1])


def test_adam_first_step_magnitude():
    params = [np.array([1.0])]
    state = init_adam(params, learning_rate=1e-3)
    out = adam_step(state, params, [np.array([1.0])])
    assert out[0][0] == pytest.approx(1.0 - 1e-3, abs=1e-8)


def test_adam_decay_only():
    params = [np.array([2.0])]
    state = init_adam(params, learning_rate=0.01, weight_decay=0.5)
    out = adam_step(state, params, [np.array([0.0])])
    assert out[0][0] == pytest.approx(2.0 - 0.01 * 0.5 * 2.0)


def test_adam_deterministic():
    def run():
        rng = make_rng(4, 2)
        params = [rng.standard_normal((3, 2))]
        state = init_adam(params, learning_rate=0.01)
        for _ in range(10):
            params = adam_step(state, params, [params[0] * 0.3])
        return params[0]

    assert np.array_equal(run(), run())


def test_adam_shape_mismatch():
    params = [np.zeros(2)]
    state = init_adam(params)
    with pytest.raises(ValueError):
        adam_step(state, params, [np.zeros(3)])


# ---------------------------------------------------------------------------
# gradient checker


def test_grad_check_quadratic_exact():
    def fn(params):
        (theta,) = params
        return 0.5 * float(np.sum(theta**2)), [theta]

    rng = make_rng(5, 1)
    report = grad_check(fn, [rng.standard_normal(8)], h=1e-5)
    assert report.max_rel_error < 1e-8


def test_grad_check_detects_wrong_gradient():
    def fn(params):
        (theta,) = params
        return 0.5 * float(np.sum(theta**2)), [2.0 * theta]  # wrong by 2x

    report = grad_check(fn, [np.ones(3)], h=1e-5)
    assert not report.passed


def test_grad_check_rejects_zero_step():
    with pytest.raises(ValueError):
        grad_check(lambda p: (0.0, p), [np.ones(2)], h=0.0)


def test_grad_check_rejects_nonfinite_loss():
    with pytest.raises(ValueError, match="finite"):
        grad_check(lambda p: (float("nan"), p), [np.ones(2)])


def test_grad_check_coordinate_sampling():
    def fn(params):
        (theta,) = params
        return 0.5 * float(np.sum(theta**2)), [theta]

    report = grad_check(fn, [np.ones(100)], max_coords=10, seed=1)
    assert report.n_coords == 10


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = make_rng(6, 1)
    params = [rng.standard_normal((3, 4)), rng.standard_normal(5) * 1e-17]
    header = {"router_type": "test", "seed": 7, "lr": 1e-3}
    path = tmp_path / "p.ckpt"
    save_checkpoint(path, header, params)
    header_, loaded_params = load_checkpoint(path)
    assert header_["router_type"] == "test" and header_["seed"] == 7
    for a, b in zip(params, loaded_params):
        assert a.shape == b.shape
        assert np.array_equal(a, b)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(path)
