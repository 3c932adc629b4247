import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mortnet.layers import (
    AvgPool1D,
    BatchNorm,
    Conv1D,
    Dense,
    Dropout,
    MissingForwardCache,
    ReLU,
    Sigmoid,
    avgpool1d_forward,
    batchnorm_forward,
    conv1d_forward,
    dense_forward,
    dropout_forward,
    relu_forward,
    sigmoid,
)

from helpers import naive_avgpool, naive_conv1d, naive_matvec


def test_conv_delta_kernel_valid():
    out = conv1d_forward([[1, 2, 3, 4, 5]], [[[0, 1, 0]]], [0.0], padding="valid")
    np.testing.assert_array_equal(out, [[2, 3, 4]])


def test_conv_moving_sum_valid():
    out = conv1d_forward([[1, 2, 3, 4, 5]], [[[1, 1, 1]]], [0.0], padding="valid")
    np.testing.assert_array_equal(out, [[6, 9, 12]])


def test_conv_matches_triple_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(22, 48))
    k = rng.normal(size=(32, 22, 6))
    b = rng.normal(size=32)
    fast = conv1d_forward(x, k, b, padding="same")
    slow = naive_conv1d(x, k, b)
    np.testing.assert_allclose(fast, slow, rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("width", [3, 6, 12])
def test_same_padding_preserves_length(width):
    x = np.ones((2, 4, 17))
    assert conv1d_forward(x, np.ones((5, 4, width)), np.zeros(5)).shape == (2, 5, 17)


def test_conv_channel_mismatch_reports_dims():
    with pytest.raises(ValueError, match="channels"):
        conv1d_forward(np.ones((3, 10)), np.ones((2, 4, 3)), np.zeros(2))


def test_conv_valid_needs_long_enough_input():
    with pytest.raises(ValueError):
        conv1d_forward(np.ones((1, 2)), np.ones((1, 1, 3)), np.zeros(1), padding="valid")


def test_conv_layer_rejects_unsupported_width():
    with pytest.raises(ValueError):
        Conv1D(np.ones((1, 1, 4)), np.zeros(1))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    k = rng.normal(size=(3, 2, 6))
    x, y = rng.normal(size=(2, 2, 20))
    zero = np.zeros(3)
    lhs = conv1d_forward(a * x + b * y, k, zero)
    rhs = a * conv1d_forward(x, k, zero) + b * conv1d_forward(y, k, zero)
    scale = max(1.0, np.abs(lhs).max())
    assert np.max(np.abs(lhs - rhs)) <= 1e-10 * scale


def test_relu_examples():
    np.testing.assert_array_equal(relu_forward([-1, 0, 2]), [0, 0, 2])
    assert not relu_forward(-np.arange(1, 6.0)).any()
    pos = np.arange(1, 6.0)
    np.testing.assert_array_equal(relu_forward(pos), pos)


def test_sigmoid_is_stable_at_extremes():
    out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


def test_avgpool_examples():
    np.testing.assert_array_equal(avgpool1d_forward([[3, 3, 3, 6, 6, 6]], 3, 3), [[3, 6]])
    np.testing.assert_array_equal(avgpool1d_forward([[1, 2, 3]], 3, 3), [[2]])


def test_avgpool_drops_partial_tail():
    assert avgpool1d_forward(np.ones((1, 8)), 3, 3).shape == (1, 2)


def test_avgpool_matches_naive_mean():
    x = np.random.default_rng(1).normal(size=(32, 48))
    np.testing.assert_allclose(avgpool1d_forward(x, 3, 3), naive_avgpool(x, 3, 3), rtol=1e-14, atol=1e-15)


@pytest.mark.parametrize("window,stride", [(0, 1), (3, 0)])
def test_avgpool_rejects_bad_window(window, stride):
    with pytest.raises(ValueError):
        avgpool1d_forward(np.ones((1, 6)), window, stride)


def test_batchnorm_train_normalises():
    rng = np.random.default_rng(2)
    x = 5 + 2 * rng.normal(size=(64, 3, 20))
    out = batchnorm_forward(x, BatchNorm(3, epsilon=0.0), mode="train")
    assert np.all(np.abs(out.mean(axis=(0, 2))) <= 1e-6)
    assert np.all(np.abs(out.var(axis=(0, 2)) - 1) <= 1e-4)


def test_batchnorm_affine_identity():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4000, 1))
    x = (x - x.mean()) / x.std()
    bn = BatchNorm(1, epsilon=0.0)
    bn.params["scale"][:] = 2.0
    bn.params["shift"][:] = 3.0
    out = bn.forward(x, training=True)
    assert abs(out.mean() - 3) < 1e-12 and abs(out.std() - 2) < 1e-9


def test_batchnorm_infer_formula():
    rng = np.random.default_rng(4)
    bn = BatchNorm(5)
    bn.params["scale"][:] = rng.uniform(0.5, 2, 5)
    bn.params["shift"][:] = rng.normal(size=5)
    mu, var = rng.normal(size=5), rng.uniform(0.1, 3, 5)
    bn.set_running_stats(mu, var)
    x = rng.normal(size=(7, 5))
    expected = (x - mu) / np.sqrt(var + bn.epsilon) * bn.params["scale"] + bn.params["shift"]
    np.testing.assert_allclose(batchnorm_forward(x, bn, "infer"), expected, rtol=1e-13)


def test_batchnorm_running_stats_ema():
    bn = BatchNorm(1, momentum=0.9)
    bn.set_running_stats([0.0], [1.0])
    x = np.array([[1.0], [3.0]])
    bn.forward(x, training=True)
    assert bn.running_mean[0] == pytest.approx(0.1 * 2.0)
    assert bn.running_var[0] == pytest.approx(0.9 + 0.1 * 1.0)


def test_batchnorm_infer_before_training_rejected():
    with pytest.raises(RuntimeError):
        batchnorm_forward(np.ones((2, 3)), BatchNorm(3), "infer")


def test_batchnorm_rejects_negative_variance():
    with pytest.raises(ValueError):
        BatchNorm(2).set_running_stats([0, 0], [1, -1])


def test_dropout_inference_identity():
    x = np.random.default_rng(5).normal(size=(10, 10))
    np.testing.assert_array_equal(dropout_forward(x, 0.55, "infer"), x)
    np.testing.assert_array_equal(dropout_forward(x, 1.0, "train", np.random.default_rng(0)), x)


def test_dropout_drop_rate_concentration():
    n = 100_000
    out = dropout_forward(np.ones(n), 0.55, "train", np.random.default_rng(6))
    dropped = np.mean(out == 0)
    sd = np.sqrt(0.45 * 0.55 / n)
    assert abs(dropped - 0.45) <= 3 * sd
    # inverted convention: survivors carry 1/keep
    np.testing.assert_allclose(out[out != 0], 1 / 0.55)


def test_dropout_seeded_reproducible():
    a = dropout_forward(np.ones(1000), 0.55, "train", np.random.default_rng(9))
    b = dropout_forward(np.ones(1000), 0.55, "train", np.random.default_rng(9))
    assert a.tobytes() == b.tobytes()


def test_dropout_rejects_bad_keep():
    with pytest.raises(ValueError):
        Dropout(0.0)


def test_dense_examples():
    x = np.array([1.5, -2.0, 0.25])
    np.testing.assert_array_equal(dense_forward(x, np.eye(3), np.zeros(3)), x)
    np.testing.assert_array_equal(dense_forward([1, 1], [[2, -3]], [1]), [0])


def test_dense_matches_naive_matvec():
    rng = np.random.default_rng(7)
    w, x, b = rng.normal(size=(64, 1536)), rng.normal(size=1536), rng.normal(size=64)
    slow = naive_matvec(w, x, b)
    np.testing.assert_allclose(dense_forward(x, w, b), slow, rtol=1e-12, atol=1e-12)


def test_dense_dimension_mismatch():
    with pytest.raises(ValueError):
        dense_forward(np.ones(3), np.ones((2, 4)), np.zeros(2))


def test_dense_backward_squared_loss_closed_form():
    rng = np.random.default_rng(8)
    w, b = rng.normal(size=(3, 4)), rng.normal(size=3)
    x, y = rng.normal(size=4), rng.normal(size=3)
    layer = Dense(w.copy(), b.copy())
    out = layer.forward(x[None])[0]
    layer.backward((2 * (out - y))[None])
    np.testing.assert_allclose(layer.grads["weight"], 2 * np.outer(w @ x + b - y, x), rtol=1e-12)
    np.testing.assert_allclose(layer.grads["bias"], 2 * (w @ x + b - y), rtol=1e-12)


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(9)
    conv = Conv1D(rng.normal(size=(2, 3, 6)), rng.normal(size=2))
    conv.forward(rng.normal(size=(4, 3, 12)))
    conv.backward(np.zeros((4, 2, 12)))
    assert not conv.grads["kernel"].any() and not conv.grads["bias"].any()


@pytest.mark.parametrize("layer", [ReLU(), Sigmoid(), AvgPool1D(3), BatchNorm(2),
                                   Dense(np.ones((1, 2)), np.zeros(1))])
def test_backward_without_forward_rejected(layer):
    with pytest.raises(MissingForwardCache):
        layer.backward(np.ones((1, 2)))


def _num_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def test_conv_and_pool_input_gradients():
    rng = np.random.default_rng(10)
    conv = Conv1D(rng.normal(size=(2, 3, 12)), rng.normal(size=2))
    pool = AvgPool1D(3)
    x = rng.normal(size=(2, 3, 14))
    up = rng.normal(size=(2, 2, 4))

    def f():
        return float(np.sum(pool.forward(conv.forward(x)) * up))

    f()
    analytic = conv.backward(pool.backward(up))
    np.testing.assert_allclose(analytic, _num_grad(f, x), rtol=1e-6, atol=1e-8)


def test_batchnorm_train_gradients():
    rng = np.random.default_rng(11)
    bn = BatchNorm(3)
    bn.params["scale"][:] = rng.uniform(0.5, 2, 3)
    x = rng.normal(size=(6, 3, 5))
    up = rng.normal(size=x.shape)

    def f():
        return float(np.sum(bn.forward(x, training=True) * up))

    f()
    gx = bn.backward(up)
    np.testing.assert_allclose(gx, _num_grad(f, x), rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(bn.grads["scale"], _num_grad(f, bn.params["scale"]), rtol=1e-6, atol=1e-8)
