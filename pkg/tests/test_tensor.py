"""Tensor engine: forward oracles, backward rules, finite-difference checks."""

import numpy as np
import pytest

from cascadeseg import tensor as T
from cascadeseg.errors import ShapeError


def t64(data):
    return T.Tensor(np.asarray(data, dtype=np.float64))


def rand(shape, seed, lo=-1.0, hi=1.0):
    return T.Tensor(np.random.default_rng(seed).uniform(lo, hi, shape))


# ---------------------------------------------------------------------------
# construction


def test_tensor_requires_rank_4():
    with pytest.raises(ShapeError):
        T.Tensor(np.zeros((2, 3)))


def test_tensor_rejects_empty_dim():
    with pytest.raises(ShapeError):
        T.Tensor(np.zeros((1, 0, 2, 2)))


def test_tensor_helper_pads_rank():
    t = T.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.shape == (1, 1, 2, 2)


def test_scalar_helper():
    s = T.scalar(3.5)
    assert s.shape == (1, 1, 1, 1)
    assert s.item() == pytest.approx(3.5)


# ---------------------------------------------------------------------------
# conv2d forward


def conv2d_oracle(x, w, b, padding):
    """Dot-product-per-window reference, plain loops."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ph, pw = (kh // 2, kw // 2) if padding == "same" else (0, 0)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    oh, ow = h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1
    out = np.zeros((n, cout, oh, ow))
    for ni in range(n):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    win = xp[ni, :, i : i + kh, j : j + kw]
                    out[ni, co, i, j] = np.sum(win * w[co]) + b[0, co, 0, 0]
    return out


def test_conv2d_all_ones_kernel_sums_padded_windows():
    x = t64([[[[1.0, 2.0], [3.0, 4.0]]]])
    w = t64(np.ones((1, 1, 3, 3)))
    b = t64(np.zeros((1, 1, 1, 1)))
    y = T.conv2d(x, w, b, padding="same")
    # every 3x3 window covers all four cells
    np.testing.assert_allclose(y.data[0, 0], [[10.0, 10.0], [10.0, 10.0]])


def test_conv2d_identity_1x1_kernel():
    x = rand((2, 1, 5, 5), seed=1)
    w = t64(np.ones((1, 1, 1, 1)))
    b = t64(np.zeros((1, 1, 1, 1)))
    y = T.conv2d(x, w, b, padding="same")
    np.testing.assert_array_equal(y.data, x.data)


def test_conv2d_zero_input_gives_bias():
    x = t64(np.zeros((1, 1, 3, 3)))
    w = rand((4, 1, 3, 3), seed=2)
    b = t64(np.full((1, 4, 1, 1), 0.75))
    y = T.conv2d(x, w, b, padding="same")
    np.testing.assert_allclose(y.data, 0.75)


@pytest.mark.parametrize("padding", ["same", "valid"])
@pytest.mark.parametrize("k", [1, 3])
def test_conv2d_matches_loop_oracle(padding, k):
    x = rand((2, 3, 6, 5), seed=10)
    w = rand((4, 3, k, k), seed=11)
    b = rand((1, 4, 1, 1), seed=12)
    y = T.conv2d(x, w, b, padding=padding)
    np.testing.assert_allclose(y.data, conv2d_oracle(x.data, w.data, b.data, padding),
                               rtol=1e-12, atol=1e-12)


def test_conv2d_same_preserves_spatial_dims():
    x = rand((1, 2, 7, 9), seed=3)
    for k in (1, 3):
        w = rand((2, 2, k, k), seed=4)
        b = rand((1, 2, 1, 1), seed=5)
        assert T.conv2d(x, w, b, padding="same").shape == (1, 2, 7, 9)


def test_conv2d_rejects_channel_mismatch():
    x = rand((1, 3, 4, 4), seed=6)
    w = rand((2, 4, 3, 3), seed=7)
    b = rand((1, 2, 1, 1), seed=8)
    with pytest.raises(ShapeError):
        T.conv2d(x, w, b)


def test_conv2d_rejects_unsupported_kernel():
    x = rand((1, 1, 8, 8), seed=9)
    w = rand((1, 1, 5, 5), seed=10)
    b = rand((1, 1, 1, 1), seed=11)
    with pytest.raises(ShapeError):
        T.conv2d(x, w, b)


# ---------------------------------------------------------------------------
# maxpool2x2


def test_maxpool_single_window():
    x = t64([[[[1.0, 2.0], [3.0, 4.0]]]])
    y, _ = T.maxpool2x2(x)
    np.testing.assert_array_equal(y.data, [[[[4.0]]]])


def test_maxpool_constant_input():
    x = t64(np.full((1, 2, 4, 4), 2.5))
    y, _ = T.maxpool2x2(x)
    assert y.shape == (1, 2, 2, 2)
    np.testing.assert_array_equal(y.data, 2.5)


def test_maxpool_backward_routes_to_argmax():
    x = t64([[[[5.0, 1.0], [1.0, 1.0]]]])
    y, _ = T.maxpool2x2(x)
    T.backward(T.tsum(y))
    np.testing.assert_array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])


def test_maxpool_tie_breaks_to_first_row_major():
    # all equal: the adjoint must land on the window's first element
    x = t64(np.ones((1, 1, 2, 2)))
    y, _ = T.maxpool2x2(x)
    T.backward(T.tsum(y))
    np.testing.assert_array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])


def test_maxpool_matches_loop_oracle():
    x = rand((2, 3, 6, 8), seed=20)
    y, _ = T.maxpool2x2(x)
    ref = np.zeros((2, 3, 3, 4))
    for n in range(2):
        for c in range(3):
            for i in range(3):
                for j in range(4):
                    ref[n, c, i, j] = x.data[n, c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max()
    np.testing.assert_array_equal(y.data, ref)


def test_maxpool_rejects_odd_dims():
    with pytest.raises(ShapeError):
        T.maxpool2x2(rand((1, 1, 3, 4), seed=21))


# ---------------------------------------------------------------------------
# transposed_conv2x2


def test_transposed_conv_single_pixel_scatter():
    x = t64([[[[2.0]]]])
    w = t64([[[[1.0, 2.0], [3.0, 4.0]]]])  # (cin=1, cout=1, 2, 2)
    y = T.transposed_conv2x2(x, w)
    np.testing.assert_array_equal(y.data, [[[[2.0, 4.0], [6.0, 8.0]]]])


def test_transposed_conv_zero_input():
    x = t64(np.zeros((1, 2, 3, 3)))
    w = rand((2, 4, 2, 2), seed=22)
    y = T.transposed_conv2x2(x, w)
    assert y.shape == (1, 4, 6, 6)
    np.testing.assert_array_equal(y.data, 0.0)


def test_transposed_conv_disjoint_blocks():
    x = t64([[[[1.0, 2.0], [3.0, 4.0]]]])
    w = t64(np.ones((1, 1, 2, 2)))
    y = T.transposed_conv2x2(x, w)
    expect = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=float)
    np.testing.assert_array_equal(y.data[0, 0], expect)


def test_transposed_conv_matches_scatter_oracle():
    x = rand((2, 3, 4, 5), seed=23)
    w = rand((3, 2, 2, 2), seed=24)
    y = T.transposed_conv2x2(x, w)
    ref = np.zeros((2, 2, 8, 10))
    for n in range(2):
        for ci in range(3):
            for i in range(4):
                for j in range(5):
                    ref[n, :, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2] += (
                        x.data[n, ci, i, j] * w.data[ci]
                    )
    np.testing.assert_allclose(y.data, ref, rtol=1e-12, atol=1e-12)


def test_pool_then_transposed_conv_restores_dims():
    x = rand((1, 2, 8, 6), seed=25)
    pooled, _ = T.maxpool2x2(x)
    w = rand((2, 2, 2, 2), seed=26)
    assert T.transposed_conv2x2(pooled, w).shape == (1, 2, 8, 6)


def test_transposed_conv_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        T.transposed_conv2x2(rand((1, 3, 2, 2), seed=27), rand((2, 2, 2, 2), seed=28))


# ---------------------------------------------------------------------------
# elementwise ops


def test_relu_values_and_grad():
    x = t64(np.array([-1.0, 0.0, 2.0, 5.0]).reshape(1, 1, 1, 4))
    y = T.relu(x)
    np.testing.assert_array_equal(y.data.ravel(), [0.0, 0.0, 2.0, 5.0])
    T.backward(T.tsum(y))
    # subgradient at 0 is 0
    np.testing.assert_array_equal(x.grad.ravel(), [0.0, 0.0, 1.0, 1.0])


def test_sigmoid_at_zero_and_symmetry():
    x = rand((1, 1, 3, 3), seed=30, lo=-4, hi=4)
    y = T.sigmoid(x)
    ny = T.sigmoid(T.scale(x, -1.0))
    np.testing.assert_allclose(y.data, 1.0 - ny.data, rtol=1e-12)
    assert T.sigmoid(T.scalar(0.0)).item() == pytest.approx(0.5)


def test_sigmoid_derivative_at_zero():
    x = T.Tensor(np.zeros((1, 1, 1, 1)))
    T.backward(T.tsum(T.sigmoid(x)))
    assert x.grad.ravel()[0] == pytest.approx(0.25, abs=1e-12)


def test_add_and_grad_passthrough():
    a = t64([[[[1.0, 2.0]]]])
    b = t64([[[[3.0, 4.0]]]])
    y = T.add(a, b)
    np.testing.assert_array_equal(y.data.ravel(), [4.0, 6.0])
    T.backward(T.tsum(y))
    np.testing.assert_array_equal(a.grad, np.ones((1, 1, 1, 2)))
    np.testing.assert_array_equal(b.grad, np.ones((1, 1, 1, 2)))


def test_add_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        T.add(rand((1, 1, 2, 2), seed=31), rand((1, 2, 2, 2), seed=32))


def test_concat_channels_layout_and_shape():
    a = rand((1, 2, 4, 4), seed=33)
    b = rand((1, 3, 4, 4), seed=34)
    y = T.concat_channels(a, b)
    assert y.shape == (1, 5, 4, 4)
    np.testing.assert_array_equal(y.data[:, :2], a.data)
    np.testing.assert_array_equal(y.data[:, 2:], b.data)


def test_concat_channels_backward_splits():
    a = rand((2, 2, 3, 3), seed=35)
    b = rand((2, 1, 3, 3), seed=36)
    m = rand((2, 3, 3, 3), seed=37)
    T.backward(T.tsum(T.mul(T.concat_channels(a, b), m)))
    np.testing.assert_allclose(a.grad, m.data[:, :2])
    np.testing.assert_allclose(b.grad, m.data[:, 2:])


def test_concat_rejects_spatial_mismatch():
    with pytest.raises(ShapeError):
        T.concat_channels(rand((1, 1, 4, 4), seed=38), rand((1, 1, 2, 4), seed=39))


def test_tsum_shape_and_value():
    x = rand((2, 3, 4, 4), seed=40)
    s = T.tsum(x)
    assert s.shape == (1, 1, 1, 1)
    assert s.item() == pytest.approx(float(x.data.sum()))


# ---------------------------------------------------------------------------
# backward mechanics


def test_backward_requires_scalar():
    x = rand((1, 1, 2, 2), seed=41)
    with pytest.raises(ShapeError):
        T.backward(T.relu(x))


def test_backward_sum_of_weights_is_ones():
    w = rand((1, 2, 3, 3), seed=42)
    T.backward(T.tsum(w))
    np.testing.assert_array_equal(w.grad, np.ones_like(w.data))


def test_double_use_accumulates_like_duplicated_graph():
    # loss = sum(a*b + a*c) with a used twice, vs the same loss where the
    # second use is an independent copy of a; grads must add up
    a = rand((1, 2, 3, 3), seed=43)
    b = rand((1, 2, 3, 3), seed=44)
    c = rand((1, 2, 3, 3), seed=45)
    T.backward(T.tsum(T.add(T.mul(a, b), T.mul(a, c))))
    a1 = T.Tensor(a.data.copy())
    a2 = T.Tensor(a.data.copy())
    T.backward(T.tsum(T.add(T.mul(a1, b), T.mul(a2, c))))
    np.testing.assert_allclose(a.grad, a1.grad + a2.grad, rtol=1e-12)


def test_grad_does_not_leak_between_graphs():
    x = rand((1, 1, 2, 2), seed=46)
    T.backward(T.tsum(x))
    first = x.grad.copy()
    T.zero_grads([x])
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, first)


def test_forward_outputs_finite_on_finite_inputs():
    x = rand((2, 3, 8, 8), seed=47, lo=-50, hi=50)
    w = rand((4, 3, 3, 3), seed=48)
    b = rand((1, 4, 1, 1), seed=49)
    y = T.conv2d(x, w, b)
    y = T.relu(y)
    y = T.sigmoid(y)
    pooled, _ = T.maxpool2x2(y)
    assert np.isfinite(pooled.data).all()


# ---------------------------------------------------------------------------
# finite differences


def test_grad_check_linear_op_is_machine_precision():
    a = rand((1, 2, 3, 3), seed=50)
    b = rand((1, 2, 3, 3), seed=51)
    err = T.grad_check(lambda: T.tsum(T.add(a, b)), [a, b])
    assert err < 1e-9


def test_grad_check_conv_2ch_6x6():
    x = rand((1, 2, 6, 6), seed=52)
    w = rand((2, 2, 3, 3), seed=53, lo=-0.5, hi=0.5)
    b = rand((1, 2, 1, 1), seed=54, lo=-0.2, hi=0.2)
    m = rand((1, 2, 6, 6), seed=55)
    err = T.grad_check(lambda: T.tsum(T.mul(T.conv2d(x, w, b), m)), [x, w, b])
    assert err < 1e-4


def test_grad_check_jaccard_two_pixel_case():
    t = T.Tensor(np.array([1.0, 0.0]).reshape(1, 1, 1, 2))
    p = T.Tensor(np.array([0.6, 0.2]).reshape(1, 1, 1, 2))
    from cascadeseg.losses import jaccard_distance_loss

    err = T.grad_check(lambda: jaccard_distance_loss(t, p), [p])
    assert err < 1e-4


def test_finite_difference_restores_data():
    x = rand((1, 1, 2, 2), seed=56)
    before = x.data.copy()
    T.finite_difference_grads(lambda: float(x.data.sum()), [x])
    np.testing.assert_array_equal(x.data, before)
