import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unirep import tensor as te
from unirep.errors import ConfigurationError, DimensionError, LabelError
from unirep.gradcheck import finite_difference_check, projection_objective


def test_tensor4_rejects_wrong_rank_and_empty_axes():
    with pytest.raises(DimensionError):
        te.tensor4(np.zeros((2, 2, 2)))
    with pytest.raises(DimensionError) as info:
        te.tensor4(np.zeros((2, 0, 1, 1)))
    assert info.value.axis == "W"


def test_tensor4_default_is_32_bit_and_switchable():
    assert te.tensor4(np.ones((1, 1, 1, 1))).dtype == np.float32
    with te.compute_dtype(np.float64):
        assert te.zeros4(1, 1, 1, 1).dtype == np.float64
    assert te.default_dtype() is np.float32
    with pytest.raises(ConfigurationError):
        te.set_default_dtype(np.int32)


def test_gradpair_shapes_must_agree():
    pair = te.GradPair(np.ones((2, 3)))
    assert pair.grad.shape == (2, 3) and not pair.grad.any()
    with pytest.raises(DimensionError):
        te.GradPair(np.ones((2, 3)), np.ones((3, 2)))


# --------------------------------------------------------------------------- conv


def test_conv_identity_filter_on_single_pixel():
    x = np.full((1, 1, 1, 1), 3.0, dtype=np.float32)
    w = np.ones((1, 1, 1, 1), dtype=np.float32)
    assert te.conv2d(x, w, np.zeros(1, np.float32)).ravel().tolist() == [3.0]


def test_conv_zero_filter_gives_bias(rng):
    x = rng.standard_normal((5, 5, 3, 2)).astype(np.float32)
    w = np.zeros((3, 3, 3, 4), np.float32)
    b = np.array([1.0, -2.0, 0.5, 4.0], np.float32)
    y = te.conv2d(x, w, b, 1, 1)
    assert y.shape == (5, 5, 4, 2)
    np.testing.assert_array_equal(y, np.broadcast_to(b[:, None], y.shape))


def test_conv_ones_sums_window():
    y = te.conv2d(np.ones((3, 3, 1, 1)), np.ones((3, 3, 1, 1)), np.zeros(1))
    assert y.shape == (1, 1, 1, 1) and y.item() == 9.0


def test_conv_matches_direct_loops(rng):
    x = rng.standard_normal((6, 5, 2, 3))
    w = rng.standard_normal((3, 3, 2, 4))
    b = rng.standard_normal(4)
    stride, pad = 1, 1
    y = te.conv2d(x, w, b, stride, pad)
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0), (0, 0)))
    ref = np.zeros_like(y)
    for i in range(y.shape[0]):
        for j in range(y.shape[1]):
            patch = xp[i:i + 3, j:j + 3]
            ref[i, j] = np.einsum("abct,abco->ot", patch, w) + b[:, None]
    np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(1, 3))
def test_conv_identity_1x1_is_identity(h, w, c, t):
    x = np.random.default_rng(h * 100 + w * 10 + c).standard_normal((h, w, c, t)).astype(np.float32)
    eye = np.eye(c, dtype=np.float32).reshape(1, 1, c, c)
    np.testing.assert_array_equal(te.conv2d(x, eye, np.zeros(c, np.float32)), x)


def test_conv_shape_errors_name_axis():
    x = np.zeros((4, 4, 3, 1))
    with pytest.raises(DimensionError) as info:
        te.conv2d(x, np.zeros((3, 3, 2, 1)), np.zeros(1))
    assert info.value.axis == "C"
    with pytest.raises(ConfigurationError):
        te.conv2d(x, np.zeros((3, 3, 3, 1)), np.zeros(1), stride=2, pad=0)


def test_conv_backward_shapes(rng):
    x = rng.standard_normal((5, 5, 2, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    y, cache = te.conv2d_forward(x, w, np.zeros(3), 2, 1)
    dx, dw, db = te.conv2d_backward(cache, np.ones_like(y))
    assert dx.shape == x.shape and dw.shape == w.shape and db.shape == (3,)


# --------------------------------------------------------------------------- linear


def test_linear_identity_and_bias(rng):
    x = rng.standard_normal((1, 2, 2, 3))
    y = te.linear(x, np.eye(4), np.zeros(4))
    np.testing.assert_array_equal(y.reshape(4, 3), x.reshape(4, 3))
    b = np.array([1.0, 2.0])
    y = te.linear(x, np.zeros((2, 4)), b)
    np.testing.assert_array_equal(y.reshape(2, 3), np.repeat(b[:, None], 3, axis=1))


def test_linear_hand_example():
    x = np.array([1.0, 2.0]).reshape(1, 1, 2, 1)
    y = te.linear(x, np.array([[1.0, 1.0], [1.0, -1.0]]), np.zeros(2))
    assert y.ravel().tolist() == [3.0, -1.0]


def test_linear_dim_mismatch():
    with pytest.raises(DimensionError):
        te.linear(np.zeros((1, 1, 3, 1)), np.zeros((2, 4)), np.zeros(2))


# --------------------------------------------------------------------------- relu / pooling


def test_relu_values_and_tie_gradient():
    x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 3, 1)
    y, mask = te.relu_forward(x)
    assert y.ravel().tolist() == [0.0, 0.0, 2.0]
    assert te.relu_backward(mask, np.ones_like(x)).ravel().tolist() == [0.0, 0.0, 1.0]


def test_relu_all_negative(rng):
    x = -np.abs(rng.standard_normal((2, 2, 2, 2))) - 0.1
    y, mask = te.relu_forward(x)
    assert not y.any() and not te.relu_backward(mask, np.ones_like(x)).any()


def test_global_avg_pool_values_and_backward():
    c = np.full((3, 2, 2, 2), 7.5)
    np.testing.assert_array_equal(te.global_avg_pool(c), np.full((1, 1, 2, 2), 7.5))
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1, 1)
    assert te.global_avg_pool(x).item() == 2.5
    g = te.global_avg_pool_backward(x.shape, np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(g, np.full(x.shape, 0.25))


def test_global_avg_pool_backward_sums_to_ct(rng):
    x = rng.standard_normal((4, 3, 5, 6))
    g = te.global_avg_pool_backward(x.shape, np.ones((1, 1, 5, 6)))
    assert g.sum() == pytest.approx(5 * 6)


def test_avg_pool2(rng):
    x = rng.standard_normal((4, 4, 2, 3))
    y, shape = te.avg_pool2_forward(x)
    np.testing.assert_allclose(y[1, 0], x[2:4, 0:2].mean(axis=(0, 1)))
    with pytest.raises(ConfigurationError):
        te.avg_pool2_forward(np.zeros((3, 4, 1, 1)))


# --------------------------------------------------------------------------- loss


def test_cross_entropy_uniform_two_classes():
    loss, grad = te.softmax_cross_entropy(np.zeros((1, 1, 2, 1), np.float32), np.array([0]))
    assert loss == pytest.approx(np.log(2))
    np.testing.assert_allclose(grad.ravel(), [-0.5, 0.5])


def test_cross_entropy_huge_margin_is_stable():
    z = np.array([1000.0, -1000.0], np.float32).reshape(1, 1, 2, 1)
    loss, grad = te.softmax_cross_entropy(z, np.array([0]))
    assert np.isfinite(loss) and loss == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(grad))


def test_cross_entropy_label_error_index():
    with pytest.raises(LabelError) as info:
        te.softmax_cross_entropy(np.zeros((1, 1, 3, 4)), np.array([0, 1, 3, 2]))
    assert info.value.index == 2


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(1, 5), st.floats(-50, 50))
def test_cross_entropy_shift_invariant(k, t, c):
    rng = np.random.default_rng(k * 10 + t)
    z = rng.standard_normal((1, 1, k, t))
    y = rng.integers(0, k, t)
    assert te.softmax_cross_entropy(z + c, y)[0] == pytest.approx(te.softmax_cross_entropy(z, y)[0], abs=1e-6)


def test_cross_entropy_gradient_32_bit(rng):
    z = rng.standard_normal((1, 1, 5, 3)).astype(np.float32)
    y = np.array([4, 0, 2])
    _, grad = te.softmax_cross_entropy(z, y)
    rep = finite_difference_check(lambda d: te.softmax_cross_entropy(d["z"], y)[0],
                                  {"z": z.astype(np.float64)}, {"z": grad}, h=1e-6, tol=1e-4)
    assert rep.ok, rep.line()


# --------------------------------------------------------------------------- determinism


def test_primitives_are_bitwise_deterministic(rng):
    x = rng.standard_normal((6, 6, 3, 4)).astype(np.float32)
    w = rng.standard_normal((3, 3, 3, 5)).astype(np.float32)
    b = np.zeros(5, np.float32)
    y1, c1 = te.conv2d_forward(x, w, b, 1, 1)
    y2, c2 = te.conv2d_forward(x.copy(), w.copy(), b, 1, 1)
    assert y1.tobytes() == y2.tobytes()
    g = rng.standard_normal(y1.shape).astype(np.float32)
    for a, bb in zip(te.conv2d_backward(c1, g), te.conv2d_backward(c2, g)):
        assert a.tobytes() == bb.tobytes()


def test_finite_outputs_on_finite_input(rng):
    x = rng.standard_normal((4, 4, 2, 2)).astype(np.float32) * 1e3
    y = te.conv2d(x, rng.standard_normal((3, 3, 2, 2)).astype(np.float32), np.zeros(2, np.float32), 1, 1)
    loss, g = te.softmax_cross_entropy(te.global_avg_pool(y), np.array([0, 1]))
    assert np.isfinite(loss) and np.all(np.isfinite(g))


def test_linear_check_64_bit_below_1e6(rng):
    with te.compute_dtype(np.float64):
        x = rng.standard_normal((2, 2, 2, 3))
        w = rng.standard_normal((4, 8))
        b = rng.standard_normal(4)
        r = rng.standard_normal((1, 1, 4, 3))
        _, cache = te.linear_forward(x, w, b)
        dx, dw, db = te.linear_backward(cache, r)
        f = projection_objective(lambda d: te.linear(d["x"], d["w"], d["b"]), [r])
        rep = finite_difference_check(f, {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db}, h=1e-3, tol=1e-6)
    assert rep.ok and rep.worst < 1e-6, rep.line()
