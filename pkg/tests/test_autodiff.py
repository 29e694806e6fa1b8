import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import avg_pool_loops, conv2d_loops
from ssrde.autodiff import Tensor, backward, finite_diff_check, no_grad, ops, parameter
from ssrde.gradsuite import op_cases, run_op_suite

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


# --- conv2d -----------------------------------------------------------------

def test_conv_1x1_identity(rng):
    x = rng.normal(size=(2, 3, 5, 4))
    w = np.eye(3).reshape(3, 3, 1, 1)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
    assert np.array_equal(out.data, x)


def test_conv_box_reflect_constant():
    x = np.full((1, 1, 6, 7), 7.0)
    w = np.full((1, 1, 3, 3), 1 / 9)
    out = ops.conv2d(Tensor(x), Tensor(w), padding=1, padding_mode="reflect")
    np.testing.assert_allclose(out.data, 7.0, atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv_matches_loops(rng, stride, pad):
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, conv2d_loops(x, w, b, stride, pad), atol=1e-10, rtol=0)


def test_conv_output_size_formula(rng):
    for H, k, s, p in [(7, 3, 2, 1), (8, 3, 2, 1), (9, 5, 1, 2), (6, 1, 1, 0)]:
        out = ops.conv2d(Tensor(rng.normal(size=(1, 2, H, H))), Tensor(rng.normal(size=(3, 2, k, k))),
                         stride=s, padding=p)
        assert out.shape[-1] == (H + 2 * p - k) // s + 1


def test_conv_rejects_channel_mismatch(rng):
    with pytest.raises(ValueError, match="channel"):
        ops.conv2d(Tensor(rng.normal(size=(1, 2, 4, 4))), Tensor(rng.normal(size=(3, 5, 3, 3))))


# --- transposed conv -------------------------------------------------------------

def test_transposed_conv_restores_size(rng):
    x = Tensor(rng.normal(size=(1, 2, 8, 6)))
    down = ops.conv2d(x, Tensor(rng.normal(size=(3, 2, 4, 4))), stride=2, padding=1)
    up = ops.conv_transpose2d(down, Tensor(rng.normal(size=(3, 2, 4, 4))), stride=2, padding=1)
    assert up.shape == x.shape


def test_transposed_conv_1x1_identity(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    out = ops.conv_transpose2d(Tensor(x), Tensor(np.eye(3).reshape(3, 3, 1, 1)))
    assert np.array_equal(out.data, x)


# sizes with (H + 2p - k) divisible by the stride, so the transpose covers the input exactly
@pytest.mark.parametrize("stride,pad,hw", [(1, 0, (7, 6)), (2, 1, (7, 9)), (2, 0, (9, 5))])
def test_transposed_conv_is_conv_input_gradient(rng, stride, pad, hw):
    x = parameter(rng.normal(size=(2, 3) + hw))
    w = rng.normal(size=(4, 3, 3, 3))
    y = ops.conv2d(x, Tensor(w), stride=stride, padding=pad)
    g = rng.normal(size=y.shape)
    backward(ops.sum(y * Tensor(g)))
    ct = ops.conv_transpose2d(Tensor(g), Tensor(w), stride=stride, padding=pad)
    assert ct.shape == x.shape
    np.testing.assert_allclose(ct.data, x.grad, atol=1e-10)


@given(st.integers(0, 10_000), st.sampled_from([(1, 0), (1, 1), (2, 1), (2, 0)]),
       st.integers(2, 4), st.integers(2, 4))
def test_conv_adjoint_property(seed, sp, a, b):
    stride, pad = sp
    r = np.random.default_rng(seed)
    # (n + 2 pad - 3) divisible by the stride
    H, W = (stride * a + 3 - 2 * pad, stride * b + 3 - 2 * pad)
    x = r.normal(size=(1, 2, H, W))
    w = r.normal(size=(3, 2, 3, 3))
    y = ops.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data
    v = r.normal(size=y.shape)
    xt = ops.conv_transpose2d(Tensor(v), Tensor(w), stride=stride, padding=pad).data
    assert xt.shape == x.shape
    lhs = float((y * v).sum())
    rhs = float((x * xt).sum())
    assert abs(lhs - rhs) < 1e-8 * max(1.0, abs(lhs))


# --- pooling ---------------------------------------------------------------

def test_avg_pool_hand_value():
    out = ops.avg_pool(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2)
    assert out.data.item() == 2.5


def test_avg_pool_constant():
    out = ops.avg_pool(Tensor(np.full((1, 2, 6, 4), 3.25)), 2)
    assert np.array_equal(out.data, np.full((1, 2, 3, 2), 3.25))


def test_avg_pool_matches_loops(rng):
    x = rng.normal(size=(2, 3, 8, 12))
    np.testing.assert_allclose(ops.avg_pool(Tensor(x), 2).data, avg_pool_loops(x, 2), atol=1e-15)


# --- activations ------------------------------------------------------------

def test_prelu_definition():
    out = ops.prelu(Tensor(np.array([-2.0, 3.0])), 0.25)
    assert out.data.tolist() == [-0.5, 3.0]


def test_sigmoid_zero():
    assert ops.sigmoid(Tensor(np.zeros(1))).data.item() == 0.5


def test_tanh_gradient_finite_difference(rng):
    x = parameter(rng.uniform(-2, 2, size=20))
    rep = finite_diff_check(lambda: ops.sum(ops.tanh(x)), [x], tol=1e-6, eps=1e-6)
    assert rep.passed, rep.summary()


# --- softmax ------------------------------------------------------------------

def test_softmax_zero_row_uniform():
    out = ops.softmax_lastdim(Tensor(np.zeros((2, 3, 5))))
    np.testing.assert_allclose(out.data, 0.2, atol=1e-15)


def test_softmax_dominant_entry():
    row = np.zeros((1, 1, 8))
    row[0, 0, 3] = 50.0
    assert ops.softmax_lastdim(Tensor(row)).data[0, 0, 3] >= 1 - 1e-9


@given(arrays(np.float64, (3, 4, 6), elements=finite), st.floats(-100, 100))
def test_softmax_rows_and_shift_invariance(x, c):
    a = ops.softmax_lastdim(Tensor(x)).data
    b = ops.softmax_lastdim(Tensor(x + c)).data
    assert np.all(np.abs(a.sum(-1) - 1) <= 1e-6)
    np.testing.assert_allclose(a, b, atol=1e-9)


# --- pixel shuffle / space to depth ---------------------------------------------

def test_pixel_shuffle_index_map():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1)
    assert ops.pixel_shuffle(Tensor(x), 2).data.reshape(2, 2).tolist() == [[1, 2], [3, 4]]


def test_space_to_depth_index_map():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    assert ops.space_to_depth(Tensor(x), 2).data.ravel().tolist() == [1, 2, 3, 4]


def test_scale_one_identity(rng):
    x = rng.normal(size=(1, 3, 2, 2))
    assert np.array_equal(ops.pixel_shuffle(Tensor(x), 1).data, x)
    assert np.array_equal(ops.space_to_depth(Tensor(x), 1).data, x)


@given(st.integers(0, 10_000), st.sampled_from([1, 2, 3, 4]), st.integers(1, 3), st.integers(1, 3))
def test_shuffle_round_trips(seed, s, h, w):
    r = np.random.default_rng(seed)
    x = r.normal(size=(2, 2 * s * s, h, w))
    assert np.array_equal(ops.space_to_depth(ops.pixel_shuffle(Tensor(x), s), s).data, x)
    y = r.normal(size=(2, 2, h * s, w * s))
    assert np.array_equal(ops.pixel_shuffle(ops.space_to_depth(Tensor(y), s), s).data, y)


# --- epipolar matmul -----------------------------------------------------------

def test_epipolar_gram_symmetric(rng):
    A = rng.normal(size=(4, 6, 3))
    G = ops.epipolar_matmul(Tensor(A), Tensor(A.transpose(0, 2, 1))).data
    np.testing.assert_allclose(G, G.transpose(0, 2, 1), atol=1e-14)


def test_epipolar_single_row_is_matmul(rng):
    A = rng.normal(size=(1, 5, 3))
    B = rng.normal(size=(1, 3, 4))
    ref = np.zeros((5, 4))
    for i in range(5):
        for j in range(4):
            for k in range(3):
                ref[i, j] += A[0, i, k] * B[0, k, j]
    np.testing.assert_allclose(ops.epipolar_matmul(Tensor(A), Tensor(B)).data[0], ref, atol=1e-12)


def test_epipolar_zero():
    out = ops.epipolar_matmul(Tensor(np.zeros((2, 3, 4))), Tensor(np.ones((2, 4, 3))))
    assert not out.data.any()


# --- backward / finite differences ----------------------------------------------------

def test_backward_sum_gives_ones(rng):
    x = parameter(rng.normal(size=(3, 4)))
    backward(ops.sum(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_product(rng):
    x = parameter(rng.normal(size=(3, 4)))
    y = rng.normal(size=(3, 4))
    backward(ops.sum(x * Tensor(y)))
    assert np.array_equal(x.grad, y)


def test_three_layer_composite(rng):
    x = parameter(rng.normal(size=(2, 3, 6, 6)))
    w1 = parameter(rng.normal(size=(4, 3, 3, 3)) * 0.3)
    w2 = parameter(rng.normal(size=(4, 4, 3, 3)) * 0.3)
    w3 = parameter(rng.normal(size=(1, 4, 1, 1)))

    def f():
        h = ops.tanh(ops.conv2d(x, w1, padding=1))
        h = ops.sigmoid(ops.conv2d(h, w2, padding=1))
        return ops.sum(ops.conv2d(h, w3))

    rep = finite_diff_check(f, [x, w1, w2, w3], tol=1e-4, eps=1e-5)
    assert rep.passed, rep.summary()


def test_gradcheck_linear_exact(rng):
    x = parameter(rng.normal(size=10))
    a = rng.normal(size=10)
    rep = finite_diff_check(lambda: ops.sum(x * Tensor(a)), [x], tol=1e-10, eps=1e-3)
    assert rep.passed, rep.summary()


def test_gradcheck_smooth_nonlinear(rng):
    x = parameter(rng.normal(size=(3, 5)))

    def f():
        return ops.sum(ops.softmax(ops.tanh(x) + ops.sigmoid(x), axis=-1) * Tensor(np.arange(5.0)))

    assert finite_diff_check(f, [x], tol=1e-4).passed


def test_dead_branch_zero_gradient(rng):
    x = parameter(rng.normal(size=4))
    dead = parameter(rng.normal(size=4))
    _ = dead * 2.0  # computed but not part of the loss
    backward(ops.sum(x * x))
    assert dead.grad is None or not np.any(dead.grad)


def test_no_grad_builds_no_tape(rng):
    x = parameter(rng.normal(size=3))
    with no_grad():
        y = ops.exp(x)
    assert not y.requires_grad


@pytest.mark.parametrize("name", sorted(op_cases()))
def test_op_gradients(name):
    (res,) = run_op_suite(names=[name])
    assert res.report.passed, res.report.summary()


# --- no NaN/Inf from finite input -------------------------------------------------

@given(arrays(np.float64, (2, 3, 4), elements=st.floats(-50, 50, allow_nan=False)))
def test_forward_ops_stay_finite(x):
    t = Tensor(x)
    for out in (ops.softmax(t, axis=-1), ops.sigmoid(t), ops.tanh(t), ops.relu(t),
                ops.prelu(t, 0.25), ops.abs(t), ops.clamp(t, -1, 1), ops.mean(t, axis=1)):
        assert np.all(np.isfinite(out.data))
