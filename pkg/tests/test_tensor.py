import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from saltlab import tensor as T
from saltlab.errors import ContractError, DegenerateBatchError, DimensionError, LabelError

from conftest import check_grads, weighted_sum

TOL = 1e-6


def leaf(shape, seed, low=-1.0, high=1.0):
    return T.Tensor(np.random.default_rng(seed).uniform(low, high, shape), requires_grad=True, dtype=np.float64)


def away_from_zero(shape, seed):
    """Values in +-[0.1, 1] so ReLU kinks are never within a finite-difference step."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.1, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
    return T.Tensor(x, requires_grad=True, dtype=np.float64)


def distinct(shape, seed):
    """A permutation of well-separated values, so pooling windows have unique maxima."""
    n = int(np.prod(shape))
    vals = np.random.default_rng(seed).permutation(n).reshape(shape) * 0.01
    return T.Tensor(vals, requires_grad=True, dtype=np.float64)


# --------------------------------------------------------------------------
# finite-difference oracles, one per primitive
# --------------------------------------------------------------------------

def test_grad_add_mul_scale():
    a, b = leaf((3, 4), 0), leaf((3, 4), 1)
    assert check_grads(lambda: weighted_sum(T.add(a, b)), [a, b]) < TOL
    assert check_grads(lambda: weighted_sum(T.mul(a, b)), [a, b]) < TOL
    assert check_grads(lambda: weighted_sum(T.scale(a, -2.5)), [a]) < TOL


def test_grad_sum_reshape_flatten():
    a = leaf((2, 3, 2, 2), 2)
    assert check_grads(lambda: T.tensor_sum(T.mul(a, a)), [a]) < TOL
    assert check_grads(lambda: weighted_sum(T.reshape(a, (4, 6))), [a]) < TOL
    assert check_grads(lambda: weighted_sum(T.flatten(a)), [a]) < TOL


def test_grad_masked():
    a = leaf((4, 5), 3)
    keep = np.random.default_rng(0).random((4, 5)) > 0.4
    assert check_grads(lambda: weighted_sum(T.masked(a, keep)), [a]) < TOL


def test_grad_relu():
    a = away_from_zero((3, 7), 4)
    assert check_grads(lambda: weighted_sum(T.relu(a)), [a]) < TOL


def test_grad_linear():
    x, w, b = leaf((4, 5), 5), leaf((3, 5), 6), leaf((3,), 7)
    assert check_grads(lambda: weighted_sum(T.linear(x, w, b)), [x, w, b]) < TOL


@pytest.mark.parametrize("stride,padding,k,side", [(1, 1, 3, 6), (1, 0, 3, 6), (2, 1, 3, 7), (1, 0, 1, 6), (2, 0, 2, 6)])
def test_grad_conv2d(stride, padding, k, side):
    x, w, b = leaf((2, 3, side, side), 8), leaf((4, 3, k, k), 9), leaf((4,), 10)
    build = lambda: weighted_sum(T.conv2d(x, w, b, stride=stride, padding=padding))  # noqa: E731
    assert check_grads(build, [x, w, b]) < TOL


@pytest.mark.parametrize("training", [True, False])
def test_grad_batchnorm(training):
    x, g, b = leaf((4, 3, 3, 3), 11), leaf((3,), 12, 0.5, 1.5), leaf((3,), 13)
    rm, rv = np.zeros(3), np.ones(3) * 0.7

    def build():
        return weighted_sum(T.batchnorm2d(x, g, b, rm.copy(), rv.copy(), training))

    assert check_grads(build, [x, g, b]) < TOL


def test_grad_maxpool():
    x = distinct((2, 2, 6, 6), 14)
    assert check_grads(lambda: weighted_sum(T.maxpool2d(x, 2, 2)), [x]) < TOL


def test_grad_upsample():
    x = leaf((2, 3, 3, 3), 15)
    assert check_grads(lambda: weighted_sum(T.upsample_nearest(x, 2)), [x]) < TOL


def test_grad_losses():
    logits = leaf((5, 4), 16, -3, 3)
    labels = np.array([0, 3, 1, 1, 2])
    assert check_grads(lambda: T.softmax_cross_entropy(logits, labels), [logits]) < TOL
    pred, target = leaf((3, 4), 17), np.random.default_rng(1).random((3, 4))
    assert check_grads(lambda: T.mse_loss(pred, target), [pred]) < TOL


def test_grad_shared_subexpression_accumulates():
    a = leaf((3,), 18)
    # f = sum(a*a + a) -> df/da = 2a + 1, reached through two paths
    build = lambda: T.tensor_sum(T.add(T.mul(a, a), a))  # noqa: E731
    build().backward()
    np.testing.assert_allclose(a.grad, 2 * a.data + 1, rtol=1e-12)
    assert check_grads(build, [a]) < TOL


# --------------------------------------------------------------------------
# closed forms and edge cases
# --------------------------------------------------------------------------

def test_softmax_uniform_logits_closed_form():
    loss = T.softmax_cross_entropy(T.Tensor(np.zeros((2, 4)), requires_grad=True, dtype=np.float64), [1, 2])
    assert loss.item() == pytest.approx(np.log(4), rel=1e-15)


def test_softmax_large_logits_stable():
    logits = T.Tensor(np.array([[1000.0, 0.0], [0.0, -1000.0]]), requires_grad=True, dtype=np.float64)
    loss = T.softmax_cross_entropy(logits, [0, 0])
    loss.backward()
    assert np.isfinite(loss.item()) and np.all(np.isfinite(logits.grad))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_softmax_bad_label():
    with pytest.raises(LabelError):
        T.softmax_cross_entropy(T.Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(LabelError):
        T.softmax_cross_entropy(T.Tensor(np.zeros((1, 3))), [-1])


def test_maxpool_tie_goes_to_first_element():
    x = T.Tensor(np.ones((1, 1, 2, 2)), requires_grad=True, dtype=np.float64)
    T.tensor_sum(T.maxpool2d(x)).backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_relu_zero_has_zero_gradient():
    x = T.Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True, dtype=np.float64)
    T.tensor_sum(T.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0, 0, 1])


def test_conv_known_values():
    x = T.Tensor(np.arange(9.0).reshape(1, 1, 3, 3), dtype=np.float64)
    w = T.Tensor(np.ones((1, 1, 2, 2)), dtype=np.float64)
    out = T.conv2d(x, w, T.Tensor(np.array([1.0]), dtype=np.float64))
    np.testing.assert_array_equal(out.data[0, 0], [[9, 13], [21, 25]])


def test_batchnorm_degenerate_batch():
    x = T.Tensor(np.ones((1, 2, 1, 1)))
    with pytest.raises(DegenerateBatchError):
        T.batchnorm2d(x, np.ones(2, np.float32), np.zeros(2, np.float32),
                      np.zeros(2, np.float32), np.ones(2, np.float32), training=True)


def test_batchnorm_running_stats_unbiased_ema():
    x = np.random.default_rng(0).normal(2.0, 3.0, (4, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    T.batchnorm2d(T.Tensor(x, dtype=np.float64), np.ones(2), np.zeros(2), rm, rv, training=True)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1), rtol=1e-12)


def test_shape_errors():
    with pytest.raises(DimensionError):
        T.add(T.Tensor(np.zeros(3)), T.Tensor(np.zeros(4)))
    with pytest.raises(DimensionError):
        T.conv2d(T.Tensor(np.zeros((1, 2, 4, 4))), T.Tensor(np.zeros((1, 3, 3, 3))), T.Tensor(np.zeros(1)))
    with pytest.raises(DimensionError):
        T.linear(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 5))), T.Tensor(np.zeros(4)))
    with pytest.raises(DimensionError):
        T.mse_loss(T.Tensor(np.zeros(3)), np.zeros(4))


def test_backward_requires_scalar_or_graph():
    with pytest.raises(ContractError):
        T.add(T.Tensor(np.zeros(3), requires_grad=True), T.Tensor(np.zeros(3))).backward()


def test_no_grad_records_nothing():
    a = T.Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        out = T.mul(a, a)
    assert not out.requires_grad and out.is_leaf


def test_default_dtype_is_float32():
    assert T.Tensor([1, 2, 3]).dtype == np.float32
    assert T.Tensor(np.zeros(2)).dtype == np.float64


@given(st.integers(1, 4), st.integers(1, 3), st.sampled_from([2, 4, 6]))
def test_conv_padding_preserves_spatial_size(n, c, side):
    x = T.Tensor(np.zeros((n, c, side, side)))
    out = T.conv2d(x, T.Tensor(np.zeros((5, c, 3, 3))), T.Tensor(np.zeros(5)), padding=1)
    assert out.shape == (n, 5, side, side)


@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=2, max_size=8))
def test_softmax_loss_non_negative(row):
    logits = np.array([row], dtype=np.float64)
    assert T.softmax_cross_entropy(T.Tensor(logits), [0]).item() >= 0.0
