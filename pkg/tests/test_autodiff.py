import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from densevit import autodiff as ad
from densevit.autodiff import Tensor
from densevit.contrastive import info_nce
from densevit.errors import InvalidTarget, NotScalar, ShapeMismatch

finite = st.floats(-20, 20, allow_nan=False, width=64)


def leaf(x, dtype=np.float64):
    return Tensor(x, requires_grad=True, dtype=dtype)


# -- matmul ------------------------------------------------------------------

def test_matmul_identity_and_hand_value():
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    assert np.array_equal(ad.matmul(np.eye(2, dtype=np.float32), x).data, x)
    out = ad.matmul(np.array([[1.0, 2.0]], np.float32), np.array([[3.0], [4.0]], np.float32))
    assert out.data.tolist() == [[11.0]]


def test_matmul_inner_dim_mismatch():
    with pytest.raises(ShapeMismatch):
        ad.matmul(np.ones((2, 3), np.float32), np.ones((2, 3), np.float32))


def test_matmul_grad_matches_finite_difference(rng):
    b = rng.normal(size=(4, 3))
    report = ad.grad_check(lambda a: ad.matmul(a, b).sum(), rng.normal(size=(2, 4)))
    assert report.passed, report.max_rel_err


def test_batched_matmul_broadcast_grad(rng):
    w = Tensor(rng.normal(size=(4, 5)), requires_grad=True, dtype=np.float64)
    x = rng.normal(size=(3, 2, 4))
    ad.backward((ad.matmul(x, w) ** 2).sum())
    expected = np.einsum("bij,bik->jk", x, 2 * (x @ w.data))
    np.testing.assert_allclose(w.grad, expected, rtol=1e-10)


# -- softmax and friends -------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(np.full(3, 2.5, np.float32)).data, [1 / 3] * 3, rtol=1e-6)
    np.testing.assert_allclose(ad.softmax(np.array([0.0, math.log(3)])).data, [0.25, 0.75], rtol=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=finite), st.floats(-50, 50))
def test_softmax_shift_invariant_and_normalized(x, c):
    x = x.astype(np.float64)
    p = ad.softmax(Tensor(x, dtype=np.float64)).data
    np.testing.assert_allclose(p, ad.softmax(Tensor(x + c, dtype=np.float64)).data, atol=1e-12)
    assert abs(p.sum() - 1) < 1e-12 and (p >= 0).all()


def test_log_softmax_matches_log_of_softmax(rng):
    x = rng.normal(size=(3, 5))
    np.testing.assert_allclose(ad.log_softmax(Tensor(x, dtype=np.float64)).data,
                               np.log(ad.softmax(Tensor(x, dtype=np.float64)).data), atol=1e-12)


def test_logsumexp_large_values_stay_finite():
    out = ad.logsumexp(Tensor([1000.0, 1000.0], dtype=np.float64))
    assert out.item() == pytest.approx(1000 + math.log(2))


# -- layer norm ----------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    out = ad.layer_norm(np.full((2, 5), 3.0, np.float32), np.ones(5, np.float32), np.zeros(5, np.float32))
    assert np.all(out.data == 0)


def test_layer_norm_standardizes(rng):
    x = rng.normal(3.0, 2.0, size=(4, 64))
    out = ad.layer_norm(Tensor(x, dtype=np.float64), np.ones(64), np.zeros(64)).data
    np.testing.assert_allclose(out.mean(-1), 0, atol=1e-9)
    np.testing.assert_allclose(out.var(-1), 1, atol=1e-4)


def test_layer_norm_grads_for_input_and_affine(rng):
    g, b = rng.normal(size=6), rng.normal(size=6)
    x = rng.normal(size=(3, 6))
    assert ad.grad_check(lambda t: (ad.layer_norm(t, g, b) * np.arange(6)).sum(), x).passed
    assert ad.grad_check(lambda t: (ad.layer_norm(x, t, b) ** 2).sum(), g).passed
    assert ad.grad_check(lambda t: (ad.layer_norm(x, g, t) ** 3).sum(), b).passed


# -- gelu --------------------------------------------------------------------------

def test_gelu_values():
    out = ad.gelu(Tensor([0.0, 1.0, 10.0], dtype=np.float64)).data
    assert out[0] == 0.0
    assert out[1] == pytest.approx(0.841345, abs=1e-6)
    assert out[2] == pytest.approx(10.0, abs=1e-12)


# -- l2 normalize ----------------------------------------------------------------------

def test_l2_normalize_examples():
    np.testing.assert_allclose(ad.l2_normalize(Tensor([3.0, 4.0], dtype=np.float64)).data, [0.6, 0.8])
    u = np.array([0.0, 1.0, 0.0])
    assert np.array_equal(ad.l2_normalize(Tensor(u, dtype=np.float64)).data, u)
    assert np.array_equal(ad.l2_normalize(Tensor(np.zeros(4), dtype=np.float64)).data, np.zeros(4))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_l2_normalize_rows_unit_or_zero(x):
    norms = np.linalg.norm(ad.l2_normalize(Tensor(x, dtype=np.float64)).data, axis=-1)
    for n, row in zip(norms, x):
        assert n == pytest.approx(1.0, abs=1e-9) or not np.any(np.abs(row) > 1e-6)


# -- cross entropy ---------------------------------------------------------------

def test_cross_entropy_examples():
    uniform = Tensor(np.zeros((2, 4)), dtype=np.float64)
    assert ad.cross_entropy(uniform, np.array([0, 3])).item() == pytest.approx(math.log(4))
    sharp = Tensor([[100.0, 0.0, 0.0]], dtype=np.float64)
    assert ad.cross_entropy(sharp, np.array([0])).item() == pytest.approx(0.0, abs=1e-12)
    two = Tensor([[0.0, math.log(3)]], dtype=np.float64)
    assert ad.cross_entropy(two, np.array([0])).item() == pytest.approx(math.log(4))


def test_cross_entropy_ignore_index_and_invalid_target(rng):
    logits = rng.normal(size=(1, 3, 2, 2))
    targets = np.array([[[0, 255], [2, 255]]])
    full = ad.cross_entropy(Tensor(logits, dtype=np.float64), targets).item()
    logp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    assert full == pytest.approx(-(logp[0, 0, 0, 0] + logp[0, 2, 1, 0]) / 2)
    with pytest.raises(InvalidTarget):
        ad.cross_entropy(Tensor(logits), np.array([[[0, 3], [0, 0]]]))


def test_cross_entropy_dense_grad(rng):
    targets = np.array([[[0, 1], [2, 255]]])
    assert ad.grad_check(lambda t: ad.cross_entropy(t, targets), rng.normal(size=(1, 3, 2, 2))).passed


# -- backward semantics ------------------------------------------------------------

def test_backward_sum_and_square():
    x = leaf([1.0, 2.0])
    ad.backward(x.sum())
    assert x.grad.tolist() == [1.0, 1.0]
    y = leaf([1.0, 2.0])
    ad.backward((y * y).sum())
    assert y.grad.tolist() == [2.0, 4.0]


def test_backward_requires_scalar():
    with pytest.raises(NotScalar):
        ad.backward(leaf([1.0, 2.0]) * 2)


def test_gradients_accumulate_over_shared_nodes():
    x = leaf([3.0])
    y = x * x + x * 2  # d/dx = 2x + 2
    ad.backward(y.sum())
    assert x.grad.tolist() == [8.0]


def test_broadcast_add_unbroadcasts(rng):
    b = leaf(np.zeros(4))
    ad.backward((ad.as_tensor(rng.normal(size=(3, 4))) + b).sum())
    assert b.grad.tolist() == [3.0] * 4


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with ad.no_grad():
        y = x * 2
    assert y.is_leaf and not y.requires_grad


def test_chained_gelu_matmul(rng):
    w = rng.normal(size=(5, 3))
    assert ad.grad_check(lambda t: ad.gelu(ad.matmul(t, w)).sum(), rng.normal(size=(2, 5))).passed


@pytest.mark.parametrize("op", [ad.exp, ad.sigmoid, ad.tabs, lambda t: ad.log(t * t + 1),
                                lambda t: ad.power(t * t + 1, 1.5), lambda t: 1.0 / (t * t + 1)])
def test_elementwise_grads(op, rng):
    assert ad.grad_check(lambda t: (op(t) * np.arange(1, 7).reshape(2, 3)).sum(),
                         rng.normal(size=(2, 3)) + 0.1).passed


def test_shape_ops_grads(rng):
    x = rng.normal(size=(2, 3, 4))
    f = lambda t: (ad.swapaxes(t.reshape(6, 4).transpose(1, 0), 0, 1)[1:, ::2] ** 2).sum()
    assert ad.grad_check(f, x).passed
    idx = np.array([0, 0, 2])
    assert ad.grad_check(lambda t: (t[idx] ** 2).sum(), rng.normal(size=(3, 2))).passed
    assert ad.grad_check(lambda t: (ad.concat([t, t * 2], axis=1) ** 2).mean(), rng.normal(size=(2, 2))).passed
    assert ad.grad_check(lambda t: (ad.broadcast_to(t, (3, 2, 2)) ** 2).sum(), rng.normal(size=(2, 2))).passed


def test_conv_transpose2d_doubles_and_grads(rng):
    w = rng.normal(size=(2, 3, 3, 3))
    x = rng.normal(size=(1, 2, 3, 3))
    assert ad.conv_transpose2d(Tensor(x, dtype=np.float64), w).shape == (1, 3, 6, 6)
    assert ad.grad_check(lambda t: (ad.conv_transpose2d(t, w) ** 2).sum(), x).passed
    assert ad.grad_check(lambda t: (ad.conv_transpose2d(x, t) ** 2).sum(), w).passed


def test_conv_transpose2d_matches_scatter_reference(rng):
    x = rng.normal(size=(1, 2, 2, 2))
    w = rng.normal(size=(2, 1, 3, 3))
    out = ad.conv_transpose2d(Tensor(x, dtype=np.float64), w).data
    # scatter each input pixel into a 6x6 canvas at stride 2, then crop padding=1
    canvas = np.zeros((1, 6, 6))
    for ci in range(2):
        for i in range(2):
            for j in range(2):
                canvas[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3] += x[0, ci, i, j] * w[ci]
    np.testing.assert_allclose(out[0], canvas[:, 1:5, 1:5], atol=1e-12)


# -- grad_check harness ------------------------------------------------------------

def test_grad_check_sum_is_exact(rng):
    assert ad.grad_check(lambda t: t.sum(), rng.normal(size=5)).max_rel_err < 1e-9


def test_grad_check_info_nce(rng):
    p, n = rng.normal(size=4), rng.normal(size=(3, 4))
    assert ad.grad_check(lambda a: info_nce(a, p, n, 0.5), rng.normal(size=4)).passed


def test_grad_check_catches_wrong_backward(rng):
    def bad_square(t):
        return ad.custom_op(t.data ** 2, (t,), lambda g: (g * t.data,)).sum()  # missing factor 2

    assert not ad.grad_check(bad_square, rng.normal(size=4) + 2).passed
