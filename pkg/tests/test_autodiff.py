import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from patternprune import autodiff as ad
from patternprune.errors import DimensionError, NumericError, StateError


def check(f, x, tol=1e-6):
    assert ad.grad_check(f, x) < tol


def test_matmul_values():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((ad.Tensor(np.eye(2)) @ ad.Tensor(m)).data, m)
    out = ad.matmul(ad.Tensor(m), ad.Tensor(np.array([[0.0], [1.0]])))
    assert np.array_equal(out.data, [[2.0], [4.0]])


def test_matmul_gradients(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    w = rng.standard_normal((3, 2))
    check(lambda t: ad.total(ad.hadamard(ad.matmul(t, ad.Tensor(b)), ad.Tensor(w))), a)
    check(lambda t: ad.total(ad.hadamard(ad.matmul(ad.Tensor(a), t), ad.Tensor(w))), b)


def test_batched_matmul_broadcasts(rng):
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((4, 5))
    w = rng.standard_normal((2, 3, 5))
    check(lambda t: ad.total(ad.hadamard(ad.matmul(ad.Tensor(a), t), ad.Tensor(w))), b)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


def test_softmax_values():
    out = ad.softmax_rows(ad.Tensor(np.ones((1, 4)))).data
    assert np.allclose(out, 0.25)
    out = ad.softmax_rows(ad.Tensor(np.array([[0.3, -1e9, -1e9]]))).data
    assert out[0, 0] == pytest.approx(1.0) and out[0, 1] < 1e-300


def test_softmax_gradient(rng):
    x, w = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    check(lambda t: ad.total(ad.hadamard(ad.softmax_rows(t), ad.Tensor(w))), x)


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_normalized(x):
    out = ad.softmax_rows(ad.Tensor(x)).data
    assert np.all(np.abs(out.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all((out >= 0) & (out <= 1))


def test_elementwise_identities(rng):
    m = rng.standard_normal((3, 3))
    assert np.array_equal(ad.hadamard(ad.Tensor(m), ad.Tensor(np.ones((3, 3)))).data, m)
    assert np.array_equal(ad.sub(ad.Tensor(m), ad.Tensor(m)).data, np.zeros((3, 3)))
    assert np.array_equal(ad.scale(ad.Tensor(m), 2.0).data, 2 * m)


def test_cross_entropy_uniform():
    for c in (2, 3, 7):
        loss = ad.cross_entropy(ad.Tensor(np.zeros((4, c))), np.array([0, 1, 0, 1]))
        assert float(loss.data) == pytest.approx(math.log(c), abs=1e-15)


def test_gelu_gradient(rng):
    x, w = rng.uniform(-3, 3, (4, 5)), rng.standard_normal((4, 5))
    assert ad.grad_check(lambda t: ad.total(ad.hadamard(ad.gelu(t), ad.Tensor(w))), x) < 1e-5


def test_layer_norm_gradients(rng):
    x = rng.standard_normal((3, 6))
    g, b = rng.standard_normal((1, 6)), rng.standard_normal((1, 6))
    w = rng.standard_normal((3, 6))

    def loss(x_, g_, b_):
        return ad.total(ad.hadamard(ad.layer_norm(x_, g_, b_), ad.Tensor(w)))

    check(lambda t: loss(t, ad.Tensor(g), ad.Tensor(b)), x)
    check(lambda t: loss(ad.Tensor(x), t, ad.Tensor(b)), g)
    check(lambda t: loss(ad.Tensor(x), ad.Tensor(g), t), b)


def test_cross_entropy_and_embed_gradients(rng):
    logits, labels = rng.standard_normal((5, 3)), np.array([0, 2, 1, 1, 0])
    check(lambda t: ad.cross_entropy(t, labels), logits)
    table, w = rng.standard_normal((6, 4)), rng.standard_normal((2, 3, 4))
    ids = np.array([[1, 1, 5], [0, 3, 1]])
    check(lambda t: ad.total(ad.hadamard(ad.embed(t, ids), ad.Tensor(w))), table)


def test_reshape_permute_gradients(rng):
    x, w = rng.standard_normal((2, 6)), rng.standard_normal((3, 2, 2))
    check(lambda t: ad.total(ad.hadamard(ad.permute(ad.reshape(t, (2, 3, 2)), (1, 0, 2)),
                                         ad.Tensor(w))), x)


def test_masked_fill_blocks_gradient(rng):
    x = rng.standard_normal((2, 4))
    keep = np.array([[True, False, True, True], [False, True, True, False]])
    leaf = ad.Tensor(x)
    ad.total(ad.masked_fill(leaf, keep, -5.0)).backward()
    assert np.array_equal(leaf.grad, keep.astype(float))


def test_straight_through_mask_passes_gradient(rng):
    w = rng.standard_normal((2, 2))
    mask = np.array([[1.0, 0.0], [0.0, 1.0]])
    leaf = ad.Tensor(w)
    out = ad.straight_through_mask(leaf, mask)
    assert np.array_equal(out.data, w * mask)
    ad.total(out).backward()
    assert np.array_equal(leaf.grad, np.ones((2, 2)))


def test_backward_linear_and_quadratic(rng):
    w = rng.standard_normal((3, 3))
    leaf = ad.Tensor(w, name="W")
    grads = ad.total(leaf).backward()
    assert np.array_equal(grads["W"], np.ones((3, 3)))
    leaf = ad.Tensor(w, name="W")
    grads = ad.scale(ad.total(ad.hadamard(leaf, leaf)), 0.5).backward()
    assert np.allclose(grads["W"], w, rtol=0, atol=1e-15)


def test_backward_rejects_non_scalar_and_repeat():
    leaf = ad.Tensor(np.ones((2, 2)))
    with pytest.raises(ValueError):
        ad.scale(leaf, 2.0).backward()
    root = ad.total(leaf)
    root.backward()
    with pytest.raises(StateError):
        root.backward()


def test_gradient_accumulates_over_shared_use():
    leaf = ad.Tensor(np.array([[2.0]]))
    ad.total(ad.add(leaf, ad.hadamard(leaf, leaf))).backward()
    assert leaf.grad[0, 0] == pytest.approx(1 + 2 * 2.0)


def test_grad_check_examples(rng):
    x = rng.standard_normal((3, 3))
    assert ad.grad_check(lambda a: float(np.sum(a)), x, grad=np.ones((3, 3))) < 1e-9
    assert ad.grad_check(lambda a: float(np.sum(a * a)), x, 1e-5, grad=2 * x) < 1e-7
    err = ad.grad_check(lambda a: float(np.sum(a * a)), x, 1e-5, grad=4 * x)
    assert err == pytest.approx(1 / 3, abs=1e-6)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_errors():
    with pytest.raises(ValueError):
        ad.grad_check(lambda a: float(np.sum(a)), np.ones(2), step=0.0, grad=np.ones(2))
    with pytest.raises(NumericError):
        ad.grad_check(lambda a: float(np.sum(np.log(a))), np.array([0.0, 1.0]), 1e-5,
                      grad=np.ones(2))


def test_forward_is_deterministic(rng):
    x = rng.standard_normal((4, 8))
    g, b = np.ones((1, 8)), np.zeros((1, 8))
    a = ad.gelu(ad.layer_norm(ad.Tensor(x), ad.Tensor(g), ad.Tensor(b))).data
    c = ad.gelu(ad.layer_norm(ad.Tensor(x), ad.Tensor(g), ad.Tensor(b))).data
    assert np.array_equal(a, c)


@given(st.integers(0, 2**32 - 1))
def test_random_op_gradients_within_tolerance(seed):
    r = np.random.default_rng(seed)
    x, w = r.uniform(-1, 1, (2, 3)), r.uniform(-1, 1, (3, 2))

    def f(t):
        h = ad.gelu(ad.matmul(t, ad.Tensor(w)))
        return ad.cross_entropy(h, np.array([0, 1]))

    assert ad.grad_check(f, x) < 1e-4
