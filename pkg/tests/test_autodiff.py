import math

import numpy as np
import pytest

from cfsg import autodiff as ad
from cfsg.autodiff import (GradTape, Tensor, cosine_similarity, cross_entropy,
                           finite_difference_grad, kl_divergence, softmax)
from cfsg.errors import DimensionError, NumericError, ValidationError


def test_tensor_row_major_contiguous():
    t = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.shape == (2, 2)
    assert t.data.flags["C_CONTIGUOUS"]
    assert t.data.dtype == np.float64
    assert t.size == 4


def test_value_semantics_inputs_not_mutated():
    a = Tensor([1.0, 2.0])
    b = Tensor([3.0, 4.0])
    _ = a + b
    _ = a * b
    np.testing.assert_array_equal(a.data, [1.0, 2.0])
    np.testing.assert_array_equal(b.data, [3.0, 4.0])


def test_backward_simple_chain():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = (x * x).sum()
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(DimensionError):
        ad.backward(x * x)


def test_matmul_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))

    at = Tensor(a, requires_grad=True)
    bt = Tensor(b, requires_grad=True)
    loss = ((at @ bt) * (at @ bt)).sum()
    ad.backward(loss)

    fd_a = finite_difference_grad(lambda t: ((t @ Tensor(b)) * (t @ Tensor(b))).sum(), Tensor(a))
    fd_b = finite_difference_grad(lambda t: ((Tensor(a) @ t) * (Tensor(a) @ t)).sum(), Tensor(b))
    np.testing.assert_allclose(at.grad, fd_a, atol=1e-7)
    np.testing.assert_allclose(bt.grad, fd_b, atol=1e-7)


def test_batched_matmul_and_slicing_gradients():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(2, 3, 4))

    def build(t):
        sliced = t[:, 0:2, :]
        return (sliced @ sliced.transpose(-1, -2)).sum()

    at = Tensor(a, requires_grad=True)
    ad.backward(build(at))
    fd = finite_difference_grad(lambda t: build(t), Tensor(a))
    np.testing.assert_allclose(at.grad, fd, atol=1e-6)


def test_identical_forward_passes_give_bit_identical_gradients():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(4, 3))
    x = rng.normal(size=(5, 4))

    def grads():
        wt = Tensor(w, requires_grad=True)
        loss = ad.relu(Tensor(x) @ wt).sum()
        ad.backward(loss)
        return wt.grad

    g1, g2 = grads(), grads()
    assert np.array_equal(g1, g2)


def test_gradtape_zeros_for_unused_parameter():
    used = Tensor([1.0], requires_grad=True)
    unused = Tensor([[1.0, 2.0]], requires_grad=True)
    tape = GradTape([used, unused])
    tape.backward((used * 3.0).sum())
    np.testing.assert_array_equal(used.grad, [3.0])
    assert unused.grad.shape == unused.data.shape
    np.testing.assert_array_equal(unused.grad, [[0.0, 0.0]])


def test_no_grad_suppresses_graph():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert y._prev == ()


# -- softmax ----------------------------------------------------------------

def test_softmax_symmetry_two_zeros():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)


def test_softmax_constant_vector_uniform():
    for c in (-31.0, 0.0, 4.5):
        np.testing.assert_allclose(softmax(Tensor([c] * 4)).data, [0.25] * 4, atol=1e-15)


def test_softmax_closed_form_ln2():
    np.testing.assert_allclose(softmax(Tensor([math.log(2.0), 0.0])).data,
                               [2 / 3, 1 / 3], atol=1e-15)


def test_softmax_sums_to_one_and_shift_invariant():
    rng = np.random.default_rng(3)
    for _ in range(50):
        z = rng.uniform(-50, 50, size=6)
        p = softmax(Tensor(z)).data
        assert abs(p.sum() - 1.0) <= 1e-12
        np.testing.assert_allclose(p, softmax(Tensor(z + 13.7)).data, atol=1e-12)


def test_softmax_empty_raises():
    with pytest.raises(DimensionError):
        softmax(Tensor(np.zeros(0)))


# -- cross entropy ----------------------------------------------------------

def test_cross_entropy_one_hot_match_is_zero():
    assert cross_entropy(Tensor([0.0, 1.0]), Tensor([0.0, 1.0])).item() <= 1e-9


def test_cross_entropy_uniform_four_classes():
    value = cross_entropy(Tensor([1.0, 0, 0, 0]), Tensor([0.25] * 4)).item()
    assert value == pytest.approx(math.log(4.0), abs=1e-12)


def test_cross_entropy_half_half():
    value = cross_entropy(Tensor([1.0, 0.0]), Tensor([0.5, 0.5])).item()
    assert value == pytest.approx(math.log(2.0), abs=1e-12)


def test_cross_entropy_shape_mismatch():
    with pytest.raises(DimensionError):
        cross_entropy(Tensor([1.0, 0.0]), Tensor([1.0, 0.0, 0.0]))


def test_cross_entropy_rejects_unnormalized():
    with pytest.raises(ValidationError):
        cross_entropy(Tensor([1.0, 0.0]), Tensor([0.9, 0.2]))


# -- KL divergence ----------------------------------------------------------

def test_kl_identity_zero():
    rng = np.random.default_rng(4)
    for _ in range(20):
        p = rng.dirichlet(np.ones(5))
        assert abs(kl_divergence(Tensor(p), Tensor(p)).item()) <= 1e-12


def test_kl_single_surviving_term():
    value = kl_divergence(Tensor([1.0, 0.0]), Tensor([0.5, 0.5])).item()
    assert value == pytest.approx(math.log(2.0), abs=1e-9)


def test_kl_closed_form():
    value = kl_divergence(Tensor([0.5, 0.5]), Tensor([0.25, 0.75])).item()
    expected = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
    assert value == pytest.approx(expected, abs=1e-12)


def test_kl_nonnegative_for_random_pairs():
    rng = np.random.default_rng(5)
    for _ in range(50):
        p = rng.dirichlet(np.ones(4))
        q = rng.dirichlet(np.ones(4))
        assert kl_divergence(Tensor(p), Tensor(q)).item() >= -1e-12


# -- cosine similarity ------------------------------------------------------

def test_cosine_identical_vectors():
    assert cosine_similarity(Tensor([1.0, 0.0]), Tensor([1.0, 0.0])).item() == pytest.approx(1.0, abs=1e-9)


def test_cosine_orthogonal_vectors():
    assert cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == pytest.approx(0.0, abs=1e-12)


def test_cosine_45_degrees():
    # 1/sqrt(2), cross-checked against a plain dot/norm computation
    a, b = np.array([1.0, 1.0]), np.array([1.0, 0.0])
    oracle = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    value = cosine_similarity(Tensor(a), Tensor(b)).item()
    assert value == pytest.approx(0.70710678, abs=1e-8)
    assert value == pytest.approx(oracle, abs=1e-9)


def test_cosine_scaling_signs():
    rng = np.random.default_rng(6)
    for _ in range(20):
        a = rng.normal(size=5)
        c = rng.uniform(0.01, 100)
        assert cosine_similarity(Tensor(a), Tensor(c * a)).item() == pytest.approx(1.0, abs=1e-9)
        assert cosine_similarity(Tensor(a), Tensor(-c * a)).item() == pytest.approx(-1.0, abs=1e-9)


def test_cosine_bounds():
    rng = np.random.default_rng(7)
    for _ in range(100):
        v = cosine_similarity(Tensor(rng.normal(size=8)), Tensor(rng.normal(size=8))).item()
        assert -1.0 - 1e-12 <= v <= 1.0 + 1e-12


def test_cosine_shape_mismatch():
    with pytest.raises(DimensionError):
        cosine_similarity(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


# -- finite differences -----------------------------------------------------

def test_finite_difference_quadratic_exact():
    grad = finite_difference_grad(lambda t: (t * t).sum(), Tensor([1.0, 2.0]))
    np.testing.assert_allclose(grad, [2.0, 4.0], atol=1e-7)


def test_finite_difference_constant_zero():
    grad = finite_difference_grad(lambda t: Tensor(5.0), Tensor([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(grad, [0.0, 0.0, 0.0])


def test_finite_difference_softmax_ce_closed_form():
    # d/dz CE(one-hot 0, softmax(z)) = softmax(z) - y; at z = 0: [-0.5, 0.5]
    def f(t):
        return cross_entropy(Tensor([1.0, 0.0]), softmax(t))

    grad = finite_difference_grad(f, Tensor([0.0, 0.0]))
    np.testing.assert_allclose(grad, [-0.5, 0.5], atol=1e-7)


def test_finite_difference_nonfinite_raises():
    def f(t):
        with np.errstate(invalid="ignore"):
            return Tensor(float(np.log(t.data[0])))

    with pytest.raises(NumericError):
        finite_difference_grad(f, Tensor([-1.0]))
