import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fedzkt import losses
from fedzkt.gradcheck import central_difference, check_losses, relative_error
from fedzkt.nn import NeuralNet, dense, tanh
from oracles import softmax_row


# softmax --------------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_array_equal(losses.softmax(np.array([[0.0, 0.0]])), [[0.5, 0.5]])
    big = losses.softmax(np.array([[1000.0, 0.0]]))
    assert np.isfinite(big).all() and big[0, 0] == pytest.approx(1.0) and big[0, 1] < 1e-300
    np.testing.assert_allclose(losses.softmax(np.array([[1.0, 2.0, 3.0]]))[0], softmax_row([1, 2, 3]), atol=1e-12)


@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(logits):
    p = losses.softmax(logits)
    assert (p >= 0).all() and (p <= 1).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


# cross-entropy ----------------------------------------------------------------

def test_cross_entropy_examples():
    assert losses.cross_entropy(np.array([[0.0, 1.0, 0.0]]), np.array([1])) == pytest.approx(0.0, abs=1e-12)
    assert losses.cross_entropy(np.full((1, 10), 0.1), np.array([3])) == pytest.approx(2.302585, abs=1e-6)
    row = np.array([[0.2, 0.5, 0.3]])
    single = losses.cross_entropy(row, np.array([2]))
    assert losses.cross_entropy(np.vstack([row, row]), np.array([2, 2])) == pytest.approx(single, abs=1e-15)


def test_cross_entropy_clamps_and_rejects_bad_labels():
    assert losses.cross_entropy(np.array([[1.0, 0.0]]), np.array([1])) == pytest.approx(-math.log(1e-12))
    with pytest.raises(ValueError):
        losses.cross_entropy(np.array([[0.5, 0.5]]), np.array([2]))
    with pytest.raises(ValueError):
        losses.cross_entropy(np.array([[0.5, 0.5]]), np.array([-1]))


# KL / SL / l1 --------------------------------------------------------------------

def test_kl_examples():
    u = np.array([[0.5, 0.5]])
    assert losses.kl_loss(u, u) == 0.0
    expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    assert losses.kl_loss(u, np.array([[0.25, 0.75]])) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.143841, abs=1e-6)


def test_kl_zero_times_log_zero_is_zero():
    assert losses.kl_loss(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]])) == 0.0


def _random_probs(rng, n, c):
    return losses.softmax(rng.normal(0, 3, size=(n, c)))


def test_kl_nonnegative_on_ten_thousand_pairs():
    rng = np.random.default_rng(0)
    u, v = _random_probs(rng, 10_000, 10), _random_probs(rng, 10_000, 10)
    per_row = [losses.kl_loss(u[i : i + 1], v[i : i + 1]) for i in range(0, 10_000)]
    assert min(per_row) >= 0.0
    assert losses.kl_loss(u, u) == pytest.approx(0.0, abs=1e-15)


def test_kl_shape_mismatch():
    with pytest.raises(ValueError):
        losses.kl_loss(np.full((1, 2), 0.5), np.full((1, 3), 1 / 3))
    with pytest.raises(ValueError):
        losses.sl_loss(np.full((2, 2), 0.5), np.full((1, 2), 0.5))


def test_sl_examples():
    assert losses.sl_loss(np.array([[0.3, 0.7]]), np.array([[0.3, 0.7]])) == 0.0
    assert losses.sl_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])) == 2.0
    assert losses.sl_loss(np.array([[0.7, 0.3]]), np.array([[0.4, 0.6]])) == pytest.approx(0.6, abs=1e-12)


def test_sl_bounded_and_symmetric_on_random_pairs():
    rng = np.random.default_rng(1)
    u, v = _random_probs(rng, 10_000, 10), _random_probs(rng, 10_000, 10)
    rows = np.abs(u - v).sum(axis=1)
    assert rows.min() >= 0 and rows.max() <= 2
    assert losses.sl_loss(u, v) == losses.sl_loss(v, u)


def test_l1_logit_examples():
    u = np.array([[3.0, 0.0]])
    devs = [np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]])]
    assert losses.l1_logit_loss(u, devs) == 2.0
    assert losses.l1_logit_loss(np.array([[1.0, 0.0]]), devs) == 0.0
    assert losses.l1_logit_loss(u + 5.0, [d + 5.0 for d in devs]) == 2.0
    with pytest.raises(ValueError):
        losses.l1_logit_loss(u, [])


# prox ------------------------------------------------------------------------------

def test_prox_examples():
    w = np.array([1.0, 2.0])
    assert losses.prox_regularizer(w, w, 1.0) == 0.0
    assert losses.prox_regularizer(np.array([1.0, 2.0]), np.zeros(2), 1.0) == 5.0
    assert losses.prox_regularizer(w, np.array([9.0, -3.0]), 0.0) == 0.0
    with pytest.raises(ValueError):
        losses.prox_regularizer(w, np.zeros(3), 1.0)


@given(arrays(np.float64, 4, elements=st.integers(-64, 64).map(float)), st.integers(-8, 8).map(float))
def test_prox_is_exactly_quadratic(d, s):
    # dyadic inputs keep every product exact in binary floating point
    base = losses.prox_regularizer(d, np.zeros(4), 0.5)
    assert losses.prox_regularizer(s * d, np.zeros(4), 0.5) == s * s * base


# gradients ---------------------------------------------------------------------

def test_training_loss_gradients_match_finite_differences():
    for r in check_losses():
        assert r.passed, r.line()


def _tiny(seed, hidden):
    return NeuralNet((3,), [dense(3, hidden), tanh(), dense(hidden, 4)]).glorot_init(seed)


@pytest.mark.parametrize("kind", losses.LOSS_KINDS)
def test_input_gradient_norm_matches_finite_differences(kind):
    rng = np.random.default_rng(5)
    student, devices = _tiny(0, 5), [_tiny(1, 3), _tiny(2, 6)]
    x = rng.standard_normal((4, 3))
    analytic = losses._input_gradient(kind, student, devices, x)

    def value():
        return losses.disagreement(kind, student.forward(x), [d.forward(x) for d in devices])[0]

    numeric = central_difference(value, x)
    assert relative_error(analytic, numeric) < 1e-3
    assert losses.input_gradient_norm(kind, student, devices, x) == pytest.approx(np.linalg.norm(numeric), rel=1e-3)


def test_input_gradient_norm_vanishes_for_a_copied_student():
    device = _tiny(3, 4)
    student = device.copy()
    x = np.random.default_rng(0).standard_normal((8, 3))
    assert losses.input_gradient_norm("sl", student, [device], x) < 1e-12


def test_per_sample_norms_match_single_sample_gradients():
    student, devices = _tiny(0, 5), [_tiny(1, 3)]
    x = np.random.default_rng(2).standard_normal((3, 3))
    norms = losses.per_sample_input_gradient_norms("kl", student, devices, x)
    for i in range(3):
        assert norms[i] == pytest.approx(losses.input_gradient_norm("kl", student, devices, x[i : i + 1]), rel=1e-12)


def test_input_gradient_rejects_incompatible_nets():
    with pytest.raises(ValueError, match="incompatible"):
        losses.input_gradient_norm("sl", _tiny(0, 3), [NeuralNet((3,), [dense(3, 5)])], np.zeros((1, 3)))


def test_unknown_kind_rejected():
    with pytest.raises(ValueError, match="unknown loss kind"):
        losses.disagreement("hinge", np.zeros((1, 2)), [np.zeros((1, 2))])


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_disagreement_zero_for_identical_models(seed):
    logits = np.random.default_rng(seed).normal(size=(3, 5))
    for kind in losses.LOSS_KINDS:
        assert losses.disagreement(kind, logits, [logits, logits])[0] == pytest.approx(0.0, abs=1e-12)
