import math

import numpy as np
import pytest

from aflora.adapter import DecoupledAdapter, init_adapter
from aflora.linalg import random_rows, rng_for
from aflora.model import (
    DataError, ToyModel, backward, finite_difference_check, forward_loss, predict_accuracy, sgd_step,
)
from conftest import make_adapter


def random_setup(seed, gamma_choices=(0.0, 0.1, 1.0)):
    rng = rng_for(seed)
    m, n = rng.integers(2, 6), rng.integers(2, 6)
    r = int(rng.integers(1, min(m, n) + 1))
    mask = rng.integers(0, 2, r)
    mask[rng.integers(r)] = 1
    model = ToyModel(rng.standard_normal((m, n)))
    ad = make_adapter(rng, m, n, r, mask=mask)
    x = rng.standard_normal((int(rng.integers(1, 8)), n))
    y = rng.integers(0, m, len(x))
    gamma = float(gamma_choices[seed % len(gamma_choices)])
    return model, ad, (x, y), gamma


def test_uniform_logits_cross_entropy():
    model = ToyModel(np.zeros((2, 3)))
    ad = init_adapter(random_rows(np.random.default_rng(0), 2, 3, 1.0), 2, [1, 1], 1.0)
    batch = (np.ones((4, 3)), np.array([0, 1, 1, 0]))
    assert forward_loss(model, ad, batch, 0.0) == pytest.approx(math.log(2), abs=1e-15)
    # B = 0 on two active dims: each contributes (0 - 1)^2
    assert forward_loss(model, ad, batch, 0.3) == pytest.approx(math.log(2) + 0.3 * 2, abs=1e-15)


def test_regularizer_off_and_satisfied(rng):
    model = ToyModel(rng.standard_normal((3, 4)))
    ad = make_adapter(rng, 3, 4, 2)
    batch = (rng.standard_normal((5, 4)), rng.integers(0, 3, 5))
    plain = forward_loss(model, ad, batch, 0.0)
    ad.b /= np.linalg.norm(ad.b, axis=0)
    ce_unit = forward_loss(model, ad, batch, 0.0)
    assert forward_loss(model, ad, batch, 1.0) == pytest.approx(ce_unit, abs=1e-14)
    assert plain != ce_unit


def test_regularizer_ignores_pruned_dims(rng):
    model = ToyModel(np.zeros((3, 4)))
    ad = make_adapter(rng, 3, 4, 3, mask=[1, 0, 1])
    ad.b[:, [0, 2]] /= np.linalg.norm(ad.b[:, [0, 2]], axis=0)
    batch = (rng.standard_normal((2, 4)), np.array([0, 1]))
    assert forward_loss(model, ad, batch, 5.0) == pytest.approx(forward_loss(model, ad, batch, 0.0), abs=1e-14)


def test_label_out_of_range():
    model = ToyModel(np.zeros((2, 2)))
    ad = init_adapter(np.eye(2), 2, [1, 1], 1.0)
    with pytest.raises(DataError):
        forward_loss(model, ad, (np.zeros((1, 2)), np.array([2])), 0.0)


def test_zero_b_fixes_lambda_gradient(rng):
    model = ToyModel(rng.standard_normal((3, 4)))
    ad = init_adapter(random_rows(rng, 2, 4, 1.0), 3, [1, 1], 1.0)
    batch = (rng.standard_normal((6, 4)), rng.integers(0, 3, 6))
    g = backward(model, ad, batch, 0.0)
    np.testing.assert_array_equal(g.grad_lambda, 0.0)
    assert g.grad_a is None


def test_zero_b_unblocks_b_gradient(rng):
    model = ToyModel(rng.standard_normal((3, 4)))
    ad = init_adapter(random_rows(rng, 2, 4, 1.0), 3, [1, 1], 1.0)
    batch = (rng.standard_normal((6, 4)), rng.integers(0, 3, 6))
    g = backward(model, ad, batch, 0.0)
    assert np.abs(g.grad_b).max() > 1e-3
    err = finite_difference_check(model, ad, batch, 0.0)
    assert err["b"] <= 1e-5


def test_server_gradient_only_fills_a(rng):
    model, ad, batch, gamma = random_setup(3)
    g = backward(model, ad, batch, gamma, wrt="server")
    assert g.grad_b is None and g.grad_lambda is None and g.grad_a.shape == ad.a_slice.shape


def test_masked_dims_have_zero_gradients(rng):
    model = ToyModel(rng.standard_normal((4, 4)))
    ad = make_adapter(rng, 4, 4, 3, mask=[1, 0, 1])
    batch = (rng.standard_normal((5, 4)), rng.integers(0, 4, 5))
    g = backward(model, ad, batch, 0.5, wrt="full")
    assert np.all(g.grad_b[:, 1] == 0) and g.grad_lambda[1] == 0 and np.all(g.grad_a[1] == 0)


@pytest.mark.parametrize("seed", range(200))
def test_gradients_match_finite_differences(seed):
    model, ad, batch, gamma = random_setup(seed)
    err = finite_difference_check(model, ad, batch, gamma, h=1e-6)
    assert max(err.values()) <= 1e-5, err


def test_training_never_touches_backbone(rng):
    model, ad, batch, gamma = random_setup(11)
    before = model.checksum()
    for _ in range(10):
        sgd_step(ad, backward(model, ad, batch, gamma, wrt="full"), 0.05)
    assert model.checksum() == before
    with pytest.raises(ValueError):
        model.w_base[0, 0] = 1.0


def test_sgd_decreases_loss_in_most_trials():
    wins = 0
    for seed in range(100):
        model, ad, batch, gamma = random_setup(seed)
        before = forward_loss(model, ad, batch, gamma)
        with np.errstate(all="ignore"):  # a quartic penalty can diverge at this step size
            for _ in range(50):
                sgd_step(ad, backward(model, ad, batch, gamma, wrt="client"), 0.05)
            wins += forward_loss(model, ad, batch, gamma) < before
    assert wins >= 95


def test_regularizer_pulls_columns_to_unit_norm():
    rng = rng_for(5)
    n, m, r = 4, 2, 3
    x = np.vstack([rng.normal(2, 0.5, (50, n)), rng.normal(-2, 0.5, (50, n))])
    y = np.r_[np.zeros(50, int), np.ones(50, int)]
    model = ToyModel(np.zeros((m, n)))
    ad = init_adapter(random_rows(rng, r, n, 1.0), m, np.ones(r, int), 1.0)
    for _ in range(5000):
        sgd_step(ad, backward(model, ad, (x, y), 0.1), 0.05)
    assert np.all(np.abs(np.linalg.norm(ad.b, axis=0) - 1.0) <= 0.1)


def test_accuracy_perfect_model(rng):
    w = rng.standard_normal((3, 4))
    x = rng.standard_normal((20, 4))
    y = np.argmax(x @ w.T, axis=1)
    assert predict_accuracy(ToyModel(w), np.zeros_like(w), (x, y)) == 1.0


def test_accuracy_ties_go_to_class_zero():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((10000, 3))
    y = rng.integers(0, 4, 10000)
    acc = predict_accuracy(ToyModel(np.zeros((4, 3))), np.zeros((4, 3)), (x, y))
    assert acc == pytest.approx(np.mean(y == 0))
    assert abs(acc - 0.25) <= 0.05


def test_accuracy_singleton_and_empty():
    model = ToyModel(np.eye(2))
    assert predict_accuracy(model, np.zeros((2, 2)), (np.array([[0.0, 1.0]]), np.array([1]))) == 1.0
    with pytest.raises(DataError):
        predict_accuracy(model, np.zeros((2, 2)), (np.zeros((0, 2)), np.zeros(0, int)))
