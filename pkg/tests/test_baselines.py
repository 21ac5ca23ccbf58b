import numpy as np
import pytest
from hypothesis import given, strategies as st

from aflora.baselines import (
    HeterogeneityError, HomAdapterUpdate, classic_aggregate, flexlora_aggregate, flora_aggregate,
    flora_comm_params, hetlora_aggregate, ideal_aggregate, interference_gap,
)
from aflora.linalg import frobenius_norm, rng_for, svd


def rand_update(rng, r, m=5, n=6, count=None):
    count = int(rng.integers(1, 50)) if count is None else count
    return HomAdapterUpdate(a=rng.standard_normal((r, n)), b=rng.standard_normal((m, r)), data_count=count)


def hand_ideal(updates):
    total = sum(u.data_count for u in updates)
    out = np.zeros((updates[0].b.shape[0], updates[0].a.shape[1]))
    for u in updates:
        for i in range(out.shape[0]):
            for j in range(out.shape[1]):
                out[i, j] += u.data_count / total * sum(u.b[i, k] * u.a[k, j] for k in range(u.rank))
    return out


def test_classic_singleton_and_duplicates(rng):
    u = rand_update(rng, 3)
    a, b = classic_aggregate([u])
    np.testing.assert_allclose(a, u.a, rtol=1e-15)
    np.testing.assert_allclose(b, u.b, rtol=1e-15)
    a, b = classic_aggregate([u, u])
    assert frobenius_norm(a - u.a) <= 1e-15 and frobenius_norm(b - u.b) <= 1e-15


def test_classic_rejects_mixed_ranks(rng):
    with pytest.raises(HeterogeneityError):
        classic_aggregate([rand_update(rng, 2), rand_update(rng, 3)])


def test_classic_interferes(rng):
    us = [rand_update(rng, 3), rand_update(rng, 3)]
    a, b = classic_aggregate(us)
    assert frobenius_norm(b @ a - hand_ideal(us)) > 1e-6


def test_ideal_examples(rng):
    dw = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(ideal_aggregate([(dw, 5)]), dw)
    np.testing.assert_array_equal(ideal_aggregate([(dw, 5), (-dw, 5)]), np.zeros((3, 4)))
    us = [rand_update(rng, r) for r in (1, 2, 3)]
    got = ideal_aggregate([(u.b @ u.a, u.data_count) for u in us])
    np.testing.assert_allclose(got, hand_ideal(us), rtol=0, atol=1e-12)


def test_ideal_explicit_weights(rng):
    a, b = rng.standard_normal((2, 2)), rng.standard_normal((2, 2))
    np.testing.assert_allclose(ideal_aggregate([(a, 1), (b, 99)], weights=[0.25, 0.75]), 0.25 * a + 0.75 * b)


def test_flora_examples(rng):
    u = rand_update(rng, 3)
    assert frobenius_norm(flora_aggregate([u]) - u.b @ u.a) <= 1e-12
    us = [rand_update(rng, 2), rand_update(rng, 4)]
    assert frobenius_norm(flora_aggregate(us) - hand_ideal(us)) <= 1e-12
    assert flora_comm_params(us) == 2 * (5 + 6) + 4 * (5 + 6)


@given(seed=st.integers(0, 2**32 - 1), K=st.integers(1, 6))
def test_flora_equals_ideal(seed, K):
    rng = rng_for(seed)
    us = [rand_update(rng, int(rng.integers(1, 6))) for _ in range(K)]
    ideal = ideal_aggregate([(u.product(), u.data_count) for u in us])
    assert frobenius_norm(flora_aggregate(us) - ideal) <= 1e-12 * max(1.0, frobenius_norm(ideal))


def test_flexlora_full_rank_recovers_aggregate(rng):
    us = [rand_update(rng, 2, m=4, n=4), rand_update(rng, 3, m=4, n=4)]
    w = hand_ideal(us)
    (a, b), = flexlora_aggregate(us, [4])
    assert frobenius_norm(b @ a - w) <= 1e-8


def test_flexlora_rank_one_of_diagonal():
    u = HomAdapterUpdate(a=np.eye(2), b=np.diag([3.0, 1.0]), data_count=1)
    (a, b), = flexlora_aggregate([u], [1])
    np.testing.assert_allclose(b @ a, [[3.0, 0.0], [0.0, 0.0]], atol=1e-12)


def test_flexlora_truncation_obeys_eckart_young(rng):
    us = [rand_update(rng, 3, m=6, n=5), rand_update(rng, 4, m=6, n=5)]
    w = ideal_aggregate([(u.product(), u.data_count) for u in us])
    sigma = svd(w).sigma
    for r, (a, b) in zip(range(6), flexlora_aggregate(us, list(range(6)))):
        err = frobenius_norm(w - b @ a) ** 2
        assert err == pytest.approx(float(np.sum(sigma[r:] ** 2)), abs=1e-8)


def test_hetlora_homogeneous_equals_classic(rng):
    us = [rand_update(rng, 3) for _ in range(3)]
    for x, y in zip(hetlora_aggregate(us), classic_aggregate(us)):
        assert frobenius_norm(x - y) <= 1e-15


def test_hetlora_singleton_and_heterogeneous(rng):
    u = rand_update(rng, 2)
    a, b = hetlora_aggregate([u])
    np.testing.assert_allclose(a, u.a, rtol=1e-15)
    us = [rand_update(rng, 2), rand_update(rng, 4)]
    a, b = hetlora_aggregate(us)
    assert a.shape == (4, 6) and b.shape == (5, 4)
    assert frobenius_norm(b @ a - hand_ideal(us)) > 1e-6


def test_interference_gap_examples(rng):
    u = rand_update(rng, 3)
    assert interference_gap([u, u]) <= 1e-12
    assert interference_gap([u]) <= 1e-12
    assert interference_gap([u, rand_update(rng, 3)]) > 1e-6
    assert np.isnan(interference_gap([u, rand_update(rng, 2)]))


def test_interference_positive_on_seeded_draws():
    for seed in range(100):
        rng = rng_for(seed)
        assert interference_gap([rand_update(rng, 3) for _ in range(int(rng.integers(2, 6)))]) > 1e-6
