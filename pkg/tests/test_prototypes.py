import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from poer.exceptions import InvalidArgumentError
from poer.prototypes import (
    class_probabilities, classification_loss, classification_loss_and_grads, init_prototypes,
    min_class_distance, predict, predict_batch, prototype_distances, total_loss,
)


def test_distance_to_own_prototype_is_zero():
    bank = np.random.default_rng(0).standard_normal((4, 3, 5))
    assert prototype_distances(bank[2, 0], bank)[2, 0] == 0.0


def test_distance_three_four_five():
    np.testing.assert_array_equal(prototype_distances([0.0, 0.0], [[[3.0, 4.0]]]), [[5.0]])


def test_distances_match_entrywise_oracle():
    rng = np.random.default_rng(1)
    bank, f = rng.standard_normal((3, 2, 4)), rng.standard_normal(4)
    got = prototype_distances(f, bank)
    for i in range(3):
        for j in range(2):
            assert got[i, j] == pytest.approx(oracles.distance(f, bank[i, j]), rel=1e-14)


def test_dimension_mismatch():
    with pytest.raises(InvalidArgumentError):
        prototype_distances([1.0, 2.0, 3.0], np.zeros((2, 1, 2)))


def test_min_class_distance_examples():
    col = np.array([[1.0], [4.0]])
    d, idx = min_class_distance(col)
    np.testing.assert_array_equal(d, [1.0, 4.0])
    d, idx = min_class_distance([[3.0, 1.0, 2.0], [2.0, 2.0, 5.0]])
    np.testing.assert_array_equal(d, [1.0, 2.0])
    np.testing.assert_array_equal(idx, [1, 0])
    with pytest.raises(InvalidArgumentError):
        min_class_distance(np.zeros((0, 0)))


def test_probability_examples():
    np.testing.assert_allclose(class_probabilities([2.0, 2.0, 2.0, 2.0]), 0.25, rtol=1e-15)
    np.testing.assert_allclose(class_probabilities([0.0, math.log(3.0)]), [0.75, 0.25], rtol=1e-14)
    with pytest.raises(InvalidArgumentError):
        class_probabilities([0.0, np.inf])


@settings(max_examples=100)
@given(arrays(np.float64, st.integers(2, 10), elements=st.floats(0, 1e4)), st.floats(-100, 100))
def test_probabilities_normalized_and_shift_invariant(d, c):
    p = class_probabilities(d)
    assert abs(p.sum() - 1.0) <= 1e-9
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(class_probabilities(d + c), p, atol=1e-12)


def test_classification_loss_examples():
    assert classification_loss([0.0, 1.0, 0.0], 1) == 0.0
    assert classification_loss(np.full(5, 0.2), 3) == pytest.approx(math.log(5))
    assert classification_loss([1.0, 0.0], 1) == pytest.approx(-math.log(1e-300))
    rng = np.random.default_rng(4)
    p = rng.dirichlet(np.ones(6))
    assert classification_loss(p, 4) == pytest.approx(-math.log(p[4]), rel=1e-15)
    with pytest.raises(InvalidArgumentError):
        classification_loss([0.5, 0.5], 2)


def test_total_loss():
    assert total_loss(1.0, 2.0, 0.1) == pytest.approx(1.2)
    assert total_loss(0.7, 5.0, 0.0) == 0.7
    assert total_loss(1.0, 3.0, 0.4) - total_loss(1.0, 3.0, 0.2) == pytest.approx(0.2 * 3.0)
    with pytest.raises(InvalidArgumentError):
        total_loss(1.0, 1.0, -0.1)


def test_predict_examples():
    bank = np.array([[[0.0, 0.0]], [[5.0, 0.0]], [[0.0, 5.0]], [[5.0, 5.0]]])
    assert predict([5.0, 5.0], bank) == 3
    ring = np.array([[[1.0, 0.0]], [[0.0, 1.0]], [[-1.0, 0.0]]])
    assert predict([0.0, 0.0], ring) == 0


@pytest.mark.parametrize("seed", range(10))
def test_predict_brute_force(seed):
    rng = np.random.default_rng(seed)
    bank, f = rng.standard_normal((5, 3, 4)), rng.standard_normal(4)
    best = min(((oracles.distance(f, bank[i, j]), i) for i in range(5) for j in range(3)))
    assert predict(f, bank) == best[1]
    assert predict_batch(f[None], bank)[0] == best[1]


def test_init_prototypes_scale():
    bank = init_prototypes(10, 3, 400, np.random.default_rng(0))
    assert bank.shape == (10, 3, 400)
    assert bank.std() == pytest.approx(1 / 20, rel=0.05)
    with pytest.raises(InvalidArgumentError):
        init_prototypes(1, 3, 4, np.random.default_rng(0))


def _mean_loss(f, y, bank):
    return np.mean([classification_loss(class_probabilities(min_class_distance(prototype_distances(r, bank))[0]), t)
                    for r, t in zip(f, y)])


def test_batch_loss_matches_single_sample_api():
    rng = np.random.default_rng(3)
    f, bank, y = rng.standard_normal((6, 4)), rng.standard_normal((3, 2, 4)), rng.integers(0, 3, 6)
    loss, *_ = classification_loss_and_grads(f, y, bank)
    assert loss == pytest.approx(_mean_loss(f, y, bank), rel=1e-13)


@pytest.mark.parametrize("seed", range(5))
def test_gradients_against_finite_differences(seed):
    rng = np.random.default_rng(20 + seed)
    f, bank, y = rng.standard_normal((5, 3)), rng.standard_normal((4, 3, 3)), rng.integers(0, 4, 5)
    loss, g_f, g_m, margin = classification_loss_and_grads(f, y, bank)
    assert margin > 1e-3
    h = 1e-6
    for arr, grad in ((f, g_f), (bank, g_m)):
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            arr[idx] += h
            up = classification_loss_and_grads(f, y, bank)[0]
            arr[idx] -= 2 * h
            dn = classification_loss_and_grads(f, y, bank)[0]
            arr[idx] += h
            num[idx] = (up - dn) / (2 * h)
        err = np.abs(grad - num) / np.maximum(np.maximum(np.abs(grad), np.abs(num)), 1e-6)
        assert err.max() < 1e-4


def test_gradient_routed_to_argmin_prototype_only():
    rng = np.random.default_rng(8)
    f, bank, y = rng.standard_normal((1, 3)), rng.standard_normal((3, 4, 3)), np.array([1])
    _, _, g_m, _ = classification_loss_and_grads(f, y, bank)
    _, idx = min_class_distance(prototype_distances(f[0], bank))
    for i in range(3):
        for j in range(4):
            assert np.any(g_m[i, j] != 0) == (j == idx[i])
