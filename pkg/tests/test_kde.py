"""Kernel score estimator: hand values, symmetry, mixture equivalence."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fluxfields.densities import (
    GaussianMixture,
    equilateral_triangle_mixture,
    mixture_score,
    sample_mixture,
)
from fluxfields.errors import DegenerateEvaluationError, ShapeMismatchError
from fluxfields.kde import kde_score
from fluxfields.rng import make_generator


def test_single_point_batch_is_gaussian_score():
    batch = np.array([[1.5, -2.0]])
    x = np.array([[0.0, 0.0], [1.5, -2.0]])
    s = kde_score(batch, 0.7, x)
    assert np.allclose(s, (batch - x) / 0.49, atol=1e-14)


def test_hand_computed_two_point_value():
    # batch {0, 1} in 1-D, bandwidth 1, query 0:
    # s(0) = e^{-1/2} / (1 + e^{-1/2}) = 0.37754...
    batch = np.array([[0.0], [1.0]])
    s = kde_score(batch, 1.0, np.array([[0.0]]))
    expected = np.exp(-0.5) / (1 + np.exp(-0.5))
    assert np.isclose(s[0, 0], expected, atol=1e-12)
    assert np.isclose(s[0, 0], 0.3775406687981454, atol=1e-12)


def test_midpoint_of_symmetric_pair_has_zero_score():
    batch = np.array([[1.0, 0.5], [-1.0, -0.5]])
    s = kde_score(batch, 0.8, np.array([[0.0, 0.0]]))
    assert np.allclose(s, 0.0, atol=1e-14)


def test_matches_equal_weight_mixture_score():
    rng = make_generator(5)
    batch = rng.normal(size=(32, 3))
    x = rng.normal(size=(10, 3))
    sigma = 0.6
    gmm = GaussianMixture(np.full(32, 1 / 32), batch, sigma**2)
    assert np.allclose(kde_score(batch, sigma, x), mixture_score(gmm, x), atol=1e-10)


@given(st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=30, deadline=None)
def test_translation_equivariance(dx, dy):
    rng = np.random.default_rng(77)
    batch = rng.normal(size=(12, 2))
    x = rng.normal(size=(5, 2))
    shift = np.array([dx, dy])
    a = kde_score(batch, 0.9, x)
    b = kde_score(batch + shift, 0.9, x + shift)
    assert np.allclose(a, b, atol=1e-9)


def test_batch_score_consistency_under_batch_growth():
    # with growing batches from the target, the estimate at a fixed query
    # approaches the noised-target score (bandwidth fixed)
    target = equilateral_triangle_mixture()
    sigma = 0.5
    from fluxfields.densities import noised_mixture

    limit = mixture_score(noised_mixture(target, sigma), np.array([[0.5, 0.5]]))[0]
    errs = []
    for n in (100, 1000, 10000, 100000):
        batch = sample_mixture(target, n, make_generator(31, n))
        est = kde_score(batch, sigma, np.array([[0.5, 0.5]]))[0]
        errs.append(np.linalg.norm(est - limit))
    assert errs[-1] < errs[0] * 0.3
    assert errs[-1] < 0.05


def test_underflow_guard():
    batch = np.zeros((4, 2))
    with pytest.raises(DegenerateEvaluationError):
        kde_score(batch, 0.01, np.array([[5.0, 5.0]]))


def test_shape_validation():
    with pytest.raises(ShapeMismatchError):
        kde_score(np.zeros((0, 2)), 1.0, np.zeros((1, 2)))
    with pytest.raises(ValueError):
        kde_score(np.zeros((3, 2)), 0.0, np.zeros((1, 2)))
    with pytest.raises(ShapeMismatchError):
        kde_score(np.zeros((3, 2)), 1.0, np.zeros((1, 3)))
