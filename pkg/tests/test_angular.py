import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from castling.angular import (
    AngularDomainError,
    SeriesTruncation,
    angular_similarity,
    arcsin_coefficient,
    exact_similarity,
    feature_distance,
    residual_tail_bound,
    spectral_angle,
    truncated_similarity,
)
from castling.rng import SplitMix64


def factorial_coefficient(k):
    return Fraction(math.factorial(2 * k), 4**k * math.factorial(k) ** 2 * (2 * k + 1))


def test_spectral_angle_examples():
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert spectral_angle(e1, e1) == 0.0
    assert spectral_angle(e1, e2) == pytest.approx(math.pi / 2)
    assert spectral_angle(e1, -e1) == pytest.approx(math.pi)


def test_angle_clamps_rounding_above_one():
    x = np.array([0.1, 0.2, 0.3]) * 3
    assert spectral_angle(x, x * (1 + 1e-16)) == 0.0


def test_angular_similarity_examples():
    q = np.array([1.0, 0.0])
    assert angular_similarity(q, q) == 1.0
    assert angular_similarity(q, np.array([0.0, 2.0])) == pytest.approx(0.5)
    k = np.array([0.5, math.sqrt(3) / 2])
    assert angular_similarity(q, k) == pytest.approx(2 / 3, abs=1e-12)


def test_feature_distance_examples():
    x = np.array([1.0, 2.0])
    assert feature_distance(x, x) == 0.0
    assert feature_distance(x, -x) == pytest.approx(2.0)
    assert feature_distance(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(1.0)


@pytest.mark.parametrize("fn", [spectral_angle, angular_similarity, feature_distance])
def test_zero_vector_is_a_domain_error(fn):
    with pytest.raises(AngularDomainError):
        fn(np.zeros(3), np.ones(3))


def test_similarity_matches_arcsin_form_on_random_pairs():
    rng = SplitMix64(11)
    worst = 0.0
    for _ in range(10_000):
        q, k = rng.normal(8), rng.normal(8)
        q /= np.linalg.norm(q)
        k /= np.linalg.norm(k)
        t = float(np.clip(q @ k, -1, 1))
        worst = max(worst, abs(angular_similarity(q, k) - (0.5 + math.asin(t) / math.pi)))
    assert worst < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 10))
def test_pairwise_identities(seed, d):
    rng = SplitMix64(seed)
    x, y = rng.normal(d), rng.normal(d)
    assert abs(feature_distance(x, y) - 2 * (1 - angular_similarity(x, y))) < 1e-12
    for fn in (spectral_angle, angular_similarity, feature_distance):
        assert fn(x, y) == pytest.approx(fn(y, x), abs=1e-15)


def test_coefficient_examples():
    assert arcsin_coefficient(1) == pytest.approx(1 / 6, abs=1e-7)
    assert arcsin_coefficient(2) == pytest.approx(0.075, abs=1e-15)
    assert arcsin_coefficient(3) == pytest.approx(0.0446429, abs=1e-7)
    with pytest.raises(AngularDomainError):
        arcsin_coefficient(0)


def test_coefficients_match_factorial_form_and_decrease():
    coeffs = SeriesTruncation(40).coefficients
    for k, a in enumerate(coeffs, start=1):
        assert a == pytest.approx(float(factorial_coefficient(k)), rel=1e-13)
    assert all(a > b for a, b in zip(coeffs, coeffs[1:]))


def test_truncated_similarity_examples():
    assert truncated_similarity(0.5, 0) == pytest.approx(0.659155, abs=1e-6)
    assert truncated_similarity(0.5, SeriesTruncation(1)) == pytest.approx(0.665786, abs=1e-6)
    for k in range(6):
        assert truncated_similarity(0.0, k) == 0.5
    with pytest.raises(AngularDomainError):
        truncated_similarity(1.01, 2)


def test_truncation_error_spot_value():
    err = abs(2 / 3 - truncated_similarity(0.5, 1))
    assert err == pytest.approx(8.81e-4, abs=1e-6)
    assert residual_tail_bound(0.5, 1) >= err


def test_tail_bound_examples():
    assert residual_tail_bound(0.0, 3) == 0.0
    bounds = [residual_tail_bound(0.9, k) for k in range(10)]
    assert all(a >= b for a, b in zip(bounds, bounds[1:]))
    with pytest.raises(AngularDomainError):
        residual_tail_bound(1 - 1e-7, 0)


def test_error_shrinks_with_order_and_stays_under_bound():
    t = np.round(np.arange(-0.99, 0.9901, 0.01), 10)
    exact = exact_similarity(t)
    prev = None
    for k in range(9):
        err = np.abs(exact - truncated_similarity(t, k))
        assert np.all(err <= residual_tail_bound(t, k))
        if prev is not None:
            # mathematically nonincreasing; once both errors reach rounding level they may differ by an ulp
            assert np.all(err <= prev + 2 * np.finfo(float).eps)
        prev = err


def test_series_converges_to_exact():
    t = np.linspace(-0.9, 0.9, 37)
    np.testing.assert_allclose(truncated_similarity(t, 200), exact_similarity(t), atol=1e-12)
