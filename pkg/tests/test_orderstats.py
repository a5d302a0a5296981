import math

import numpy as np
import pytest
from scipy import special, stats

from mclab.noise import Family, NoiseSpec
from mclab.orderstats import (
    MAX_EXACT_WORKERS,
    MedianLawQuery,
    Method,
    asym_mass,
    expected_median,
    mc_median_summary,
    median_pdf,
    median_std,
    rate_fit,
    summarize,
    total_mass,
)
from mclab.rng import CounterStream


def _query(u, b, family="gaussian"):
    return MedianLawQuery(u, NoiseSpec(family, b))


def test_iid_density_at_zero():
    value = median_pdf(_query((0.0, 0.0, 0.0), 1.0), 0.0)
    assert value == pytest.approx(0.598413, abs=1e-6)
    assert value == pytest.approx(1.5 * stats.norm.pdf(0.0), abs=1e-12)


@pytest.mark.parametrize("size", [1, 3, 5, 9])
def test_iid_closed_form(size):
    n = (size - 1) // 2
    z = np.linspace(-5, 5, 41)
    h, H = stats.norm.pdf(z), stats.norm.cdf(z)
    closed = size * special.comb(2 * n, n) * h * H**n * (1 - H) ** n
    density = median_pdf(_query(np.zeros(size), 1.0), z)
    assert np.allclose(density, closed, rtol=0, atol=1e-10)


@pytest.mark.parametrize(
    "u, b, family",
    [
        ((0.0, 0.0, 0.0), 1.0, "gaussian"),
        ((0.0, 1.0, 5.0), 2.0, "gaussian"),
        ((-3.0, 0.5, 0.5, 2.0, 7.0), 1.5, "gaussian"),
        ((0.0, 1.0, 5.0), 2.0, "laplace"),
        ((0.0, 1.0, 5.0), 2.0, "uniform"),
        ((0.0, 0.2, 0.4, 3.0, 3.1, 3.2, 9.0), 0.7, "uniform"),
    ],
)
def test_density_normalization(u, b, family):
    assert total_mass(_query(u, b, family)) == pytest.approx(1.0, abs=1e-8)


def test_density_symmetry():
    query = _query((0.0, 0.0, 0.0), 1.3)
    z = np.linspace(0, 6, 25)
    assert np.allclose(median_pdf(query, z), median_pdf(query, -z), rtol=1e-12, atol=0)
    assert np.all(median_pdf(query, z) >= 0)


def test_scalar_and_array_evaluation():
    query = _query((0.0, 1.0, 5.0), 2.0)
    assert isinstance(median_pdf(query, 0.5), float)
    values = median_pdf(query, np.array([[0.5, 1.0], [2.0, 3.0]]))
    assert values.shape == (2, 2)
    assert values[0, 0] == pytest.approx(median_pdf(query, 0.5))


@pytest.mark.parametrize("c", [-2.0, 0.0, 3.5])
def test_constant_values_have_no_gap(c):
    summary = expected_median(_query((c, c, c), 2.0))
    assert summary.expected_median == pytest.approx(c, abs=1e-8)
    assert summary.gap == pytest.approx(0.0, abs=1e-8)
    assert summary.method is Method.EXACT_QUADRATURE


def test_noiseless_median():
    summary = expected_median(_query((0.0, 1.0, 5.0), 0.0))
    assert summary.expected_median == 1.0
    assert summary.gap == pytest.approx(-1.0)
    assert summary.variance == 0.0
    assert summary.method is Method.POINT_MASS


def test_translation_equivariance():
    base = expected_median(_query((0.0, 1.0, 5.0), 3.0))
    shifted = expected_median(_query((10.0, 11.0, 15.0), 3.0))
    assert shifted.expected_median - base.expected_median == pytest.approx(10.0, abs=1e-9)
    assert shifted.gap == pytest.approx(base.gap, abs=1e-9)


def test_scale_law():
    base = expected_median(_query((0.0, 1.0, 5.0), 3.0))
    scaled = expected_median(_query((0.0, 4.0, 20.0), 12.0))
    assert scaled.gap == pytest.approx(4.0 * base.gap, rel=1e-6)
    assert scaled.variance == pytest.approx(16.0 * base.variance, rel=1e-6)


def test_gap_decays_at_least_as_fast_as_one_over_b():
    gaps = {b: expected_median(_query((0.0, 1.0, 5.0), b)).gap for b in (32.0, 64.0)}
    assert abs(gaps[64.0]) / abs(gaps[32.0]) <= 0.6
    # the mean of u is 2, above the noiseless median
    assert gaps[32.0] < 0


def test_gap_rate():
    grid = [4.0, 8.0, 16.0, 32.0, 64.0, 128.0]
    summaries = [expected_median(_query((0.0, 1.0, 5.0), b)) for b in grid]
    gap_fit = rate_fit(grid, [abs(s.gap) for s in summaries])
    assert gap_fit.slope <= -0.85
    assert gap_fit.r_squared >= 0.98
    variance_fit = rate_fit(grid[1:], [s.variance for s in summaries[1:]])
    assert 1.9 <= variance_fit.slope <= 2.1


def test_symmetric_values_have_no_asymmetry():
    assert asym_mass(_query((-1.0, 0.0, 1.0), 2.0)) == pytest.approx(0.0, abs=1e-8)
    assert asym_mass(_query((4.0,) * 5, 1.0)) == pytest.approx(0.0, abs=1e-8)


def test_asymmetry_decay():
    values = [asym_mass(_query((0.0, 0.0, 1.0), b)) for b in (8.0, 16.0, 32.0, 64.0)]
    assert all(0.0 <= v <= 2.0 for v in values)
    assert all(later <= earlier for earlier, later in zip(values, values[1:]))
    for earlier, later in zip(values[:3], values[1:]):
        assert later / earlier <= 0.35


def test_asymmetry_of_point_mass():
    assert asym_mass(_query((-1.0, 0.0, 1.0), 0.0)) == 0.0
    assert asym_mass(_query((0.0, 0.0, 1.0), 0.0)) == 1.0


def test_summary_with_asymmetry():
    summary = expected_median(_query((0.0, 0.0, 1.0), 2.0), with_asymmetry=True)
    assert summary.asym_mass == pytest.approx(asym_mass(_query((0.0, 0.0, 1.0), 2.0)))
    as_dict = summary.to_dict()
    assert as_dict["method"] == "exact_quadrature"
    assert as_dict["gap"] == summary.gap


@pytest.mark.parametrize("family", list(Family))
def test_monte_carlo_agrees_with_quadrature(family):
    query = _query((0.0, 1.0, 5.0), 10.0, family)
    exact = expected_median(query)
    sampled = mc_median_summary(query, 10**6, CounterStream(3, ("mc", family.value)))
    assert sampled.method is Method.MONTE_CARLO
    error = abs(sampled.expected_median - exact.expected_median)
    assert error <= 4 * sampled.error_estimate
    assert abs(sampled.variance - exact.variance) <= 4 * sampled.variance_error


def test_monte_carlo_centered():
    sampled = mc_median_summary(_query((0.0, 0.0, 0.0), 1.0), 10**6, CounterStream(8))
    assert abs(sampled.expected_median) <= 4 * sampled.error_estimate


def test_monte_carlo_threads_do_not_change_result():
    query = _query((0.0, 1.0, 5.0, 6.0, 9.0), 4.0, "laplace")
    stream = CounterStream(1, ("threads",))
    single = mc_median_summary(query, 200_000, stream, threads=1)
    parallel = mc_median_summary(query, 200_000, stream, threads=4)
    assert single.expected_median == pytest.approx(parallel.expected_median, rel=1e-12)
    assert single.variance == pytest.approx(parallel.variance, rel=1e-12)


def test_large_sizes_fall_back_to_monte_carlo():
    query = _query(np.arange(MAX_EXACT_WORKERS + 2, dtype=float), 3.0)
    with pytest.raises(ValueError):
        median_pdf(query, 0.0)
    summary = summarize(query, mc_samples=20_000, stream=CounterStream(2))
    assert summary.method is Method.MONTE_CARLO
    assert summarize(_query((0.0, 1.0, 5.0), 3.0)).method is Method.EXACT_QUADRATURE


def test_median_std():
    # median of three standard normals
    assert median_std(Family.GAUSSIAN, 1) == pytest.approx(1.0, rel=1e-8)
    assert median_std(Family.GAUSSIAN, 3) == pytest.approx(math.sqrt(0.448671), rel=1e-4)


def test_rate_fit():
    xs = np.array([1.0, 2.0, 4.0, 8.0, 16.0])
    inverse = rate_fit(xs, 3.0 / xs)
    assert inverse.slope == pytest.approx(-1.0)
    assert inverse.intercept == pytest.approx(math.log(3.0))
    assert inverse.r_squared == pytest.approx(1.0)
    assert rate_fit(xs, xs**2).slope == pytest.approx(2.0)


def test_rejected_queries():
    with pytest.raises(ValueError):
        _query((0.0, 1.0), 1.0)
    with pytest.raises(ValueError):
        _query((0.0, float("nan"), 1.0), 1.0)
    with pytest.raises(ValueError):
        median_pdf(_query((0.0, 1.0, 2.0), 0.0), 0.0)
    with pytest.raises(ValueError):
        mc_median_summary(_query((0.0, 1.0, 2.0), 1.0), 10, CounterStream(0))
    with pytest.raises(ValueError):
        rate_fit([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        rate_fit([1.0, 2.0, 3.0, 4.0], [1.0, 0.0, 3.0, 4.0])
