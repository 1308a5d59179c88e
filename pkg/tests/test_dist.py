"""Closed-form distribution oracles against quadrature and MC references."""
import math

import numpy as np
import pytest
from scipy import integrate, stats

from concentra import dist


def test_norm_cdf_ppf_round_trip():
    ps = np.array([1e-12, 0.001, 0.31, 0.5, 0.77, 1 - 1e-9])
    np.testing.assert_allclose(dist.norm_cdf(dist.norm_ppf(ps)), ps,
                               rtol=1e-9)
    assert dist.norm_cdf(0.0) == 0.5


def test_maxabs_one_dimension_is_half_normal():
    assert np.isclose(dist.maxabs_mean(1), dist.HALF_NORMAL_MEAN, rtol=1e-12)
    assert np.isclose(dist.maxabs_var(1), 1.0 - 2.0 / math.pi, rtol=1e-10)
    t = 1.3
    assert np.isclose(dist.maxabs_logcdf(1, t),
                      math.log(2 * stats.norm.cdf(t) - 1), rtol=1e-12)


def test_maxabs_logcdf_is_n_fold_product():
    for n in (2, 16, 301):
        for t in (0.4, 1.1, 2.7):
            expect = n * math.log(2 * stats.norm.cdf(t) - 1)
            assert np.isclose(dist.maxabs_logcdf(n, t), expect, rtol=1e-12)


def test_maxabs_moments_against_survival_quadrature():
    for n in (4, 64):
        mean, _ = integrate.quad(
            lambda t: 1.0 - math.exp(dist.maxabs_logcdf(n, t)), 0, 12)
        assert np.isclose(dist.maxabs_mean(n), mean, rtol=1e-9)
        second, _ = integrate.quad(
            lambda t: 2 * t * (1.0 - math.exp(dist.maxabs_logcdf(n, t))),
            0, 12)
        assert np.isclose(dist.maxabs_var(n), second - mean ** 2, rtol=1e-7)


def test_maxabs_median_inverts_cdf():
    for n in (3, 100):
        med = dist.maxabs_median(n)
        assert np.isclose(dist.maxabs_logcdf(n, med), math.log(0.5),
                          rtol=1e-9)


def test_wmaxabs_reduces_to_maxabs():
    w = np.ones(7)
    assert np.isclose(dist.wmaxabs_mean(w), dist.maxabs_mean(7), rtol=1e-10)
    assert np.isclose(dist.wmaxabs_var(w), dist.maxabs_var(7), rtol=1e-8)
    assert np.isclose(dist.wmaxabs_logcdf(w, 0.9),
                      dist.maxabs_logcdf(7, 0.9), rtol=1e-12)
    assert np.isclose(dist.wmaxabs_median(w), dist.maxabs_median(7),
                      rtol=1e-9)


def test_wmaxabs_against_mc():
    w = np.array([0.5, 1.0, 2.5, 1.5])
    g = np.random.default_rng(8).standard_normal((2000000, 4))
    m = (w * np.abs(g)).max(axis=1)
    assert abs(dist.wmaxabs_mean(w) - m.mean()) < 4 * m.std() / 1414.0
    assert abs(dist.wmaxabs_var(w) - m.var()) < 0.01 * m.var()


def test_wmaxabs_argmax_probs():
    w = np.array([1.0, 3.0, 0.5])
    p = dist.wmaxabs_argmax_probs(w)
    assert np.isclose(p.sum(), 1.0, rtol=1e-9)
    assert p[1] > p[0] > p[2]
    g = np.random.default_rng(9).standard_normal((1000000, 3))
    freq = np.bincount((w * np.abs(g)).argmax(axis=1), minlength=3) / 1e6
    np.testing.assert_allclose(p, freq, atol=0.002)


def test_chi_family():
    assert np.isclose(dist.chi_mean(1), dist.HALF_NORMAL_MEAN, rtol=1e-12)
    for n in (2, 5, 40):
        assert np.isclose(dist.chi_mean(n), stats.chi.mean(n), rtol=1e-10)
        assert np.isclose(dist.chi_var(n), stats.chi.var(n), rtol=1e-10)
        assert np.isclose(dist.chi_logcdf(n, 1.7),
                          stats.chi.logcdf(1.7, n), rtol=1e-9)
        med = dist.chi_median(n)
        assert np.isclose(stats.chi.cdf(med, n), 0.5, rtol=1e-9)


def test_l1_moments_are_exact():
    for n in (1, 3, 50):
        assert np.isclose(dist.l1_mean(n), n * dist.HALF_NORMAL_MEAN,
                          rtol=1e-12)
        assert np.isclose(dist.l1_var(n), n * (1 - 2 / math.pi), rtol=1e-12)
    med = dist.l1_median(10)
    assert np.isclose(dist.l1_logcdf(10, med), math.log(0.5), atol=1e-6)


def test_l1_logcdf_n2_against_quadrature():
    # P(|x| + |y| <= t) = int phi(x) (2 Phi(t - |x|) - 1) dx over |x| <= t
    for t in (0.5, 1.5, 3.0):
        val, _ = integrate.quad(
            lambda u: 2 * stats.norm.pdf(u)
            * (2 * stats.norm.cdf(t - u) - 1), 0, t)
        assert np.isclose(dist.l1_logcdf(2, t), math.log(val), rtol=1e-8)


def test_l1_logcdf_deep_tail_scaling():
    # P(sum |g_i| <= t) ~ (t sqrt(2/pi))^n / n! for t -> 0; relative
    # accuracy must survive far below float absolute-error territory
    n, t = 8, 0.05
    approx = n * math.log(t * math.sqrt(2 / math.pi)) - math.lgamma(n + 1)
    got = dist.l1_logcdf(n, t)
    assert abs(got - approx) < 0.01 * abs(approx)


def test_domain_errors():
    with pytest.raises(ValueError):
        dist.maxabs_mean(0)
    with pytest.raises(ValueError):
        dist.chi_mean(-3)
    with pytest.raises(ValueError):
        dist.wmaxabs_mean(np.array([1.0, -2.0]))
    with pytest.raises(ValueError):
        dist.wmaxabs_median(np.array([]))
    # a nonpositive threshold is a zero-probability event, not an error
    assert dist.l1_logcdf(3, -1.0) == -np.inf
    assert dist.maxabs_logcdf(5, 0.0) == -np.inf
