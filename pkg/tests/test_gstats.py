"""Estimator tests: stream reproducibility, CIs against closed forms."""

import math

import numpy as np
import pytest

from concentra import dist, gstats, norms


def spec_of(d):
    return norms.spec_from_dict(d)


def test_substream_reproducible_and_keyed():
    a = gstats.substream(42, "gauss", 0).standard_normal(16)
    b = gstats.substream(42, "gauss", 0).standard_normal(16)
    assert np.array_equal(a, b)
    c = gstats.substream(42, "gauss", 1).standard_normal(16)
    d = gstats.substream(43, "gauss", 0).standard_normal(16)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)
    # key segments are not interchangeable with each other
    e = gstats.substream(42, 0, "gauss").standard_normal(16)
    assert not np.array_equal(a, e)


def test_gaussian_batches_partition_samples():
    cfg = gstats.McConfig(samples=103, seed=5, batch=40)
    blocks = list(gstats.gaussian_batches(cfg, 7))
    assert [idx for idx, _ in blocks] == [0, 1, 2]
    assert [b.shape for _, b in blocks] == [(40, 7), (40, 7), (23, 7)]
    again = np.concatenate([b for _, b in gstats.gaussian_batches(cfg, 7)])
    assert np.array_equal(np.concatenate([b for _, b in blocks]), again)


def test_gaussian_batches_antithetic_pairing():
    cfg = gstats.McConfig(samples=64, seed=5, batch=32, antithetic=True)
    for _, block in gstats.gaussian_batches(cfg, 3):
        half = block.shape[0] // 2
        assert np.array_equal(block[half:], -block[:half])


def test_mc_config_validation():
    with pytest.raises(gstats.ConfigError):
        gstats.McConfig(samples=0, seed=1)
    with pytest.raises(gstats.ConfigError):
        gstats.McConfig(samples=100, seed=1, batch=0)
    with pytest.raises(gstats.ConfigError):
        gstats.McConfig(samples=10, seed=1, batch=11)
    with pytest.raises(gstats.ConfigError):
        gstats.McConfig(samples=100, seed=1, streams=0)


def test_estimate_within_ci_of_exact():
    cases = [
        {"family": "sup", "n": 8},
        {"family": "lp", "p": 2.0, "n": 6},
        {"family": "lp", "p": 1.0, "n": 5},
        {"family": "weighted_sup", "weights": [1.0, 2.0, 3.0]},
    ]
    cfg = gstats.McConfig(samples=20000, seed=11)
    for d in cases:
        spec = spec_of(d)
        est = gstats.estimate_profile(spec, cfg)
        ex = gstats.exact_profile(spec)
        for field in ("mean", "variance", "median", "grad_l2_sq"):
            a, b = getattr(est, field), getattr(ex, field)
            if a.half_width == 0.0:
                assert a.value == pytest.approx(b.value, rel=1e-12)
            else:
                assert abs(a.value - b.value) <= 4.0 * a.half_width, (d, field)
        assert np.all(np.abs(est.a_vec - ex.a_vec) <= 4.0 * est.a_half_width)
        assert est.provenance == "estimate"
        assert ex.provenance == "exact"


def test_half_width_shrinks_like_root_n():
    spec = spec_of({"family": "sup", "n": 16})
    hw = []
    for n in (2000, 8000, 32000):
        cfg = gstats.McConfig(samples=n, seed=2)
        hw.append(gstats.estimate_profile(spec, cfg).mean.half_width)
    # quadrupling the budget should halve the width, up to noise
    assert 0.3 <= hw[1] / hw[0] <= 0.75
    assert 0.3 <= hw[2] / hw[1] <= 0.75


def test_estimate_deterministic_across_stream_counts():
    spec = spec_of({"family": "lp", "p": 2.0, "n": 4})
    p1 = gstats.estimate_profile(spec, gstats.McConfig(samples=6000, seed=7, streams=1))
    p4 = gstats.estimate_profile(spec, gstats.McConfig(samples=6000, seed=7, streams=4))
    assert p1.mean.value == p4.mean.value
    assert p1.variance.value == p4.variance.value
    assert np.array_equal(p1.a_vec, p4.a_vec)


def test_exact_profile_against_distribution_oracles():
    n = 9
    sup = gstats.exact_profile(spec_of({"family": "sup", "n": n}))
    assert sup.mean.value == pytest.approx(dist.maxabs_mean(n), rel=1e-10)
    assert sup.variance.value == pytest.approx(dist.maxabs_var(n), rel=1e-10)
    assert sup.median.value == pytest.approx(dist.maxabs_median(n), rel=1e-10)
    # the gradient sits on a single signed coordinate, so its mass is 1
    assert sup.grad_l2_sq.value == pytest.approx(1.0, rel=1e-12)
    assert np.allclose(sup.a_vec, sup.a_vec[0])

    l2 = gstats.exact_profile(spec_of({"family": "lp", "p": 2.0, "n": 5}))
    assert l2.mean.value == pytest.approx(dist.chi_mean(5), rel=1e-10)
    assert l2.variance.value == pytest.approx(dist.chi_var(5), rel=1e-10)
    assert l2.grad_l2_sq.value == pytest.approx(1.0, rel=1e-12)

    l1 = gstats.exact_profile(spec_of({"family": "lp", "p": 1.0, "n": 4}))
    assert l1.mean.value == pytest.approx(4 * math.sqrt(2 / math.pi), rel=1e-10)
    assert l1.variance.value == pytest.approx(4 * (1 - 2 / math.pi), rel=1e-10)
    assert l1.grad_l2_sq.value == pytest.approx(4.0, rel=1e-12)

    w = np.array([1.0, 2.0, 3.0])
    ws = gstats.exact_profile(spec_of({"family": "weighted_sup", "weights": list(w)}))
    assert ws.mean.value == pytest.approx(dist.wmaxabs_mean(w), rel=1e-10)
    # a_i = w_i P(coordinate i carries the max)
    probs = dist.wmaxabs_argmax_probs(w)
    assert np.allclose(ws.a_vec, w * probs, rtol=1e-8)


def test_exact_profile_ratio_identities():
    for d in ({"family": "sup", "n": 12}, {"family": "lp", "p": 1.0, "n": 6},
              {"family": "lp", "p": 2.0, "n": 6},
              {"family": "weighted_sup", "weights": [0.5, 1.5, 2.5, 4.0]}):
        p = gstats.exact_profile(spec_of(d))
        mean, var, gsq = p.mean.value, p.variance.value, p.grad_l2_sq.value
        assert p.k == pytest.approx((mean / p.lip) ** 2, rel=1e-12)
        assert p.beta == pytest.approx(var / mean**2, rel=1e-12)
        assert p.beta_tilde == pytest.approx(gsq / mean**2, rel=1e-12)
        assert p.s == pytest.approx(var / gsq, rel=1e-12)
        assert p.big_r * p.l_ratio == pytest.approx(p.beta_tilde, rel=1e-12)
        a_mass = float(np.sum(p.a_vec**2))
        assert p.big_r == pytest.approx(gsq / a_mass, rel=1e-12)
        # Poincare: variance never exceeds expected gradient mass
        assert var <= gsq * (1 + 1e-12)


def test_exact_unavailable_families():
    poly = spec_of({"family": "polytope",
                    "functionals": {"vectors": [[1.0, 0.5], [0.2, 1.0]]}})
    with pytest.raises(gstats.ExactUnavailable):
        gstats.exact_profile(poly)
    with pytest.raises(gstats.ExactUnavailable):
        gstats.exact_profile(spec_of({"family": "lp", "p": 3.5, "n": 4}))


def test_kwapien_mean_dominates_median():
    cfg = gstats.McConfig(samples=20000, seed=3)
    for d in ({"family": "sup", "n": 32}, {"family": "lp", "p": 1.0, "n": 8}):
        res = gstats.kwapien_check(spec_of(d), cfg)
        assert res.passed
        assert res.margin.value >= -res.margin.half_width
        assert res.mean.value > res.median.value


def test_classic_bound_formula():
    p = gstats.exact_profile(spec_of({"family": "sup", "n": 8}))
    for eps in (0.2, 1.0, 2.0):
        lo = gstats.classic_bound(p, eps, side="lower")
        assert lo == pytest.approx(math.exp(-eps * eps * p.k / 2.0), rel=1e-12)
        assert gstats.classic_bound(p, eps, side="upper") == pytest.approx(lo)
        assert gstats.classic_bound(p, eps, side="two") == pytest.approx(min(1.0, 2 * lo))
    with pytest.raises(gstats.ConfigError):
        gstats.classic_bound(p, 0.2, side="sideways")
    with pytest.raises(gstats.ConfigError):
        gstats.classic_bound(p, -0.1)
