"""Position tests: balance statistics, diagonal balancing, contraction."""

import math

import numpy as np
import pytest

from concentra import dist, gstats, norms, positions


CFG = gstats.McConfig(samples=30000, seed=5)


def spec_of(d):
    return norms.spec_from_dict(d)


def test_balance_report_exchangeable_norms():
    r2 = positions.balance_report(spec_of({"family": "lp", "p": 2.0, "n": 4}), CFG)
    assert r2.dim == 4
    assert r2.spread < 0.05
    # l1 gradient is a sign vector, so E|d_i f| is exactly 1
    r1 = positions.balance_report(spec_of({"family": "lp", "p": 1.0, "n": 3}), CFG)
    assert np.allclose(r1.a_vec, 1.0, atol=1e-12)
    assert np.allclose(r1.m_vec, math.sqrt(2 / math.pi), atol=4 * r1.m_half_width.max())
    rs = positions.balance_report(spec_of({"family": "sup", "n": 6}), CFG)
    assert np.all(np.abs(rs.m_residuals) <= 4 * rs.m_half_width)


def test_balance_report_euler_identity():
    r = positions.balance_report(spec_of({"family": "sup", "n": 5}), CFG)
    # sum_i G_i d_i f = f pointwise for a norm, so the two estimators agree
    # sample by sample, not just in expectation
    assert r.grad_mass_total.value == r.mean_f.value
    assert r.m_residuals.sum() == pytest.approx(0.0, abs=1e-12)
    assert r.ell_residuals.sum() == pytest.approx(0.0, abs=1e-12)
    assert r.m_vec.sum() == pytest.approx(r.mean_f.value, rel=1e-12)


def test_balance_report_weighted_sup_against_oracle():
    w = np.array([1.0, 2.0])
    r = positions.balance_report(spec_of({"family": "weighted_sup",
                                          "weights": list(w)}), CFG)
    want = w * dist.wmaxabs_argmax_probs(w)
    assert np.all(np.abs(r.a_vec - want) <= 4 * r.a_half_width)
    assert r.a_vec[1] - r.a_vec[0] > r.a_half_width.sum()


def test_balance_report_csv():
    r = positions.balance_report(spec_of({"family": "lp", "p": 2.0, "n": 3}),
                                 gstats.McConfig(samples=2000, seed=1))
    lines = r.to_csv().splitlines()
    assert lines[0] == "i,a,a_hw,m_resid,m_hw,ell_resid,ell_hw"
    assert len(lines) == 4
    assert float(lines[1].split(",")[1]) == r.a_vec[0]


def test_w11_balanced_norm_is_identity():
    lam, iters = positions.w11_solve(spec_of({"family": "lp", "p": 2.0, "n": 5}), CFG)
    assert iters == 0
    assert np.array_equal(lam.entries, np.ones(5))
    assert lam.geometric_mean() == pytest.approx(1.0)


def test_w11_weighted_sup_inverts_weights():
    w = np.array([1.0, 2.0, 4.0])
    spec = spec_of({"family": "weighted_sup", "weights": list(w)})
    lam, iters = positions.w11_solve(spec, CFG, tol=0.02)
    assert iters <= 60
    prod = lam.entries * w
    assert np.abs(prod / prod.mean() - 1.0).max() < 0.06
    assert lam.geometric_mean() == pytest.approx(1.0, rel=1e-9)


def test_w11_invariant_under_global_scaling():
    base = spec_of({"family": "weighted_sup", "weights": [1.0, 3.0, 0.5]})
    scaled = spec_of({"family": "linear_image",
                      "matrix": (7.0 * np.eye(3)).tolist(),
                      "inner": {"family": "weighted_sup",
                                "weights": [1.0, 3.0, 0.5]}})
    lam_b, _ = positions.w11_solve(base, CFG)
    lam_s, _ = positions.w11_solve(scaled, CFG)
    assert np.allclose(lam_b.entries, lam_s.entries, rtol=1e-9)


def test_w11_mixed_sum_holds_on_fresh_block():
    spec = spec_of({"family": "direct_sum_sup",
                    "left": {"family": "lp", "p": 2.0, "n": 2},
                    "right": {"family": "sup", "n": 2}})
    lam, _ = positions.w11_solve(spec, gstats.McConfig(samples=20000, seed=5))
    x = gstats.substream(777, "fresh").standard_normal((100000, 4))
    g = spec.subgradient(x * lam.entries)
    a = lam.entries * np.abs(g).mean(axis=0)
    assert np.abs(a / a.mean() - 1.0).max() < 0.08


def test_w11_failure_carries_diagnostics():
    spec = spec_of({"family": "weighted_sup", "weights": [1.0, 50.0]})
    with pytest.raises(gstats.EstimatorError) as ei:
        positions.w11_solve(spec, gstats.McConfig(samples=2000, seed=3),
                            max_iter=2)
    assert "last_spread" in ei.value.diagnostics
    assert "lambda" in ei.value.diagnostics


def test_w11_validation():
    spec = spec_of({"family": "lp", "p": 2.0, "n": 3})
    with pytest.raises(gstats.ConfigError):
        positions.w11_solve(spec, CFG, tol=0.0)
    with pytest.raises(gstats.ConfigError):
        positions.w11_solve(spec, CFG, tol=0.7)
    with pytest.raises(gstats.ConfigError):
        positions.w11_solve(spec, CFG, max_iter=0)


def test_diagonal_map_validation():
    with pytest.raises(gstats.ConfigError):
        positions.DiagonalMap(np.array([1.0, -0.5]))
    with pytest.raises(gstats.ConfigError):
        positions.DiagonalMap(np.array([np.inf, 1.0]))
    m = positions.DiagonalMap(np.array([2.0, 0.0]))
    assert m.geometric_mean() == 0.0
    assert m.to_dict() == {"lambda": [2.0, 0.0]}


def test_contraction_noop_below_level():
    fs = norms.FunctionalSet.from_dict({"vectors": [[0.2, 0.0], [0.0, 0.2]]})
    res = positions.diagonal_contraction(fs, level=0.5)
    assert res.converged
    assert res.steps == 0
    assert np.array_equal(res.d_tilde.entries, np.ones(2))
    assert res.zero_set.size == 0
    assert res.in_terminal_range


def test_contraction_zeroes_heavy_coordinate():
    fs = norms.FunctionalSet.from_dict({"vectors": [[3.0, 0.0], [0.0, 0.2]]})
    res = positions.diagonal_contraction(fs, level=0.5)
    assert res.converged
    assert np.array_equal(res.zero_set, [0])
    assert res.d_tilde.entries[1] == 1.0
    assert res.in_terminal_range
    assert res.zero_bound_ok
    # E max(3|g1|, 0.2|g2|) is close to 3 E|g| and bounds the zero count
    assert res.mean_v == pytest.approx(3 * math.sqrt(2 / math.pi), rel=0.02)
    assert res.zero_bound == pytest.approx(2 * res.mean_v / 0.5)
    # the diagonal only ever shrinks
    assert np.all(np.diff(res.trace_d, axis=0) <= 1e-15)
    assert np.allclose(np.diff(res.trace_t), 0.02)


def test_contraction_interior_equilibrium():
    # single functional c|x|: directional mass at diagonal d is
    # d c E|g|, so the dynamics settle at level / (c E|g|)
    fs = norms.FunctionalSet.from_dict({"vectors": [[1.0]]})
    want = 0.6 / math.sqrt(2 / math.pi)
    coarse = positions.diagonal_contraction(fs, level=0.6)
    fine = positions.diagonal_contraction(fs, level=0.6, step=0.002)
    assert coarse.converged and fine.converged
    assert coarse.d_tilde.entries[0] == pytest.approx(want, abs=2e-3)
    assert abs(coarse.d_tilde.entries[0] - fine.d_tilde.entries[0]) < 1e-3


def test_contraction_accepts_norm_spec():
    spec = spec_of({"family": "sup", "n": 3})
    res = positions.diagonal_contraction(spec, level=0.005)
    assert res.converged
    assert res.zero_set.size == 3
    assert res.zero_bound_ok


def test_contraction_validation():
    fs = norms.FunctionalSet.from_dict({"vectors": [[1.0]]})
    with pytest.raises(gstats.ConfigError):
        positions.diagonal_contraction(fs, level=0.0)
    with pytest.raises(gstats.ConfigError):
        positions.diagonal_contraction(fs, level=0.5, step=0.2)
    with pytest.raises(gstats.ConfigError):
        positions.diagonal_contraction(fs, level=0.5, step=0.0)
