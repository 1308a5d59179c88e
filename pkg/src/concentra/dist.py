"""Closed-form and quadrature oracles for the solvable norm families.

Everything here is deterministic; log-scale CDFs are preferred because the
small-ball regime lives far below the float64 underflow line in linear scale.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import integrate, optimize, special

HALF_NORMAL_MEAN = math.sqrt(2.0 / math.pi)

__all__ = [
    "HALF_NORMAL_MEAN",
    "norm_cdf",
    "norm_ppf",
    "chi_mean",
    "chi_var",
    "chi_logcdf",
    "chi_median",
    "maxabs_logcdf",
    "maxabs_mean",
    "maxabs_var",
    "maxabs_median",
    "wmaxabs_logcdf",
    "wmaxabs_mean",
    "wmaxabs_var",
    "wmaxabs_median",
    "wmaxabs_argmax_probs",
    "l1_logcdf",
    "l1_mean",
    "l1_var",
    "l1_median",
]


def norm_cdf(t):
    return special.ndtr(t)


def norm_ppf(q):
    return special.ndtri(q)


def _check_n(n: int) -> int:
    if n < 1 or n != int(n):
        raise ValueError(f"dimension must be a positive integer, got {n}")
    return int(n)


def _check_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0 or not np.all(w > 0):
        raise ValueError("weights must be a nonempty positive vector")
    return w


# --------------------------------------------------------------------------
# euclidean norm: chi distribution with n degrees of freedom

def chi_mean(n: int) -> float:
    n = _check_n(n)
    return math.sqrt(2.0) * math.exp(special.gammaln((n + 1) / 2.0)
                                     - special.gammaln(n / 2.0))


def chi_var(n: int) -> float:
    return n - chi_mean(n) ** 2


def chi_logcdf(n: int, t: float) -> float:
    n = _check_n(n)
    if t <= 0.0:
        return -math.inf
    p = special.gammainc(n / 2.0, t * t / 2.0)
    if p > 0.0:
        return math.log(p)
    # deep tail: leading term (t^2/2)^(n/2) / Gamma(n/2 + 1)
    return (n / 2.0) * math.log(t * t / 2.0) - special.gammaln(n / 2.0 + 1.0)


def chi_median(n: int) -> float:
    n = _check_n(n)
    return math.sqrt(2.0 * special.gammaincinv(n / 2.0, 0.5))


# --------------------------------------------------------------------------
# sup norm: max_i |g_i|, CDF (2 Phi(t) - 1)^n = erf(t/sqrt(2))^n

def _log_erf(t):
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(t > 0.0, np.log(special.erf(t / math.sqrt(2.0))),
                        -np.inf)


def maxabs_logcdf(n: int, t: float) -> float:
    n = _check_n(n)
    if t <= 0.0:
        return -math.inf
    return float(n * _log_erf(t))


def maxabs_mean(n: int) -> float:
    n = _check_n(n)
    upper = math.sqrt(2.0 * math.log(2.0 * n + 2.0)) + 12.0

    def tail(t):
        return -np.expm1(n * _log_erf(t))

    val, _ = integrate.quad(tail, 0.0, upper, limit=200, epsabs=1e-12,
                            epsrel=1e-11)
    return float(val)


def maxabs_var(n: int) -> float:
    upper = math.sqrt(2.0 * math.log(2.0 * n + 2.0)) + 12.0

    def tail2(t):
        return -2.0 * t * np.expm1(n * _log_erf(t))

    m2, _ = integrate.quad(tail2, 0.0, upper, limit=200, epsabs=1e-12,
                           epsrel=1e-11)
    return float(m2 - maxabs_mean(n) ** 2)


def maxabs_median(n: int) -> float:
    n = _check_n(n)
    return math.sqrt(2.0) * special.erfinv(0.5 ** (1.0 / n))


# --------------------------------------------------------------------------
# weighted sup norm: max_i w_i |g_i|

def wmaxabs_logcdf(weights, t: float) -> float:
    w = _check_weights(weights)
    if t <= 0.0:
        return -math.inf
    return float(_log_erf(t / w).sum())


def _wmaxabs_tail_moment(weights, power: int) -> float:
    w = _check_weights(weights)
    upper = float(w.max()) * (math.sqrt(2.0 * math.log(2.0 * w.size + 2.0))
                              + 12.0)

    def tail(t):
        return power * t ** (power - 1) * -np.expm1(_log_erf(t / w).sum())

    val, _ = integrate.quad(tail, 0.0, upper, limit=200, epsabs=1e-12,
                            epsrel=1e-11)
    return float(val)


def wmaxabs_mean(weights) -> float:
    return _wmaxabs_tail_moment(weights, 1)


def wmaxabs_var(weights) -> float:
    return _wmaxabs_tail_moment(weights, 2) - wmaxabs_mean(weights) ** 2


def wmaxabs_median(weights) -> float:
    w = _check_weights(weights)
    hi = float(w.max()) * 10.0
    return float(optimize.brentq(
        lambda t: wmaxabs_logcdf(w, t) - math.log(0.5), 1e-12, hi,
        xtol=1e-13, rtol=1e-14))


def wmaxabs_argmax_probs(weights) -> np.ndarray:
    """P(argmax_i w_i |g_i| = i), one quadrature per coordinate."""
    w = _check_weights(weights)
    n = w.size
    probs = np.empty(n)
    upper = float(w.max()) * (math.sqrt(2.0 * math.log(2.0 * n + 2.0)) + 12.0)
    for i in range(n):
        others = np.delete(w, i)

        def dens(t, i=i, others=others):
            fi = (math.sqrt(2.0 / math.pi) / w[i]
                  * math.exp(-t * t / (2.0 * w[i] ** 2)))
            return fi * math.exp(float(_log_erf(t / others).sum()))

        probs[i], _ = integrate.quad(dens, 0.0, upper, limit=200,
                                     epsabs=1e-12, epsrel=1e-11)
    return probs


# --------------------------------------------------------------------------
# l1 norm: sum of folded normals via exponential tilting + convolution
#
# P(S_n <= t) = M(lam)^n * e^{lam t} * int_0^t e^{-lam (t-s)} f_n(s) ds,
# where f_n is the n-fold convolution of the lam-tilted folded normal
# restricted to [0, t] (positive increments keep the recursion closed).
# Tilting makes every stored value O(1)-relative, so the 1e-200-scale
# left tail survives FFT round-off.

def l1_mean(n: int) -> float:
    return _check_n(n) * HALF_NORMAL_MEAN


def l1_var(n: int) -> float:
    return _check_n(n) * (1.0 - 2.0 / math.pi)


def _tilt_log_mgf(lam: float) -> float:
    # log E e^{-lam |g|} = lam^2/2 + log(2 Phi(-lam))
    return lam * lam / 2.0 + math.log(2.0) + special.log_ndtr(-lam)


def _tilt_mean(lam: float) -> float:
    # -d/dlam log M = phi(lam)/Phi(-lam) - lam
    log_mills = (-lam * lam / 2.0 - 0.5 * math.log(2.0 * math.pi)
                 - special.log_ndtr(-lam))
    return math.exp(log_mills) - lam


def _solve_tilt(target: float) -> float:
    if abs(target - HALF_NORMAL_MEAN) < 1e-12:
        return 0.0
    lo, hi = -60.0, 700.0
    # the tilting identity is exact for any lam; clamping only costs
    # conditioning, so saturate rather than fail on extreme targets
    target = min(max(target, _tilt_mean(hi)), _tilt_mean(lo))
    return float(optimize.brentq(lambda lam: _tilt_mean(lam) - target,
                                 lo, hi, xtol=1e-12, rtol=1e-14))


def _l1_logcdf_grid(n: int, t: float, lam: float, m: int) -> float:
    h = t / m
    grid = np.linspace(0.0, t, m + 1)
    # tilted folded-normal density, un-normalized; the M(lam) factors are
    # restored in log scale at the end
    log_m = _tilt_log_mgf(lam)
    f = np.exp(math.log(2.0) - 0.5 * math.log(2.0 * math.pi)
               - grid * grid / 2.0 - lam * grid - log_m)

    def conv(a, b):
        full = np.convolve(a, b)[:m + 1] if m <= 1024 else None
        if full is None:
            from numpy.fft import irfft, rfft
            size = 2 * m + 1
            nfft = 1 << (size - 1).bit_length()
            full = irfft(rfft(a, nfft) * rfft(b, nfft), nfft)[:m + 1]
        return h * (full - 0.5 * a[0] * b - 0.5 * b[0] * a)

    acc = None
    sq = f
    bits = n
    while bits:
        if bits & 1:
            acc = sq if acc is None else conv(acc, sq)
        bits >>= 1
        if bits:
            sq = conv(sq, sq)
    dens = np.maximum(acc, 0.0)
    # int_0^t e^{-lam (t - s)} f_n(s) ds by the same trapezoid rule
    w = np.exp(-lam * (t - grid))
    integrand = w * dens
    integral = h * (integrand.sum() - 0.5 * integrand[0] - 0.5 * integrand[-1])
    if integral <= 0.0:
        return -math.inf
    return n * log_m + lam * t + math.log(integral)


def l1_logcdf(n: int, t: float, tol: float = 1e-10) -> float:
    """log P(sum_i |g_i| <= t), exact to quadrature tolerance."""
    n = _check_n(n)
    if t <= 0.0:
        return -math.inf
    if n == 1:
        return maxabs_logcdf(1, t)
    lam = _solve_tilt(min(t / n, HALF_NORMAL_MEAN))
    m = 8192
    for _ in range(3):
        c1 = _l1_logcdf_grid(n, t, lam, m)
        c2 = _l1_logcdf_grid(n, t, lam, 2 * m)
        c3 = _l1_logcdf_grid(n, t, lam, 4 * m)
        # Richardson on the CDF in log scale via linear scale ratios
        e1, e2, e3 = (math.exp(c1 - c3), math.exp(c2 - c3), 1.0)
        r1 = (4.0 * e2 - e1) / 3.0
        r2 = (4.0 * e3 - e2) / 3.0
        r = (16.0 * r2 - r1) / 15.0
        if r > 0.0 and abs(r - r2) <= tol * r:
            return c3 + math.log(r)
        m *= 2
    return c3 + math.log(max(r, 1e-300))


def l1_median(n: int) -> float:
    mu, sd = l1_mean(n), math.sqrt(l1_var(n))
    lo = max(0.05 * mu, mu - 12.0 * sd)
    return float(optimize.brentq(
        lambda t: l1_logcdf(n, t) - math.log(0.5), lo, mu + 12.0 * sd,
        xtol=1e-12, rtol=1e-14))
