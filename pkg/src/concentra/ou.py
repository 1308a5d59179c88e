"""Gaussian smoothing semigroup: Mehler evaluation and variance decay.

P_t f(x) = E f(e^{-t} x + sqrt(1 - e^{-2t}) G). Curve estimators are nested:
an outer Gaussian sample of base points and one inner block reused for every
outer point and every grid time, which keeps estimated curves smooth enough
to difference. Because the inner block is shared, inner noise is partly
common across outer points; all second-moment estimates therefore come from
cross products of two independent inner half-blocks, which stay unbiased
under any amount of sharing.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .gstats import ConcentrationProfile, ConfigError, EstimateCI, McConfig, substream
from .norms import NormSpec

__all__ = [
    "VectorCI",
    "VarianceCurve",
    "HyperResult",
    "DecayFloors",
    "pt_eval",
    "pt_grad",
    "variance_curve",
    "hyper_check",
    "beta_decay_bounds",
    "grad_decay_ceiling",
]


@dataclass(frozen=True)
class VectorCI:
    value: np.ndarray
    half_width: np.ndarray
    n_eff: int


def _check_t(t: float) -> float:
    t = float(t)
    if not (t >= 0.0) or not math.isfinite(t):
        raise ConfigError("time must be a finite real >= 0")
    return t


def _mix(x: np.ndarray, t: float, z: np.ndarray) -> np.ndarray:
    return math.exp(-t) * x + math.sqrt(-math.expm1(-2.0 * t)) * z


def _plan(cfg: McConfig):
    full, rem = divmod(cfg.samples, cfg.batch)
    plan = [(i, cfg.batch) for i in range(full)]
    if rem:
        plan.append((full, rem))
    return plan


def pt_eval(spec, t: float, x, cfg: McConfig) -> EstimateCI:
    """Smoothed value P_t f(x); exact (zero width) at t = 0."""
    t = _check_t(t)
    x = np.asarray(x, dtype=float)
    if t == 0.0:
        return EstimateCI(float(np.atleast_1d(spec.eval(x))[0]), 0.0, 0)
    means = []
    for idx, size in _plan(cfg):
        z = substream(cfg.seed, "pt-eval", idx).standard_normal((size, spec.dim))
        means.append(np.atleast_1d(spec.eval(_mix(x, t, z))).mean())
    means = np.array(means)
    b = means.size
    hw = 0.0 if b < 2 else 1.96 * float(means.std(ddof=1)) / math.sqrt(b)
    return EstimateCI(float(means.mean()), hw, cfg.samples)


def pt_grad(spec, t: float, x, cfg: McConfig) -> VectorCI:
    """Gradient of the smoothed function, e^{-t} P_t(grad f)(x)."""
    t = _check_t(t)
    x = np.asarray(x, dtype=float)
    if t == 0.0:
        g = np.asarray(spec.subgradient(x), dtype=float).reshape(-1)
        return VectorCI(g, np.zeros_like(g), 0)
    s1 = np.zeros(spec.dim)
    s2 = np.zeros(spec.dim)
    nb = 0
    for idx, size in _plan(cfg):
        z = substream(cfg.seed, "pt-grad", idx).standard_normal((size, spec.dim))
        g = np.atleast_2d(spec.subgradient(_mix(x, t, z))).mean(axis=0)
        s1 += g
        s2 += g * g
        nb += 1
    mean = s1 / nb
    if nb > 1:
        var = np.maximum(s2 / nb - mean * mean, 0.0) * nb / (nb - 1)
        hw = 1.96 * np.sqrt(var / nb)
    else:
        hw = np.zeros_like(mean)
    scale = math.exp(-t)
    return VectorCI(scale * mean, scale * hw, cfg.samples)


@dataclass(frozen=True)
class VarianceCurve:
    """Variance and gradient-energy decay along the semigroup."""

    t_grid: np.ndarray
    v: np.ndarray
    v_half_width: np.ndarray
    grad_sq: np.ndarray
    grad_sq_half_width: np.ndarray
    s_curve: np.ndarray          # v / grad_sq
    psi: np.ndarray              # log(v(0) / v(t))
    fd_residual: np.ndarray      # central-diff v' + 2 grad_sq (nan at ends)
    v0: float
    n_outer: int
    n_inner: int

    def to_csv(self) -> str:
        lines = ["t,v,v_hw,grad_sq,s,psi"]
        for k in range(self.t_grid.size):
            lines.append(",".join(repr(float(c)) for c in (
                self.t_grid[k], self.v[k], self.v_half_width[k],
                self.grad_sq[k], self.s_curve[k], self.psi[k])))
        return "\n".join(lines) + "\n"


def _nested_sizes(cfg: McConfig) -> tuple[int, int]:
    n_out = max(2, int(round(cfg.samples ** (2.0 / 3.0))))
    n_in = max(1, int(round(cfg.samples ** (1.0 / 3.0))))
    if n_in < 16:
        raise ConfigError(
            f"nested inner budget {n_in} < 16; raise samples "
            "(bias guard for the inner loop)")
    return n_out, n_in


def _chunk_size(n_in: int, dim: int) -> int:
    return max(1, 1 << 22 >> max(1, n_in * dim).bit_length())


def _run_chunks(n_out: int, chunk: int, work, streams: int) -> None:
    los = list(range(0, n_out, chunk))
    if streams > 1 and len(los) > 1:
        with ThreadPoolExecutor(max_workers=streams) as pool:
            list(pool.map(work, los))
    else:
        for lo in los:
            work(lo)


def variance_curve(spec, t_grid, cfg: McConfig) -> VarianceCurve:
    """Nested Monte Carlo estimate of v(t) = Var P_t f and its gradient energy.

    Accepts any object with eval/subgradient/dim. v comes from the
    covariance of two half-block inner means; the squared gradient from the
    cross product of half-block mean subgradients, scaled by e^{-2t}.
    """
    ts = np.asarray(t_grid, dtype=float)
    if ts.ndim != 1 or ts.size == 0 or np.any(ts < 0) or np.any(np.diff(ts) <= 0):
        raise ConfigError("t_grid must be strictly increasing and >= 0")
    n_out, n_in = _nested_sizes(cfg)
    n = spec.dim
    half = n_in // 2
    x = substream(cfg.seed, "vc-outer").standard_normal((n_out, n))
    z = substream(cfg.seed, "vc-inner").standard_normal((n_in, n))

    f0 = np.atleast_1d(spec.eval(x))
    g0 = np.atleast_2d(spec.subgradient(x))
    v0 = float(f0.var(ddof=1))

    nb = 32 if n_out >= 64 else 2
    edges = np.linspace(0, n_out, nb + 1).astype(int)
    chunk = _chunk_size(n_in, n)

    v = np.empty(ts.size)
    v_hw = np.empty(ts.size)
    gsq = np.empty(ts.size)
    gsq_hw = np.empty(ts.size)

    for k, t in enumerate(ts):
        if t == 0.0:
            ma = mb = f0
            psq = np.einsum("ij,ij->i", g0, g0)
        else:
            ma = np.empty(n_out)
            mb = np.empty(n_out)
            psq = np.empty(n_out)
            e, s = math.exp(-t), math.sqrt(-math.expm1(-2.0 * t))

            def work(lo, e=e, s=s, ma=ma, mb=mb, psq=psq):
                xs = x[lo:lo + chunk]
                pts = (e * xs)[:, None, :] + s * z[None, :, :]
                flat = pts.reshape(-1, n)
                vals = np.atleast_1d(spec.eval(flat)).reshape(len(xs), n_in)
                ma[lo:lo + chunk] = vals[:, :half].mean(axis=1)
                mb[lo:lo + chunk] = vals[:, half:].mean(axis=1)
                gr = np.atleast_2d(spec.subgradient(flat)).reshape(
                    len(xs), n_in, n)
                ga = gr[:, :half, :].mean(axis=1)
                gb = gr[:, half:, :].mean(axis=1)
                psq[lo:lo + chunk] = np.einsum("ij,ij->i", ga, gb)

            _run_chunks(n_out, chunk, work, cfg.streams)
        abar, bbar = ma.mean(), mb.mean()
        cross = (ma - abar) * (mb - bbar)
        per_b_v = np.array([cross[edges[b]:edges[b + 1]].mean()
                            for b in range(nb)])
        per_b_g = np.array([psq[edges[b]:edges[b + 1]].mean()
                            for b in range(nb)])
        scale = 1.0 if t == 0.0 else math.exp(-2.0 * t)
        v[k] = cross.sum() / (n_out - 1)
        v_hw[k] = 1.96 * float(per_b_v.std(ddof=1)) / math.sqrt(nb)
        gsq[k] = scale * float(psq.mean())
        gsq_hw[k] = scale * 1.96 * float(per_b_g.std(ddof=1)) / math.sqrt(nb)

    with np.errstate(divide="ignore", invalid="ignore"):
        s_curve = v / gsq
        psi = np.where(v > 0, np.log(v0 / np.where(v > 0, v, 1.0)), np.nan)
    fd = np.full(ts.size, np.nan)
    if ts.size >= 3:
        fd[1:-1] = (v[2:] - v[:-2]) / (ts[2:] - ts[:-2]) + 2.0 * gsq[1:-1]
    return VarianceCurve(ts, v, v_hw, gsq, gsq_hw, s_curve, psi, fd,
                         v0, n_out, n_in)


@dataclass(frozen=True)
class HyperResult:
    """Hypercontractive L2 check at one time."""

    t: float
    p: float
    lhs: float
    lhs_half_width: float
    rhs: float
    rhs_half_width: float
    rhs_interp: float
    passed: bool
    passed_interp: bool


def hyper_check(h, t: float, cfg: McConfig, dim: int | None = None,
                center: bool = True) -> HyperResult:
    """Check |P_t h|_2 <= |h|_p with p = 1 + e^{-2t}.

    ``h`` is a NormSpec (centered by default) or a batch callable; callables
    need ``dim``. Also evaluates the L1/L2 interpolation form of the same
    decay.
    """
    t = _check_t(t)
    if isinstance(h, NormSpec):
        spec = h
        dim = spec.dim
        if center:
            total, count = 0.0, 0
            for idx, size in _plan(cfg):
                zz = substream(cfg.seed, "hyper-center", idx).standard_normal(
                    (size, dim))
                total += float(np.atleast_1d(spec.eval(zz)).sum())
                count += size
            shift = total / count
        else:
            shift = 0.0

        def fn(pts):
            return np.atleast_1d(spec.eval(pts)) - shift
    else:
        fn = h
        if dim is None:
            raise ConfigError("callable h needs an explicit dim")

    p = 1.0 + math.exp(-2.0 * t)
    n_out, n_in = _nested_sizes(cfg)
    half = n_in // 2
    x = substream(cfg.seed, "hyper-outer").standard_normal((n_out, dim))
    z = substream(cfg.seed, "hyper-inner").standard_normal((n_in, dim))

    chunk = _chunk_size(n_in, dim)
    ma = np.empty(n_out)
    mb = np.empty(n_out)
    if t == 0.0:
        ma[:] = mb[:] = np.asarray(fn(x))
    else:
        e, s = math.exp(-t), math.sqrt(-math.expm1(-2.0 * t))

        def work(lo):
            xs = x[lo:lo + chunk]
            pts = ((e * xs)[:, None, :] + s * z[None, :, :]).reshape(-1, dim)
            vals = np.asarray(fn(pts)).reshape(len(xs), n_in)
            ma[lo:lo + chunk] = vals[:, :half].mean(axis=1)
            mb[lo:lo + chunk] = vals[:, half:].mean(axis=1)

        _run_chunks(n_out, chunk, work, cfg.streams)
    sq = ma * mb                 # unbiased (P_t h)^2 per outer point
    hx = np.asarray(fn(x))
    ap = np.abs(hx) ** p
    a1 = np.abs(hx)
    a2 = hx * hx

    nb = 32 if n_out >= 64 else 2
    edges = np.linspace(0, n_out, nb + 1).astype(int)

    def bmean(arr):
        bm = np.array([arr[edges[b]:edges[b + 1]].mean() for b in range(nb)])
        return float(bm.mean()), 1.96 * float(bm.std(ddof=1)) / math.sqrt(nb)

    sq_m, sq_hw = bmean(sq)
    ap_m, ap_hw = bmean(ap)
    a1_m, _ = bmean(a1)
    a2_m, _ = bmean(a2)

    lhs = math.sqrt(max(sq_m, 0.0))
    lhs_hw = sq_hw / (2.0 * lhs) if lhs > 0 else math.sqrt(max(sq_hw, 0.0))
    rhs = ap_m ** (1.0 / p)
    rhs_hw = ap_hw * rhs / (p * ap_m) if ap_m > 0 else 0.0
    l2 = math.sqrt(max(a2_m, 0.0))
    l1 = a1_m
    expo = 2.0 / p - 1.0
    rhs2 = l2 * (l1 / l2) ** expo if l2 > 0 else 0.0
    slack = 3.0 * math.hypot(lhs_hw, rhs_hw)
    return HyperResult(t, p, lhs, lhs_hw, rhs, rhs_hw, rhs2,
                       lhs <= rhs + slack, lhs <= rhs2 + slack)


@dataclass(frozen=True)
class DecayFloors:
    """Certified lower bounds for 1/beta_tilde(t) and 1/beta(t)."""

    t: float
    inv_beta_tilde_floor: float
    inv_beta_floor: float


def beta_decay_bounds(profile: ConcentrationProfile, t: float) -> DecayFloors:
    """Floors on the reciprocal normalized variances of the smoothed norm."""
    t = _check_t(t)
    if (not profile.beta > 0 or not profile.beta_tilde > 0
            or not profile.l_ratio > 0):
        raise ConfigError("degenerate profile: beta, beta_tilde and the "
                          "gradient-mass ratio must be positive")
    q = math.exp(-2.0 * t)
    et = math.exp(-t)
    inv_bt = 1.0 / profile.beta_tilde
    inv_b = 1.0 / profile.beta
    inv_l = 1.0 / profile.l_ratio
    a = 2.0 * q / (1.0 + q)
    floor_bt = math.exp(2.0 * t) * inv_bt ** a * inv_l ** (1.0 - a)
    floor_b = math.exp(2.0 * t - 2.0) * inv_b ** et * inv_l ** (1.0 - et)
    return DecayFloors(t, floor_bt, floor_b)


def grad_decay_ceiling(profile: ConcentrationProfile, t: float) -> float:
    """Certified ceiling e^{-2t} E|grad f|^2 R^{-tanh t} for the smoothed
    gradient energy."""
    t = _check_t(t)
    return (math.exp(-2.0 * t) * profile.grad_l2_sq.value
            * profile.big_r ** (-math.tanh(t)))
