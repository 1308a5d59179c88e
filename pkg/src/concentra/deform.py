"""Seminorm surgery on explicit sets of norming functionals.

Four constructions, each reshaping which functionals a seminorm is allowed
to use: a drop-and-rescale transform that pushes norming supports onto
large coordinates, spike removal for coordinates with outsized partial
derivatives, seminorms assembled from semigroup-smoothed gradients with an
iterative coordinate-balancing loop, and a diagonally contracted position
seminorm. The balancing loop feeds a lower-deviation bound pipeline that
compares the variance-based exponent of the balanced seminorm against the
measured deviation frequency of the source norm.

Functional sets here are 1-unconditional by convention: a stored row v
stands for its whole orbit under coordinate sign flips, so evaluation
always pairs |v| with |x|.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import dist
from .constants import (COORD_CONST, F_TRANSFORM_EXACT_MAX_DIM, PIPELINE_C,
                        SELECTION_QUANTILE, SPIKE_DROP_COEFF)
from .gstats import (ConfigError, EstimateCI, ExactUnavailable, McConfig,
                     _mean_ci, estimate_profile, exact_profile,
                     gaussian_batches, substream)
from .norms import FunctionalSet, NormError, unc_constant_lower
from .ou import _run_chunks
from .positions import ContractionResult, balance_report, diagonal_contraction
from .smallball import (SmallBallQuery, SplittingConfig, exact_log_smallball,
                        mc_smallball, splitting_smallball)

__all__ = [
    "UnconditionalPolytope",
    "FTransform",
    "FTransformDetail",
    "DiagonalImage",
    "SpikeRemoval",
    "SmoothingParams",
    "ExclusionRules",
    "GradientHarvest",
    "SmoothedSeminorm",
    "DeformationTrace",
    "BalanceOutcome",
    "PipelineReport",
    "PositionSeminorms",
    "f_transform_eval",
    "f_transform_detail",
    "f_support_check",
    "spike_removal",
    "harvest_gradients",
    "build_smoothed_seminorm",
    "balance_loop",
    "smalldev_pipeline",
    "build_position_seminorms",
    "gaussian_shift_floor",
]


def _as_rows(funcs) -> np.ndarray:
    if isinstance(funcs, FunctionalSet):
        return funcs.vectors
    v = np.atleast_2d(np.asarray(funcs, dtype=float))
    if v.ndim != 2:
        raise NormError("functionals must form a (m, n) array")
    if not np.all(np.isfinite(v)):
        raise NormError("functional entries must be finite")
    return v


def _rows_of(x, dim: int) -> tuple[np.ndarray, bool]:
    a = np.asarray(x, dtype=float)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    if a.shape[1] != dim:
        raise NormError(f"expected vectors of dimension {dim}")
    return a, single


class UnconditionalPolytope:
    """max over stored functionals v of <|v|, |x|>: the 1-unconditional hull.

    An empty set is legal and gives the zero seminorm; the subgradient at
    points where the value vanishes is the zero vector.
    """

    def __init__(self, funcs, dim: int | None = None):
        if isinstance(funcs, np.ndarray) and funcs.size == 0:
            if dim is None:
                raise NormError("empty functional set needs an explicit dim")
            mags = np.empty((0, dim))
        else:
            mags = np.abs(_as_rows(funcs))
        mags = mags.copy()
        mags.flags.writeable = False
        self.mags = mags

    @property
    def dim(self) -> int:
        return self.mags.shape[1]

    @property
    def count(self) -> int:
        return self.mags.shape[0]

    @property
    def degenerate(self) -> bool:
        return self.count == 0

    def eval(self, x):
        a, single = _rows_of(x, self.dim)
        if self.degenerate:
            r = np.zeros(a.shape[0])
        else:
            r = (np.abs(a) @ self.mags.T).max(axis=1)
        return float(r[0]) if single else r

    def subgradient(self, x):
        a, single = _rows_of(x, self.dim)
        if self.degenerate:
            g = np.zeros_like(a)
        else:
            idx = (np.abs(a) @ self.mags.T).argmax(axis=1)
            g = np.sign(a) * self.mags[idx]
        return g[0] if single else g


class DiagonalImage:
    """Composition x -> base(d * x) with a fixed nonnegative diagonal."""

    def __init__(self, base, entries):
        d = np.asarray(entries, dtype=float)
        if d.ndim != 1 or d.size != base.dim or np.any(d < 0):
            raise ConfigError("diagonal must be a nonnegative vector of "
                              "matching dimension")
        d = d.copy()
        d.flags.writeable = False
        self.base = base
        self.entries = d

    @property
    def dim(self) -> int:
        return self.base.dim

    def eval(self, x):
        a, single = _rows_of(x, self.dim)
        r = np.atleast_1d(self.base.eval(a * self.entries))
        return float(r[0]) if single else r

    def subgradient(self, x):
        a, single = _rows_of(x, self.dim)
        g = np.atleast_2d(self.base.subgradient(a * self.entries))
        g = g * self.entries
        return g[0] if single else g


# ------------------------------------------------- drop-and-rescale transform
#
# Per functional with magnitudes a on its support and b_i = a_i |y_i|, the
# value of dropping the index set I is
#
#     (1 + sum_I a / (tau * sum a)) * (sum b - sum_I b).
#
# The relaxation of this objective is maximized by dropping coordinates
# below a threshold in |y_i|, so the candidate family is every ascending-
# |y_i| prefix together with every single-element toggle of a prefix. Both
# the sweep and the exhaustive search score masks through _mask_values, so
# agreement between them is exact, not approximate.

def _mask_values(a: np.ndarray, b: np.ndarray, tau: float,
                 masks: np.ndarray) -> np.ndarray:
    total = a.sum()
    full = b.sum()
    s_val = (masks * a).sum(axis=1)
    b_val = (masks * b).sum(axis=1)
    return (1.0 + s_val / (tau * total)) * (full - b_val)


def _sweep_masks(absy: np.ndarray) -> np.ndarray:
    """Ascending-|y| prefixes plus all one-element toggles, in support order."""
    s = absy.size
    order = np.argsort(absy, kind="stable")
    prefix = np.arange(s)[None, :] < np.arange(s + 1)[:, None]
    toggled = prefix[:, None, :] ^ np.eye(s, dtype=bool)[None, :, :]
    in_sorted = np.concatenate([prefix, toggled.reshape(-1, s)], axis=0)
    out = np.empty_like(in_sorted)
    out[:, order] = in_sorted
    return out


def _all_masks(s: int) -> np.ndarray:
    if s > F_TRANSFORM_EXACT_MAX_DIM:
        raise ConfigError("exhaustive subset search capped at dimension "
                          f"{F_TRANSFORM_EXACT_MAX_DIM}")
    codes = np.arange(1 << s, dtype=np.uint32)
    return (codes[:, None] >> np.arange(s)[None, :] & 1).astype(bool)


@dataclass(frozen=True)
class FTransformDetail:
    """Achieving functional and cross-validation record for one evaluation."""

    value: float
    sweep_value: float
    exhaustive_value: float | None
    sweep_exact: bool | None
    base_value: float
    functional: int              # index of the achieving row, -1 if none
    dropped: np.ndarray          # original coordinates dropped by the achiever
    kept: np.ndarray             # support coordinates the achiever retains
    achiever: np.ndarray         # the rescaled functional, sign-matched to y


def _f_transform_scan(rows: np.ndarray, tau: float, y: np.ndarray,
                      method: str) -> FTransformDetail:
    n = rows.shape[1]
    use_exh = method == "exhaustive" or (
        method == "auto" and n <= F_TRANSFORM_EXACT_MAX_DIM)
    sweep_best = 0.0
    exh_best = 0.0 if use_exh else None
    best_val = 0.0
    pick = -1
    pick_mask = None
    pick_idx = None
    pick_scale = 1.0
    for j, row in enumerate(np.abs(rows)):
        idx = np.flatnonzero(row)
        if idx.size == 0:
            continue
        a = row[idx]
        b = a * np.abs(y[idx])
        masks = _sweep_masks(np.abs(y[idx]))
        vals = _mask_values(a, b, tau, masks)
        arg = int(vals.argmax())
        sweep_best = max(sweep_best, float(vals[arg]))
        if use_exh:
            emasks = _all_masks(idx.size)
            evals = _mask_values(a, b, tau, emasks)
            earg = int(evals.argmax())
            row_val, row_mask = float(evals[earg]), emasks[earg]
            exh_best = max(exh_best, row_val)
        else:
            row_val, row_mask = float(vals[arg]), masks[arg]
        if pick < 0 or row_val > best_val:
            best_val = row_val
            pick = j
            pick_mask = row_mask
            pick_idx = idx
            pick_scale = 1.0 + float((row_mask * a).sum()) / (tau * a.sum())
    value = exh_best if use_exh else sweep_best
    achiever = np.zeros(n)
    dropped = np.empty(0, dtype=int)
    kept = np.empty(0, dtype=int)
    if pick >= 0 and value > 0.0:
        dropped = pick_idx[pick_mask]
        kept = pick_idx[~pick_mask]
        achiever[kept] = pick_scale * np.abs(rows[pick, kept]) * np.sign(y[kept])
    return FTransformDetail(
        value=float(value), sweep_value=float(sweep_best),
        exhaustive_value=exh_best,
        sweep_exact=None if exh_best is None else sweep_best == exh_best,
        base_value=0.0, functional=pick, dropped=dropped, kept=kept,
        achiever=achiever)


def f_transform_detail(fs, tau: float, y,
                       method: str = "auto") -> FTransformDetail:
    """Evaluate the transform at one point, keeping the achieving functional.

    method "auto" runs the exhaustive search whenever the dimension allows
    it and records whether the sweep family attained the same value; "sweep"
    and "exhaustive" force one path.
    """
    if tau < 1.0:
        raise ConfigError("tau must be >= 1")
    if method not in ("auto", "sweep", "exhaustive"):
        raise ConfigError("method must be auto, sweep, or exhaustive")
    rows = _as_rows(fs)
    yv = np.asarray(y, dtype=float)
    if yv.ndim != 1 or yv.size != rows.shape[1]:
        raise NormError("y must be a vector matching the functional width")
    det = _f_transform_scan(rows, tau, yv, method)
    base = UnconditionalPolytope(rows).eval(yv)
    return FTransformDetail(**{**det.__dict__, "base_value": float(base)})


def f_transform_eval(fs, tau: float, y, method: str = "auto") -> float:
    """Best value of <v(x, I), y> over functionals x and drop sets I."""
    return f_transform_detail(fs, tau, y, method=method).value


def f_support_check(fs, tau: float, y, K: float) -> bool:
    """Check the achiever's support sits on coordinates with
    |y_i| >= tau * base(y) / ((tau + 1)^2 * K)."""
    det = f_transform_detail(fs, tau, y)
    if det.base_value == 0.0:
        raise NormError("support check needs base(y) != 0")
    thresh = tau * det.base_value / ((tau + 1.0) ** 2 * K)
    yv = np.asarray(y, dtype=float)
    return bool(np.all(np.abs(yv[det.kept]) >= thresh * (1.0 - 1e-12)))


class FTransform:
    """Drop-and-rescale transform of an unconditional polytope seminorm.

    Batch evaluation sweeps, per functional, the ascending-|x_i| prefix
    family with one-element toggles via running sums; f_transform_eval
    cross-validates that family against exhaustive subset search in low
    dimension. tau >= 1 controls the rescaling bonus, so the transform is
    sandwiched between the hull and (1 + 1/tau) times the hull.
    """

    def __init__(self, funcs, tau: float, dim: int | None = None):
        if tau < 1.0:
            raise ConfigError("tau must be >= 1")
        self.tau = float(tau)
        self.hull = UnconditionalPolytope(funcs, dim=dim)
        mags = self.hull.mags
        self.supports = [np.flatnonzero(r) for r in mags]
        self.totals = np.array([mags[j, s].sum()
                                for j, s in enumerate(self.supports)])

    @property
    def dim(self) -> int:
        return self.hull.dim

    @property
    def count(self) -> int:
        return self.hull.count

    @property
    def degenerate(self) -> bool:
        return self.hull.degenerate

    def _row_tables(self, absx: np.ndarray, j: int):
        """Sorted magnitudes and prefix sums for functional j at |x| rows."""
        idx = self.supports[j]
        a = self.hull.mags[j, idx]
        ay = absx[:, idx]
        order = np.argsort(ay, axis=1, kind="stable")
        a_s = a[order]
        b_s = np.take_along_axis(a[None, :] * ay, order, axis=1)
        m = absx.shape[0]
        s = idx.size
        pa = np.zeros((m, s + 1))
        pb = np.zeros((m, s + 1))
        np.cumsum(a_s, axis=1, out=pa[:, 1:])
        np.cumsum(b_s, axis=1, out=pb[:, 1:])
        return idx, a, order, a_s, b_s, pa, pb

    def _row_candidates(self, absx: np.ndarray, j: int):
        """Candidate values (m, (s+1)*(s+1)) for functional j: prefixes
        followed by single-element toggles."""
        idx, a, order, a_s, b_s, pa, pb = self._row_tables(absx, j)
        s = idx.size
        scale = self.tau * self.totals[j]
        full = pb[:, -1:]
        pre = (1.0 + pa / scale) * (full - pb)
        sign = np.where(np.arange(s)[None, :] >= np.arange(s + 1)[:, None],
                        1.0, -1.0)
        s_adj = pa[:, :, None] + sign[None] * a_s[:, None, :]
        b_adj = pb[:, :, None] + sign[None] * b_s[:, None, :]
        adj = (1.0 + s_adj / scale) * (full[:, :, None] - b_adj)
        return np.concatenate([pre, adj.reshape(absx.shape[0], -1)], axis=1)

    def _chunks(self, m: int, s: int):
        rows = max(64, (1 << 21) // max(1, s * s))
        for lo in range(0, m, rows):
            yield lo, min(m, lo + rows)

    def eval(self, x):
        a, single = _rows_of(x, self.dim)
        best = np.zeros(a.shape[0])
        absx = np.abs(a)
        for j, idx in enumerate(self.supports):
            if idx.size == 0:
                continue
            for lo, hi in self._chunks(a.shape[0], idx.size):
                cand = self._row_candidates(absx[lo:hi], j)
                np.maximum(best[lo:hi], cand.max(axis=1), out=best[lo:hi])
        return float(best[0]) if single else best

    def subgradient(self, x):
        a, single = _rows_of(x, self.dim)
        m = a.shape[0]
        absx = np.abs(a)
        best = np.zeros(m)
        best_j = np.full(m, -1)
        best_c = np.zeros(m, dtype=int)
        for j, idx in enumerate(self.supports):
            if idx.size == 0:
                continue
            for lo, hi in self._chunks(m, idx.size):
                cand = self._row_candidates(absx[lo:hi], j)
                arg = cand.argmax(axis=1)
                val = cand[np.arange(hi - lo), arg]
                win = val > best[lo:hi]
                sl = slice(lo, hi)
                best[sl] = np.where(win, val, best[sl])
                best_j[sl] = np.where(win, j, best_j[sl])
                best_c[sl] = np.where(win, arg, best_c[sl])
        g = np.zeros_like(a)
        for j in np.unique(best_j):
            if j < 0:
                continue
            rows = np.flatnonzero(best_j == j)
            idx, aj, order, a_s, b_s, pa, pb = self._row_tables(absx[rows], j)
            s = idx.size
            cand = best_c[rows]
            k = np.where(cand <= s, cand, (cand - (s + 1)) // s)
            mask = np.arange(s)[None, :] < k[:, None]
            toggle = cand > s
            jj = np.where(toggle, (cand - (s + 1)) % s, 0)
            mask[toggle] ^= np.eye(s, dtype=bool)[jj[toggle]]
            drop = np.zeros_like(mask)
            np.put_along_axis(drop, order, mask, axis=1)
            scale = 1.0 + (mask * a_s).sum(axis=1) / (self.tau * self.totals[j])
            vals = scale[:, None] * aj[None, :] * np.sign(a[rows][:, idx])
            g[rows[:, None], idx[None, :]] = np.where(drop, 0.0, vals)
        return g[0] if single else g


# ------------------------------------------------------------ spike removal

@dataclass(frozen=True)
class SpikeRemoval:
    """Functional set with coordinate-i spikes removed, plus the mean drop."""

    kept: np.ndarray             # surviving rows
    seminorm: UnconditionalPolytope
    removed: int
    threshold: float             # cap on |v_i|: alpha/4 * sqrt(grad_l2_sq)
    degenerate: bool
    drop: EstimateCI             # E before(G) - E after(G), same samples
    reference_drop: float        # frozen-coefficient alpha^3 shape


def spike_removal(fs, i: int, alpha: float, grad_l2_sq: float,
                  cfg: McConfig | None = None) -> SpikeRemoval:
    """Keep only functionals with |v_i| <= alpha/4 * sqrt(grad_l2_sq).

    The measured mean drop is compared against the reference shape
    coeff * alpha^3 / sqrt(log(1/alpha)) * sqrt(grad_l2_sq); the coefficient
    is a frozen calibration, so the comparison is a report, not a gate.
    """
    rows = _as_rows(fs)
    n = rows.shape[1]
    if not 0 <= i < n:
        raise ConfigError("coordinate out of range")
    if not 0.0 < alpha < 1.0:
        raise ConfigError("alpha must lie in (0, 1)")
    if grad_l2_sq <= 0.0:
        raise ConfigError("grad_l2_sq must be positive")
    cfg = cfg or McConfig()
    threshold = alpha / 4.0 * math.sqrt(grad_l2_sq)
    keep = np.abs(rows[:, i]) <= threshold
    kept = rows[keep]
    before = UnconditionalPolytope(rows)
    after = UnconditionalPolytope(kept, dim=n)
    bm = []
    for _, block in gaussian_batches(cfg, n, stream="spike"):
        bm.append(float(np.mean(np.atleast_1d(before.eval(block))
                                - np.atleast_1d(after.eval(block)))))
    reference = (SPIKE_DROP_COEFF * alpha ** 3
                 / math.sqrt(math.log(1.0 / alpha))
                 * math.sqrt(grad_l2_sq))
    return SpikeRemoval(
        kept=kept, seminorm=after, removed=int(rows.shape[0] - kept.shape[0]),
        threshold=threshold, degenerate=after.degenerate,
        drop=_mean_ci(np.array(bm), cfg.samples), reference_drop=reference)


# ------------------------------------------- smoothed-gradient seminorms

@dataclass(frozen=True)
class SmoothingParams:
    """Knobs for one smoothed-gradient seminorm build.

    tau is the earliest smoothing time (must also be >= 1/log n, checked at
    build when the dimension is known); delta the decay exponent driving the
    norming filter; h the unconditionality allowance; theta the balance
    threshold. t_grid defaults to 8 geometric points spanning [tau, 1/2].
    """

    tau: float
    delta: float
    h: float = 1.0
    theta: float = 0.25
    t_grid: tuple[float, ...] | None = None
    sample_budget: int = 256
    inner_budget: int = 512

    def __post_init__(self):
        if not 0.0 < self.tau <= 0.5:
            raise ConfigError("tau must lie in (0, 1/2]")
        if not 0.0 < self.delta <= 1.0:
            raise ConfigError("delta must lie in (0, 1]")
        if self.h < 1.0:
            raise ConfigError("h must be >= 1")
        if self.theta <= 0.0:
            raise ConfigError("theta must be positive")
        if self.sample_budget < 16 or self.inner_budget < 16:
            raise ConfigError("budgets must be >= 16")
        if self.t_grid is not None:
            g = tuple(float(t) for t in self.t_grid)
            if not g or any(not self.tau - 1e-12 <= t <= 0.5 + 1e-12
                            for t in g):
                raise ConfigError("t_grid must lie in [tau, 1/2]")
            if any(u >= v for u, v in zip(g, g[1:])):
                raise ConfigError("t_grid must be strictly increasing")
            object.__setattr__(self, "t_grid", g)

    def grid(self) -> np.ndarray:
        if self.t_grid is not None:
            return np.asarray(self.t_grid)
        return np.geomspace(self.tau, 0.5, 8)


class ExclusionRules:
    """Append-only per-time exclusion rules (coordinate, threshold).

    A harvested gradient g at time index t is excluded when any rule at t
    has |g_i| >= threshold. Rules can only ever be added, so rebuilt
    seminorms shrink pointwise.
    """

    def __init__(self, n_times: int):
        if n_times < 1:
            raise ConfigError("need at least one time slot")
        self._rules: list[list[tuple[int, float]]] = [[] for _ in
                                                      range(n_times)]

    @property
    def n_times(self) -> int:
        return len(self._rules)

    @property
    def total(self) -> int:
        return sum(len(r) for r in self._rules)

    def at(self, t_index: int) -> tuple[tuple[int, float], ...]:
        return tuple(self._rules[t_index])

    def add(self, i: int, threshold: float, t_index: int | None = None):
        """Add one rule at one time slot, or at every slot when t_index is
        None."""
        if threshold <= 0.0:
            raise ConfigError("threshold must be positive")
        slots = range(self.n_times) if t_index is None else (t_index,)
        for t in slots:
            self._rules[t].append((int(i), float(threshold)))


@dataclass(frozen=True)
class GradientHarvest:
    """Smoothed gradients at sampled points, with norming-filter statistics.

    g[t, b] holds the inner average of subgradients at e^{-t} y_b + (1 -
    e^{-2t})^{1/2} Z over a shared inner block, i.e. the smoothed gradient
    field at y_b. filter_ok marks points that still norm their own y
    (inner product at least (1 - 4t) E f) while their gradient length has
    decayed below sqrt(E|grad f|^2) * n^{-delta t / 8}.
    """

    t_grid: np.ndarray           # (T,)
    y: np.ndarray                # (B, n)
    g: np.ndarray                # (T, B, n)
    ip: np.ndarray               # (T, B) <y_b, g[t, b]>
    gnorm: np.ndarray            # (T, B)
    filter_ok: np.ndarray        # (T, B)
    mean_f: float
    grad_l2_sq: float
    lip: float
    big_r: float


def _resolve_profile(spec, cfg: McConfig, profile=None):
    if profile is not None:
        return profile
    try:
        return exact_profile(spec)
    except (ExactUnavailable, TypeError):
        return estimate_profile(spec, cfg)


def harvest_gradients(spec, params: SmoothingParams, cfg: McConfig,
                      profile=None) -> GradientHarvest:
    """Sample outer points and estimate their smoothed gradients once.

    One inner block is shared across every (point, time) pair, so functional
    values compete under common noise and rebuilds that only change masks
    stay exactly monotone.
    """
    n = spec.dim
    if math.log(n) * params.tau < 1.0 - 1e-9:
        raise ConfigError("tau must be >= 1/log n")
    profile = _resolve_profile(spec, cfg, profile)
    mean_f = profile.mean.value
    gsq = profile.grad_l2_sq.value
    tg = params.grid()
    big_t, big_b = tg.size, params.sample_budget
    y = substream(cfg.seed, "smooth-outer").standard_normal((big_b, n))
    z = substream(cfg.seed, "smooth-inner").standard_normal(
        (params.inner_budget, n))
    g = np.empty((big_t, big_b, n))
    chunk = max(1, (1 << 21) // (params.inner_budget * n))

    def slot_work(ti: int, c: float, sd: float):
        def work(lo: int):
            hi = min(big_b, lo + chunk)
            arg = (c * y[lo:hi, None, :] + sd * z[None, :, :]).reshape(-1, n)
            sub = np.atleast_2d(spec.subgradient(arg))
            g[ti, lo:hi] = sub.reshape(
                hi - lo, params.inner_budget, n).mean(axis=1)
        return work

    for ti, t in enumerate(tg):
        c = math.exp(-t)
        _run_chunks(big_b, chunk, slot_work(ti, c, math.sqrt(1.0 - c * c)),
                    cfg.streams)
    ip = np.einsum("tbn,bn->tb", g, y)
    gnorm = np.sqrt(np.einsum("tbn,tbn->tb", g, g))
    lim = math.sqrt(gsq) * n ** (-params.delta * tg / 8.0)
    filter_ok = (ip >= (1.0 - 4.0 * tg)[:, None] * mean_f) & (
        gnorm <= lim[:, None])
    return GradientHarvest(
        t_grid=tg, y=y, g=g, ip=ip, gnorm=gnorm, filter_ok=filter_ok,
        mean_f=mean_f, grad_l2_sq=gsq, lip=profile.lip, big_r=profile.big_r)


class SmoothedSeminorm:
    """max over kept smoothed gradients g of <x, g>, symmetrized by 1/h.

    Value: max(max_g <x, g>, (1/h) max_g <|g|, |x|>). With no kept
    gradients this is the zero seminorm (degenerate flag set).
    """

    def __init__(self, funcs: np.ndarray, func_t: np.ndarray, h: float,
                 harvest: GradientHarvest, accept_rates: np.ndarray,
                 ndelta_ok: bool, ndelta_residual: float):
        self.funcs = funcs
        self.func_t = func_t
        self.h = float(h)
        self.t_grid = harvest.t_grid
        self.accept_rates = accept_rates
        self.mean_f = harvest.mean_f
        self.grad_l2_sq = harvest.grad_l2_sq
        self.ndelta_ok = ndelta_ok
        self.ndelta_residual = ndelta_residual
        self.lip_surrogate = (0.0 if funcs.shape[0] == 0 else
                              float(np.sqrt((funcs * funcs).sum(
                                  axis=1)).max()))
        self._dim = harvest.y.shape[1]

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def count(self) -> int:
        return self.funcs.shape[0]

    @property
    def degenerate(self) -> bool:
        return self.count == 0

    def eval(self, x):
        a, single = _rows_of(x, self.dim)
        if self.degenerate:
            r = np.zeros(a.shape[0])
        else:
            r = np.maximum((a @ self.funcs.T).max(axis=1),
                           (np.abs(a) @ np.abs(self.funcs).T).max(axis=1)
                           / self.h)
        return float(r[0]) if single else r

    def subgradient(self, x):
        a, single = _rows_of(x, self.dim)
        if self.degenerate:
            g = np.zeros_like(a)
        else:
            plain = a @ self.funcs.T
            sym = np.abs(a) @ np.abs(self.funcs).T
            i1 = plain.argmax(axis=1)
            i2 = sym.argmax(axis=1)
            rows = np.arange(a.shape[0])
            use1 = plain[rows, i1] >= sym[rows, i2] / self.h
            g = np.where(use1[:, None], self.funcs[i1],
                         np.sign(a) * np.abs(self.funcs[i2]) / self.h)
        return g[0] if single else g

    def partial_means(self, x: np.ndarray) -> np.ndarray:
        """E|d_i| estimates on a sample block (zero when degenerate)."""
        if self.degenerate:
            return np.zeros(self.dim)
        return np.abs(self.subgradient(x)).mean(axis=0)


def build_smoothed_seminorm(spec, params: SmoothingParams,
                            events: ExclusionRules | None = None,
                            cfg: McConfig | None = None, profile=None,
                            harvest: GradientHarvest | None = None,
                            ) -> SmoothedSeminorm:
    """Assemble the seminorm from harvested gradients minus exclusions.

    Passing a harvest reuses it and only reapplies masks, which keeps
    repeated builds exactly monotone under growing exclusion rules.
    """
    cfg = cfg or McConfig()
    if harvest is None:
        harvest = harvest_gradients(spec, params, cfg, profile=profile)
    big_t = harvest.t_grid.size
    if events is not None and events.n_times != big_t:
        raise ConfigError("exclusion rules sized for a different t grid")
    keep = harvest.filter_ok.copy()
    if events is not None:
        for ti in range(big_t):
            for i, thr in events.at(ti):
                keep[ti] &= np.abs(harvest.g[ti, :, i]) < thr
    rates = keep.mean(axis=1)
    tidx, bidx = np.nonzero(keep)
    n = harvest.y.shape[1]
    residual = n ** (-params.delta) - 1.0 / harvest.big_r
    return SmoothedSeminorm(
        funcs=harvest.g[tidx, bidx], func_t=tidx, h=params.h,
        harvest=harvest, accept_rates=rates,
        ndelta_ok=bool(residual >= 0.0), ndelta_residual=float(residual))


# ---------------------------------------------------------- balancing loop

@dataclass(frozen=True)
class DeformationTrace:
    """Per-iteration record of the balancing loop.

    Row k describes the seminorm after k exclusions; coord is the
    coordinate chosen from it (-1 on the final row). Means are evaluated on
    one shared block, so they are exactly non-increasing.
    """

    coord: np.ndarray
    mean: np.ndarray
    max_partial: np.ndarray
    count: np.ndarray
    var: np.ndarray

    @property
    def rows(self) -> int:
        return self.coord.size

    def to_csv(self) -> str:
        lines = ["k,coord,mean,max_partial,count,var"]
        for k in range(self.rows):
            lines.append(",".join([
                str(k), str(int(self.coord[k])), repr(float(self.mean[k])),
                repr(float(self.max_partial[k])), str(int(self.count[k])),
                repr(float(self.var[k]))]))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class BalanceOutcome:
    seminorm: SmoothedSeminorm
    trace: DeformationTrace
    rules: ExclusionRules
    converged: bool
    iterations: int              # exclusions applied (m)
    cap: int
    theta: float
    mean0: float                 # E of the initial seminorm, the reference
    hypothesis_ok: bool          # theta^5 >= n^{-delta/4}


def balance_loop(spec, params: SmoothingParams, cfg: McConfig | None = None,
                 profile=None) -> BalanceOutcome:
    """Exclude one loud coordinate at a time until all partials are quiet.

    Stops when every E|d_i| < theta * (E of the initial seminorm); otherwise
    adds the rule (argmax i, theta/4 * that mean) to every time slot and
    rebuilds from the same harvest. A hard cap of 10 / theta^4 iterations
    turns a runaway loop into a reportable failure instead of a hang.
    """
    cfg = cfg or McConfig()
    n = spec.dim
    profile = _resolve_profile(spec, cfg, profile)
    harvest = harvest_gradients(spec, params, cfg, profile=profile)
    rules = ExclusionRules(harvest.t_grid.size)
    ups = build_smoothed_seminorm(spec, params, events=rules, cfg=cfg,
                                  profile=profile, harvest=harvest)
    x = substream(cfg.seed, "balance-eval").standard_normal((cfg.samples, n))
    mean0 = float(np.atleast_1d(ups.eval(x)).mean())
    cap = int(math.ceil(10.0 / params.theta ** 4))
    hypothesis_ok = params.theta ** 5 >= n ** (-params.delta / 4.0)
    coords, means, mps, counts, variances = [], [], [], [], []
    k = 0
    converged = False
    while True:
        vals = np.atleast_1d(ups.eval(x))
        partial = ups.partial_means(x)
        mp = float(partial.max()) if partial.size else 0.0
        means.append(float(vals.mean()))
        variances.append(float(vals.var(ddof=1)))
        mps.append(mp)
        counts.append(ups.count)
        if ups.degenerate or mp < params.theta * mean0:
            coords.append(-1)
            converged = True
            break
        if k >= cap:
            coords.append(-1)
            break
        i_star = int(partial.argmax())
        coords.append(i_star)
        rules.add(i_star, params.theta / 4.0 * mean0)
        ups = build_smoothed_seminorm(spec, params, events=rules, cfg=cfg,
                                      profile=profile, harvest=harvest)
        k += 1
    trace = DeformationTrace(
        coord=np.array(coords, dtype=int), mean=np.array(means),
        max_partial=np.array(mps), count=np.array(counts, dtype=int),
        var=np.array(variances))
    return BalanceOutcome(
        seminorm=ups, trace=trace, rules=rules, converged=converged,
        iterations=k, cap=cap, theta=params.theta, mean0=mean0,
        hypothesis_ok=hypothesis_ok)


# ------------------------------------------------- small-deviation pipeline

@dataclass(frozen=True)
class PipelineReport:
    """Balanced-seminorm deviation bound against the measured frequency.

    log_bound is log of 2 exp(-eps^2 (E upsilon)^2 / (100 Var upsilon));
    valid means it sits above the measured log-probability of
    {f <= (1 - eps) E f}. Hypothesis flags mark where the construction ran
    outside its guaranteed regime; the bound is still reported there.
    """

    epsilon: float
    dim: int
    delta: float
    tau: float
    tau_unclamped: float
    theta: float
    h: float
    out_of_regime: bool
    tau_clamped: bool
    h_ok: bool
    ndelta_ok: bool
    hypothesis_ok: bool
    degenerate: bool
    converged: bool
    mean_f: float
    mean_upsilon: float
    var_upsilon: float
    log_bound: float
    empirical_log_p: float
    empirical_engine: str
    valid: bool
    trace: DeformationTrace

    @property
    def bound(self) -> float:
        return math.exp(self.log_bound)


def _empirical_low_deviation(spec, epsilon: float, mean_f: float,
                             cfg: McConfig, engine: str,
                             scfg: SplittingConfig | None
                             ) -> tuple[float, str]:
    threshold = (1.0 - epsilon) * mean_f
    if engine in ("auto", "exact"):
        try:
            return exact_log_smallball(spec, threshold), "exact"
        except (ExactUnavailable, TypeError):
            if engine == "exact":
                raise
    query = SmallBallQuery(spec, 1.0 - epsilon, "mean", mean_f)
    scfg = scfg or SplittingConfig(seed=cfg.seed)
    if engine == "splitting":
        return splitting_smallball(query, scfg).log_p, "splitting"
    res = mc_smallball(query, cfg)
    if engine == "auto" and (res.hits or 0) < 20:
        return splitting_smallball(query, scfg).log_p, "splitting"
    return res.log_p, "mc"


def smalldev_pipeline(spec, epsilon: float, cfg: McConfig | None = None,
                      sample_budget: int = 256, engine: str = "auto",
                      splitting: SplittingConfig | None = None,
                      ) -> PipelineReport:
    """Derive parameters from the measured profile, balance, bound, compare.

    delta comes from the measured gradient-mass ratio (n^delta = R), tau
    from delta^2 * epsilon / (2 C) clamped into [1/log n, 1/2], theta =
    n^{-delta/32}, h from the sampled unconditionality lower bound. Any
    clamp or hypothesis failure is flagged; the bound is computed either
    way and the validity comparison decides whether it held.
    """
    if not 0.0 < epsilon <= 0.5:
        raise ConfigError("epsilon must lie in (0, 1/2]")
    if engine not in ("auto", "exact", "mc", "splitting"):
        raise ConfigError("engine must be auto, exact, mc, or splitting")
    cfg = cfg or McConfig()
    n = spec.dim
    profile = _resolve_profile(spec, cfg)
    mean_f = profile.mean.value
    log_n = math.log(n)
    out_of_regime = 1.0 / log_n > 0.5 if n > 1 else True
    if out_of_regime:
        log_p, used = _empirical_low_deviation(spec, epsilon, mean_f, cfg,
                                               engine, splitting)
        empty = DeformationTrace(coord=np.empty(0, dtype=int),
                                 mean=np.empty(0), max_partial=np.empty(0),
                                 count=np.empty(0, dtype=int),
                                 var=np.empty(0))
        return PipelineReport(
            epsilon=epsilon, dim=n, delta=0.0, tau=0.0, tau_unclamped=0.0,
            theta=0.0, h=1.0, out_of_regime=True, tau_clamped=False,
            h_ok=False, ndelta_ok=False, hypothesis_ok=False,
            degenerate=True, converged=False, mean_f=mean_f,
            mean_upsilon=0.0, var_upsilon=0.0, log_bound=math.log(2.0),
            empirical_log_p=log_p, empirical_engine=used,
            valid=math.log(2.0) >= log_p, trace=empty)
    big_r = profile.big_r
    ndelta_possible = big_r > 1.0
    delta = (min(1.0, math.log(big_r) / log_n) if ndelta_possible
             else 1.0 / log_n)
    tau_unclamped = delta ** 2 * epsilon / (2.0 * PIPELINE_C)
    tau = min(max(tau_unclamped, 1.0 / log_n), 0.5)
    theta = n ** (-delta / 32.0)
    h = max(1.0, unc_constant_lower(spec, cfg))
    h_ok = h <= n ** (delta / 64.0)
    params = SmoothingParams(tau=tau, delta=delta, h=h, theta=theta,
                             sample_budget=sample_budget)
    outcome = balance_loop(spec, params, cfg, profile=profile)
    mean_u = float(outcome.trace.mean[-1])
    var_u = float(outcome.trace.var[-1])
    degenerate = outcome.seminorm.degenerate
    if degenerate or var_u <= 0.0:
        log_bound = math.log(2.0)
    else:
        log_bound = math.log(2.0) - epsilon ** 2 * mean_u ** 2 / (
            100.0 * var_u)
    log_p, used = _empirical_low_deviation(spec, epsilon, mean_f, cfg,
                                           engine, splitting)
    return PipelineReport(
        epsilon=epsilon, dim=n, delta=delta, tau=tau,
        tau_unclamped=tau_unclamped, theta=theta, h=h,
        out_of_regime=False, tau_clamped=tau != tau_unclamped,
        h_ok=h_ok, ndelta_ok=outcome.seminorm.ndelta_ok and ndelta_possible,
        hypothesis_ok=outcome.hypothesis_ok, degenerate=degenerate,
        converged=outcome.converged, mean_f=mean_f, mean_upsilon=mean_u,
        var_upsilon=var_u, log_bound=log_bound, empirical_log_p=log_p,
        empirical_engine=used, valid=log_bound >= log_p,
        trace=outcome.trace)


# ------------------------------------------- contracted position seminorms

@dataclass(frozen=True)
class PositionSeminorms:
    """Truncated, transformed, and diagonally contracted seminorm chain.

    u restricts functionals to quiet coordinates under an l1 cap; w is its
    drop-and-rescale transform at tau = 1; t composes w with the terminal
    contraction diagonal. The measured fields report the target properties:
    t <= 2 f on samples, E t >= E f / 4, and per-coordinate derivative
    shares of t.
    """

    base: UnconditionalPolytope
    u: UnconditionalPolytope
    w: FTransform
    t: DiagonalImage
    contraction: ContractionResult
    removed_coords: np.ndarray   # loud coordinates zeroed in every functional
    dropped_functionals: int     # rows over the l1 cap after restriction
    coord_threshold: float
    cap: float
    level: float
    degenerate: bool
    mean_f: float
    mean_u: float
    mean_w: float
    mean_t: float
    mean_ratio: float            # mean_t / mean_f, target >= 1/4
    max_t_over_f: float          # target <= 2
    sandwich_lo: float           # min w/u on samples with u > 0, target >= 1
    sandwich_hi: float           # max w/u, target <= 2
    share_vec: np.ndarray        # E|d_i t| * n / mean_f
    max_share: float
    m_spread: float              # base-norm directional-mass spread


def build_position_seminorms(fs, delta: float, share_cap: float,
                             cfg: McConfig | None = None,
                             coord_const: float = COORD_CONST,
                             quantile: float = SELECTION_QUANTILE,
                             ) -> PositionSeminorms:
    """Truncate, transform, and contract a functional set into balance.

    Coordinates with E|d_i f| >= coord_const * delta / n (in units of E f)
    are zeroed in every functional; restricted functionals survive only
    under the l1 cap coord_const * delta * quantile (same units). The
    contraction budget per coordinate is share_cap / n * E f.
    """
    if delta <= 0.0:
        raise ConfigError("delta must be positive")
    if share_cap <= 0.0:
        raise ConfigError("share_cap must be positive")
    rows = _as_rows(fs)
    n = rows.shape[1]
    cfg = cfg or McConfig()
    base = UnconditionalPolytope(rows)
    report = balance_report(base, cfg, stream="position-balance")
    mean_f = report.mean_f.value
    coord_threshold = coord_const * delta / n * mean_f
    loud = np.flatnonzero(report.a_vec >= coord_threshold)
    restricted = np.abs(rows).copy()
    restricted[:, loud] = 0.0
    l1 = restricted.sum(axis=1)
    cap = coord_const * delta * quantile * mean_f
    keep = (l1 > 0.0) & (l1 <= cap)
    kept = restricted[keep]
    u = UnconditionalPolytope(kept, dim=n)
    w = FTransform(kept, tau=1.0, dim=n)
    level = share_cap / n * mean_f
    contraction = diagonal_contraction(w, level, cfg=cfg)
    t = DiagonalImage(w, contraction.d_tilde.entries)
    x = substream(cfg.seed, "position-semi").standard_normal(
        (cfg.samples, n))
    fv = np.atleast_1d(base.eval(x))
    uv = np.atleast_1d(u.eval(x))
    wv = np.atleast_1d(w.eval(x))
    tv = np.atleast_1d(t.eval(x))
    pos = uv > 0.0
    sandwich_lo = float((wv[pos] / uv[pos]).min()) if pos.any() else 1.0
    sandwich_hi = float((wv[pos] / uv[pos]).max()) if pos.any() else 1.0
    fpos = fv > 0.0
    max_ratio = float((tv[fpos] / fv[fpos]).max()) if fpos.any() else 0.0
    share_vec = (np.abs(np.atleast_2d(t.subgradient(x))).mean(axis=0)
                 * n / mean_f)
    m_scale = np.abs(report.m_vec).mean()
    m_spread = (float(np.abs(report.m_residuals).max() / m_scale)
                if m_scale > 0 else 0.0)
    return PositionSeminorms(
        base=base, u=u, w=w, t=t, contraction=contraction,
        removed_coords=loud, dropped_functionals=int((~keep).sum()),
        coord_threshold=coord_threshold, cap=cap, level=level,
        degenerate=u.degenerate, mean_f=mean_f,
        mean_u=float(uv.mean()), mean_w=float(wv.mean()),
        mean_t=float(tv.mean()),
        mean_ratio=float(tv.mean() / mean_f) if mean_f > 0 else 0.0,
        max_t_over_f=max_ratio, sandwich_lo=sandwich_lo,
        sandwich_hi=sandwich_hi, share_vec=share_vec,
        max_share=float(share_vec.max()), m_spread=m_spread)


# -------------------------------------------------------------- shift floor

def gaussian_shift_floor(p: float, r: float) -> float:
    """Kuelbs-Li floor Phi(Phi^-1(p) - r) for the measure of A + r e_i.

    Exact for half-spaces {x_i >= a} shifted along their own normal; a
    lower bound for every other Borel set.
    """
    if not 0.0 < p < 1.0:
        raise ConfigError("p must lie in (0, 1)")
    return float(dist.norm_cdf(dist.norm_ppf(p) - r))
