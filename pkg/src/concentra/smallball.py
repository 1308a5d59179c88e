"""Small-ball probabilities P{f(G) <= delta * anchor} and proved bounds.

Three evaluation engines (closed-form oracles for the product and chi
families, naive Monte Carlo, adaptive multilevel splitting for rare events)
plus evaluators for every upper bound the estimates are compared against.
All rare-event arithmetic is carried in log scale; probabilities as small as
e^{-1000} round-trip exactly through log_p even where the plain probability
underflows.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import dist
from .gstats import (ConcentrationProfile, ConfigError, EstimatorError,
                     ExactUnavailable, McConfig, estimate_profile,
                     exact_profile, gaussian_batches, substream)
from .norms import LpNorm, NormSpec, SupNorm, WeightedSup
from .ou import beta_decay_bounds

__all__ = [
    "SmallBallQuery",
    "SplittingConfig",
    "SmallBallResult",
    "BoundReport",
    "ScalingStudy",
    "exact_smallball",
    "exact_log_smallball",
    "mc_smallball",
    "splitting_smallball",
    "d_param",
    "bound_report",
    "scaling_study",
    "lower_smalldev_exact_linf",
    "pcn_gof_pvalue",
]


# ---------------------------------------------------------------- oracles

def exact_log_smallball(spec: NormSpec, t: float) -> float:
    """log P{f(G) <= t} for the four closed-form families."""
    if t <= 0:
        raise ConfigError("threshold must be positive")
    if isinstance(spec, SupNorm):
        return dist.maxabs_logcdf(spec.dim, t)
    if isinstance(spec, WeightedSup):
        return dist.wmaxabs_logcdf(spec.weights, t)
    if isinstance(spec, LpNorm) and spec.p == 2.0:
        return dist.chi_logcdf(spec.dim, t)
    if isinstance(spec, LpNorm) and spec.p == 1.0:
        return dist.l1_logcdf(spec.dim, t)
    raise ExactUnavailable(f"no closed-form small-ball law for {spec!r}")


def exact_smallball(spec: NormSpec, t: float) -> float:
    """P{f(G) <= t}; 0.0 when the probability underflows a double."""
    return math.exp(exact_log_smallball(spec, t))


def _exact_anchor(spec: NormSpec, anchor: str) -> float:
    prof = exact_profile(spec)
    return prof.mean.value if anchor == "mean" else prof.median.value


# ----------------------------------------------------------------- types

@dataclass(frozen=True)
class SmallBallQuery:
    """One small-ball event {f(G) <= delta * anchor_value}."""

    spec: NormSpec
    delta: float
    anchor: str                  # "mean" or "median"
    anchor_value: float

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0, 1)")
        if self.anchor not in ("mean", "median"):
            raise ConfigError("anchor must be 'mean' or 'median'")
        if not self.anchor_value > 0:
            raise ConfigError("anchor_value must be positive")

    @property
    def threshold(self) -> float:
        return self.delta * self.anchor_value

    @classmethod
    def resolve(cls, spec: NormSpec, delta: float, anchor: str = "mean",
                cfg: McConfig | None = None) -> "SmallBallQuery":
        """Fill anchor_value from the exact profile when the family has one,
        otherwise from a Monte Carlo profile."""
        try:
            value = _exact_anchor(spec, anchor)
        except ExactUnavailable:
            prof = estimate_profile(spec, cfg or McConfig())
            value = (prof.mean if anchor == "mean" else prof.median).value
        return cls(spec, delta, anchor, value)


@dataclass(frozen=True)
class SplittingConfig:
    rho: float = 0.1
    per_level_samples: int = 1000
    pcn_beta: float = 0.5
    mcmc_steps_per_sample: int = 10
    seed: int = 1
    max_levels: int = 400

    def __post_init__(self):
        if not 0.05 < self.rho <= 0.5:
            raise ConfigError("rho must lie in (0.05, 0.5]")
        if self.per_level_samples < 1000:
            raise ConfigError("per_level_samples must be >= 1000")
        if not 0.0 < self.pcn_beta < 1.0:
            raise ConfigError("pcn_beta must lie in (0, 1)")
        if self.mcmc_steps_per_sample < 1:
            raise ConfigError("mcmc_steps_per_sample must be >= 1")
        if self.max_levels < 1:
            raise ConfigError("max_levels must be >= 1")


@dataclass(frozen=True)
class SmallBallResult:
    log_p: float
    log_p_hw: float
    levels: np.ndarray           # strictly decreasing intermediate levels
    accept_rates: np.ndarray
    engine: str
    n_samples: int
    hits: int | None = None
    log_p_upper: float | None = None
    advice: str | None = None

    def __post_init__(self):
        if self.log_p > 0.0:
            raise ConfigError("log_p must be <= 0")
        lv = np.asarray(self.levels, dtype=float)
        if lv.size > 1 and not np.all(np.diff(lv) < 0):
            raise ConfigError("levels must be strictly decreasing")


# -------------------------------------------------------------- naive MC

def mc_smallball(query: SmallBallQuery, cfg: McConfig) -> SmallBallResult:
    """Naive frequency estimate with a Wilson interval on the log scale."""
    t = query.threshold
    hits = 0
    total = 0
    for _, x in gaussian_batches(cfg, query.spec.dim, stream="smallball"):
        vals = np.atleast_1d(query.spec.eval(x))
        hits += int((vals <= t).sum())
        total += vals.size
    z = 1.96
    phat = hits / total
    denom = 1.0 + z * z / total
    center = (phat + z * z / (2 * total)) / denom
    hw = (z / denom) * math.sqrt(
        phat * (1 - phat) / total + z * z / (4 * total * total))
    lo, hi = max(center - hw, 0.0), min(center + hw, 1.0)
    if hits == 0:
        return SmallBallResult(
            log_p=-math.inf, log_p_hw=math.inf,
            levels=np.array([t]), accept_rates=np.array([]),
            engine="mc", n_samples=total, hits=0,
            log_p_upper=math.log(hi),
            advice="no hits at this budget; use splitting_smallball")
    log_p = math.log(phat)
    log_hw = 0.5 * (math.log(hi) - math.log(max(lo, 1e-300)))
    advice = None
    if hits < 20:
        advice = (f"only {hits} hits; the Wilson interval is loose, "
                  "prefer splitting_smallball")
    return SmallBallResult(
        log_p=min(log_p, 0.0), log_p_hw=log_hw,
        levels=np.array([t]), accept_rates=np.array([]),
        engine="mc", n_samples=total, hits=hits,
        log_p_upper=math.log(hi), advice=advice)


# -------------------------------------------------- multilevel splitting

def _mutate(spec, x, vals, level, beta, steps, rng):
    """pCN sweeps restricted to {f <= level}; returns new states and the
    acceptance rate. The proposal is the Mehler kernel with
    e^{-t} = sqrt(1 - beta^2), so the Gaussian law is invariant."""
    keep = math.sqrt(1.0 - beta * beta)
    accepted = 0
    n, d = x.shape
    for _ in range(steps):
        prop = keep * x + beta * rng.standard_normal((n, d))
        pv = np.atleast_1d(spec.eval(prop))
        ok = pv <= level
        x = np.where(ok[:, None], prop, x)
        vals = np.where(ok, pv, vals)
        accepted += int(ok.sum())
    return x, vals, accepted / (n * steps)


def _split_once(query: SmallBallQuery, scfg: SplittingConfig, rep: int):
    spec, t = query.spec, query.threshold
    n = scfg.per_level_samples
    rng = substream(scfg.seed, "split", rep)
    x = rng.standard_normal((n, spec.dim))
    vals = np.atleast_1d(spec.eval(x))
    m = int(math.floor(scfg.rho * n))
    beta = scfg.pcn_beta
    log_p = 0.0
    levels: list[float] = []
    rates: list[float] = []
    for _ in range(scfg.max_levels):
        frac = float((vals <= t).mean())
        if frac >= scfg.rho:
            if frac == 0.0:
                raise EstimatorError(
                    "splitting stalled: no mass at the target level",
                    {"levels": levels, "threshold": t})
            return log_p + math.log(frac), levels, rates
        order = np.argsort(vals, kind="stable")
        level = float(vals[order[m - 1]])
        if levels and level >= levels[-1]:
            raise EstimatorError(
                "splitting stalled: level failed to decrease",
                {"levels": levels, "stuck_at": level})
        if level <= t:
            # quantile dipped below the target: finish on the raw fraction
            if frac == 0.0:
                raise EstimatorError(
                    "splitting stalled: no mass at the target level",
                    {"levels": levels, "threshold": t})
            return log_p + math.log(frac), levels, rates
        levels.append(level)
        log_p += math.log(m / n)
        idx = order[:m]
        boot = rng.integers(0, m, size=n)
        x_new = x[idx][boot]
        v_new = vals[idx][boot]
        x_try, v_try, rate = _mutate(spec, x_new, v_new, level, beta,
                                     scfg.mcmc_steps_per_sample, rng)
        if rate < 0.05:
            # one adaptation per level, carried to later levels; mixing
            # stays healthy because the constraint tightens slowly per level
            beta = beta / 2.0
            x_try, v_try, rate = _mutate(spec, x_new, v_new, level, beta,
                                         scfg.mcmc_steps_per_sample, rng)
            if rate < 0.05:
                raise EstimatorError(
                    "pCN acceptance collapsed",
                    {"level": level, "acceptance": rate, "beta": beta,
                     "levels_done": len(levels)})
        x, vals = x_try, v_try
        rates.append(rate)
    raise EstimatorError("splitting exceeded max_levels",
                         {"levels_done": len(levels), "last_level": levels[-1]})


def splitting_smallball(query: SmallBallQuery,
                        scfg: SplittingConfig) -> SmallBallResult:
    """Adaptive multilevel splitting estimate of log P{f <= threshold}.

    Three independent replications run concurrently; the reported half-width
    is the replication spread, which absorbs chain-correlation effects the
    per-level counts cannot see.
    """
    reps = 3
    with ThreadPoolExecutor(max_workers=reps) as pool:
        outs = list(pool.map(lambda r: _split_once(query, scfg, r),
                             range(reps)))
    logs = np.array([o[0] for o in outs])
    hw = 1.96 * float(logs.std(ddof=1)) / math.sqrt(reps)
    return SmallBallResult(
        log_p=min(float(logs.mean()), 0.0), log_p_hw=hw,
        levels=np.array(outs[0][1]), accept_rates=np.array(outs[0][2]),
        engine="splitting",
        n_samples=reps * scfg.per_level_samples)


# ------------------------------------------------------- derived numbers

def d_param(spec: NormSpec, delta: float, log_p: float | None = None) -> float:
    """d(f, delta) = min(n, -log P{f <= delta * median}).

    Uses the closed-form law when the family has one; otherwise the caller
    supplies log_p (estimated at the median anchor).
    """
    if not 0.0 < delta < 1.0:
        raise ConfigError("delta must lie in (0, 1)")
    if log_p is None:
        med = _exact_anchor(spec, "median")
        log_p = exact_log_smallball(spec, delta * med)
    return float(min(spec.dim, -log_p))


@dataclass(frozen=True)
class BoundReport:
    """Every proved upper bound on one small-ball event, in log scale.

    None entries mark bounds whose hypotheses the query does not meet
    (flags say which); ``exact_log_p`` is attached when the family has a
    closed-form law.
    """

    delta: float
    anchor: str
    threshold: float
    classic_log: float
    kv_log: float | None
    kv_eps_median: float
    hyper_sb_log: float | None
    super_sb_log: float | None
    t_star_hyper: float | None
    t_star_super: float | None
    lo_exponent: dict
    exact_log_p: float | None
    out_of_regime: bool          # delta >= 1/2: smoothing bounds skipped
    kv_out_of_range: bool        # median-relative ratio >= 1/2

    @property
    def classic(self) -> float:
        return math.exp(self.classic_log)

    @property
    def kv(self) -> float | None:
        return None if self.kv_log is None else math.exp(self.kv_log)

    @property
    def hyper_sb(self) -> float | None:
        return None if self.hyper_sb_log is None else math.exp(self.hyper_sb_log)

    @property
    def super_sb(self) -> float | None:
        return None if self.super_sb_log is None else math.exp(self.super_sb_log)


def _grid_min(delta: float, floors, weight: float) -> tuple[float, float] | None:
    """Minimize exp(-eps(t)^2 * floor(t) * weight) over the t grid."""
    t_hi = math.log(1.0 / delta)
    grid = np.geomspace(t_hi / 1e4, t_hi, 200)
    best = None
    for t in grid:
        q = math.exp(-t)
        eps = 1.0 - delta * q - math.sqrt(-math.expm1(-2.0 * t))
        if eps <= 0.0:
            continue
        log_b = -eps * eps * floors(t) * weight
        if best is None or log_b < best[0]:
            best = (log_b, t)
    return best


def bound_report(profile: ConcentrationProfile, query: SmallBallQuery,
                 d_at_half: float | None = None) -> BoundReport:
    """Evaluate all proved upper bounds for P{f <= delta * anchor}.

    The median-ratio bound (kv) needs d_at_half = d(f, 1/2); a mean-anchored
    query is converted to median units explicitly, with the ratio used
    reported as kv_eps_median.
    """
    delta = query.delta
    eps_dev = 1.0 - delta
    classic_log = min(0.0, -0.5 * eps_dev * eps_dev * profile.k)

    if query.anchor == "median":
        eps_med = delta
    else:
        eps_med = delta * profile.mean.value / profile.median.value
    kv_out = eps_med >= 0.5
    kv_log = None
    if d_at_half is not None and not kv_out:
        expo = (d_at_half - math.log(2.0)) / math.log(2.0)
        kv_log = min(0.0, math.log(0.5) + expo * math.log(eps_med))

    out_of_regime = delta >= 0.5
    hyper = super_ = None
    if not out_of_regime:
        hyper = _grid_min(
            delta, lambda t: beta_decay_bounds(profile, t).inv_beta_tilde_floor,
            1.0)
        super_ = _grid_min(
            delta, lambda t: beta_decay_bounds(profile, t).inv_beta_floor,
            0.01)

    try:
        exact_log = exact_log_smallball(query.spec, query.threshold)
    except ExactUnavailable:
        exact_log = None

    return BoundReport(
        delta=delta, anchor=query.anchor, threshold=query.threshold,
        classic_log=classic_log,
        kv_log=kv_log, kv_eps_median=eps_med,
        hyper_sb_log=None if hyper is None else min(0.0, hyper[0]),
        super_sb_log=None if super_ is None else min(0.0, super_[0]),
        t_star_hyper=None if hyper is None else hyper[1],
        t_star_super=None if super_ is None else super_[1],
        lo_exponent={"eps": delta, "k": profile.k},
        exact_log_p=exact_log,
        out_of_regime=out_of_regime,
        kv_out_of_range=kv_out,
    )


# ----------------------------------------------------------- studies

@dataclass(frozen=True)
class ScalingStudy:
    delta: float
    engine: str
    n_list: list[int]
    log_p: np.ndarray
    log_p_hw: np.ndarray
    gamma_hat: float             # slope of log(-log p) against log n
    rows: list[dict] = field(repr=False, default_factory=list)

    def to_csv(self) -> str:
        lines = ["n,delta,engine,log_p,hw"]
        for r in self.rows:
            lines.append(",".join([str(r["n"]), repr(r["delta"]), r["engine"],
                                   repr(r["log_p"]), repr(r["hw"])]))
        return "\n".join(lines) + "\n"


def scaling_study(family, delta: float, n_list, engine: str = "exact",
                  scfg: SplittingConfig | None = None,
                  cfg: McConfig | None = None) -> ScalingStudy:
    """Fit the growth exponent of -log P{f <= delta * mean} across dimensions.

    ``family`` maps n to a NormSpec. Engines: "exact" (closed-form laws) or
    "splitting". A failed estimate aborts the study; the error carries the
    completed rows.
    """
    n_list = [int(n) for n in n_list]
    if len(n_list) < 4:
        raise ConfigError("need at least 4 dimensions")
    if any(n < 1 or n & (n - 1) for n in n_list):
        raise ConfigError("dimensions must be dyadic (powers of two)")
    if engine not in ("exact", "splitting"):
        raise ConfigError("engine must be 'exact' or 'splitting'")
    rows: list[dict] = []
    logs, hws = [], []
    for i, n in enumerate(sorted(n_list)):
        spec = family(n)
        try:
            if engine == "exact":
                query = SmallBallQuery.resolve(spec, delta, "mean")
                lp, hw = exact_log_smallball(spec, query.threshold), 0.0
            else:
                query = SmallBallQuery.resolve(spec, delta, "mean",
                                               cfg or McConfig())
                base = scfg or SplittingConfig()
                res = splitting_smallball(
                    query, SplittingConfig(
                        rho=base.rho,
                        per_level_samples=base.per_level_samples,
                        pcn_beta=base.pcn_beta,
                        mcmc_steps_per_sample=base.mcmc_steps_per_sample,
                        seed=base.seed + i,
                        max_levels=base.max_levels))
                lp, hw = res.log_p, res.log_p_hw
        except (ExactUnavailable, EstimatorError) as err:
            raise EstimatorError(
                f"scaling study failed at n={n}: {err}",
                {"completed": rows}) from err
        rows.append({"n": n, "delta": delta, "engine": engine,
                     "log_p": lp, "hw": hw})
        logs.append(lp)
        hws.append(hw)
    xs = np.log(np.array(sorted(n_list), dtype=float))
    ys = np.log(-np.array(logs))
    gamma = float(np.polyfit(xs, ys, 1)[0])
    return ScalingStudy(delta, engine, sorted(n_list), np.array(logs),
                        np.array(hws), gamma, rows)


def lower_smalldev_exact_linf(n: int, eps: float) -> float:
    """P{max_i |G_i| < (1 - eps) * E max_i |G_i|}, all pieces exact."""
    if not 0.0 < eps < 0.5:
        raise ConfigError("eps must lie in (0, 1/2)")
    m = dist.maxabs_mean(n)
    return math.exp(dist.maxabs_logcdf(n, (1.0 - eps) * m))


# ------------------------------------------------------------ GOF check

def pcn_gof_pvalue(dim: int, chains: int = 4000, steps: int = 50,
                   beta: float = 0.5, seed: int = 1, bins: int = 32) -> float:
    """Chi-square goodness of fit of unconstrained pCN final states.

    The proposal is Gaussian-invariant, so final coordinates must be
    standard normal; returns the chi-square p-value over equiprobable bins.
    """
    rng = substream(seed, "pcn-gof")
    x = rng.standard_normal((chains, dim))
    keep = math.sqrt(1.0 - beta * beta)
    for _ in range(steps):
        x = keep * x + beta * rng.standard_normal((chains, dim))
    pooled = x.reshape(-1)
    edges = dist.norm_ppf(np.linspace(0.0, 1.0, bins + 1))
    counts, _ = np.histogram(pooled, bins=edges)
    expected = pooled.size / bins
    stat = float(((counts - expected) ** 2 / expected).sum())
    return float(stats.chi2.sf(stat, bins - 1))
