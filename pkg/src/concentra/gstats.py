"""Deterministic Gaussian Monte Carlo engine and concentration profiles.

Sample sets depend only on (seed, samples, batch, antithetic): every batch
draws from a counter-derived substream keyed by (seed, batch index), and
reduction runs in batch order, so any worker count produces identical
results bit for bit.
"""
from __future__ import annotations

import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import norms
from .norms import NormSpec

__all__ = [
    "ConfigError",
    "EstimatorError",
    "ExactUnavailable",
    "McConfig",
    "EstimateCI",
    "ConcentrationProfile",
    "KwapienResult",
    "substream",
    "gaussian_batches",
    "estimate_profile",
    "exact_profile",
    "kwapien_check",
    "classic_bound",
]


class ConfigError(ValueError):
    """Invalid Monte Carlo configuration."""


class EstimatorError(RuntimeError):
    """An estimator failed to converge; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ExactUnavailable(ValueError):
    """No closed form is known for the requested family."""


@dataclass(frozen=True)
class McConfig:
    """Budget and determinism knobs for one Monte Carlo pass."""

    samples: int = 20000
    seed: int = 1
    batch: int = 64
    antithetic: bool = False
    streams: int = 1

    def __post_init__(self):
        if self.samples < 1:
            raise ConfigError("samples must be >= 1")
        if self.batch < 1 or self.samples < self.batch:
            raise ConfigError("need samples >= batch >= 1")
        if self.antithetic and self.batch % 2:
            raise ConfigError("antithetic pairing needs an even batch size")
        if self.streams < 1:
            raise ConfigError("streams must be >= 1")
        if not (0 <= self.seed < 2 ** 64):
            raise ConfigError("seed must fit in a u64")


@dataclass(frozen=True)
class EstimateCI:
    """Point estimate with a 95% normal-theory half-width."""

    value: float
    half_width: float
    n_eff: int

    def __iter__(self):
        yield self.value
        yield self.half_width


def substream(seed: int, *key) -> np.random.Generator:
    """Independent generator keyed by (seed, tag ints/strings)."""
    parts = []
    for k in key:
        if isinstance(k, str):
            parts.append(zlib.crc32(k.encode()))
        else:
            parts.append(int(k) & 0xFFFFFFFF)
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(parts))
    return np.random.Generator(np.random.PCG64(ss))


def _batch_plan(cfg: McConfig) -> list[tuple[int, int]]:
    full, rem = divmod(cfg.samples, cfg.batch)
    plan = [(i, cfg.batch) for i in range(full)]
    if rem:
        plan.append((full, rem))
    return plan


def _draw_batch(cfg: McConfig, dim: int, index: int, size: int,
                stream: str) -> np.ndarray:
    rng = substream(cfg.seed, stream, index)
    if cfg.antithetic:
        half = (size + 1) // 2
        z = rng.standard_normal((half, dim))
        return np.concatenate([z, -z], axis=0)[:size]
    return rng.standard_normal((size, dim))


def gaussian_batches(cfg: McConfig, dim: int, stream: str = "gauss"):
    """Yield (batch index, sample block) deterministically."""
    for index, size in _batch_plan(cfg):
        yield index, _draw_batch(cfg, dim, index, size, stream)


def _mean_ci(batch_values: np.ndarray, n_eff: int) -> EstimateCI:
    b = batch_values.size
    value = float(batch_values.mean())
    hw = 0.0 if b < 2 else 1.96 * float(batch_values.std(ddof=1)) / math.sqrt(b)
    return EstimateCI(value, hw, n_eff)


def _vector_ci(s1: np.ndarray, s2: np.ndarray, b: int):
    mean = s1 / b
    if b < 2:
        return mean, np.zeros_like(mean)
    var = np.maximum(s2 / b - mean * mean, 0.0) * b / (b - 1)
    return mean, 1.96 * np.sqrt(var / b)


@dataclass(frozen=True)
class ProfilePass:
    """Raw per-batch statistics of one common-random-numbers sweep."""

    cfg: McConfig
    dim: int
    bm_f: np.ndarray            # per-batch mean of f
    bm_gsq: np.ndarray          # per-batch mean of |grad f|_2^2
    bm_euler: np.ndarray        # per-batch mean of <x, grad f(x)>
    values: np.ndarray          # pooled f values, batch order
    batch_sizes: np.ndarray
    abs_grad_s1: np.ndarray     # per-coordinate batch-mean sums, E|d_i f|
    abs_grad_s2: np.ndarray
    xg_s1: np.ndarray           # per-coordinate sums for E(x_i d_i f)
    xg_s2: np.ndarray
    xgf_s1: np.ndarray          # per-coordinate sums for E(x_i d_i f * f)
    xgf_s2: np.ndarray
    max_grad_norm: float

    @property
    def n_batches(self) -> int:
        return self.bm_f.size


def _batch_stats(spec: NormSpec, cfg: McConfig, index: int, size: int,
                 stream: str, want_xgf: bool) -> dict:
    x = _draw_batch(cfg, spec.dim, index, size, stream)
    v = np.atleast_1d(spec.eval(x))
    g = np.atleast_2d(spec.subgradient(x))
    gsq = np.einsum("ij,ij->i", g, g)
    xg = x * g
    out = {
        "index": index,
        "size": size,
        "bm_f": v.mean(),
        "bm_gsq": gsq.mean(),
        "bm_euler": xg.sum(axis=1).mean(),
        "values": v,
        "abs_g": np.abs(g).mean(axis=0),
        "xg": xg.mean(axis=0),
        "max_gn": float(np.sqrt(gsq.max())),
    }
    if want_xgf:
        out["xgf"] = (xg * v[:, None]).mean(axis=0)
    return out


def profile_pass(spec: NormSpec, cfg: McConfig, stream: str = "gauss",
                 want_xgf: bool = False) -> ProfilePass:
    """One deterministic sweep collecting every profile statistic at once."""
    plan = _batch_plan(cfg)
    if cfg.streams > 1:
        with ThreadPoolExecutor(max_workers=cfg.streams) as pool:
            results = list(pool.map(
                lambda p: _batch_stats(spec, cfg, p[0], p[1], stream,
                                       want_xgf), plan))
        results.sort(key=lambda r: r["index"])
    else:
        results = [_batch_stats(spec, cfg, i, s, stream, want_xgf)
                   for i, s in plan]

    n = spec.dim
    bm_f = np.array([r["bm_f"] for r in results])
    bm_gsq = np.array([r["bm_gsq"] for r in results])
    bm_euler = np.array([r["bm_euler"] for r in results])
    sizes = np.array([r["size"] for r in results])
    values = np.concatenate([r["values"] for r in results])
    abs_s1 = np.zeros(n)
    abs_s2 = np.zeros(n)
    xg_s1 = np.zeros(n)
    xg_s2 = np.zeros(n)
    xgf_s1 = np.zeros(n)
    xgf_s2 = np.zeros(n)
    max_gn = 0.0
    for r in results:
        abs_s1 += r["abs_g"]
        abs_s2 += r["abs_g"] ** 2
        xg_s1 += r["xg"]
        xg_s2 += r["xg"] ** 2
        if want_xgf:
            xgf_s1 += r["xgf"]
            xgf_s2 += r["xgf"] ** 2
        max_gn = max(max_gn, r["max_gn"])
    return ProfilePass(cfg, n, bm_f, bm_gsq, bm_euler, values, sizes,
                       abs_s1, abs_s2, xg_s1, xg_s2, xgf_s1, xgf_s2, max_gn)


def _median_ci(values: np.ndarray, antithetic: bool,
               batch_sizes: np.ndarray) -> EstimateCI:
    if antithetic:
        # norms are even, so mirrored pairs duplicate values; dedupe to the
        # fresh half of each batch for honest order-statistic ranks
        parts, off = [], 0
        for s in batch_sizes:
            parts.append(values[off:off + (int(s) + 1) // 2])
            off += int(s)
        vals = np.concatenate(parts)
    else:
        vals = values
    vals = np.sort(vals)
    m = vals.size
    med = float(np.median(vals))
    spread = 1.96 * math.sqrt(m * 0.25)
    lo = max(0, int(math.floor(m / 2.0 - spread)))
    hi = min(m - 1, int(math.ceil(m / 2.0 + spread)))
    return EstimateCI(med, float(vals[hi] - vals[lo]) / 2.0, m)


@dataclass(frozen=True)
class ConcentrationProfile:
    """First-order Gaussian statistics of a norm plus derived ratios.

    k = (E f / Lip)^2, beta = Var/(E f)^2, beta_tilde = E|grad|^2/(E f)^2,
    s = Var/E|grad|^2, big_r = E|grad|^2 / sum_i a_i^2,
    l_ratio = sum_i a_i^2/(E f)^2 with a_i = E|d_i f|.
    """

    dim: int
    mean: EstimateCI
    variance: EstimateCI
    median: EstimateCI
    lip: float
    lip_is_exact: bool
    grad_l2_sq: EstimateCI
    a_vec: np.ndarray
    a_half_width: np.ndarray
    k: float
    beta: float
    beta_tilde: float
    s: float
    big_r: float
    l_ratio: float
    provenance: str = "estimate"

    @property
    def sum_a_sq(self) -> float:
        return float((self.a_vec * self.a_vec).sum())


def _derive(dim, mean, variance, median, lip, lip_exact_flag, gsq, a_vec,
            a_hw, provenance) -> ConcentrationProfile:
    m2 = mean.value ** 2
    suma2 = float((np.asarray(a_vec) ** 2).sum())
    return ConcentrationProfile(
        dim=dim, mean=mean, variance=variance, median=median,
        lip=lip, lip_is_exact=lip_exact_flag, grad_l2_sq=gsq,
        a_vec=np.asarray(a_vec, dtype=float),
        a_half_width=np.asarray(a_hw, dtype=float),
        k=m2 / lip ** 2,
        beta=variance.value / m2,
        beta_tilde=gsq.value / m2,
        s=variance.value / gsq.value,
        big_r=gsq.value / suma2,
        l_ratio=suma2 / m2,
        provenance=provenance,
    )


def estimate_profile(spec: NormSpec, cfg: McConfig,
                     stream: str = "gauss") -> ConcentrationProfile:
    """Monte Carlo concentration profile with common random numbers."""
    p = profile_pass(spec, cfg, stream=stream)
    mean = _mean_ci(p.bm_f, cfg.samples)
    gsq = _mean_ci(p.bm_gsq, cfg.samples)
    # variance: pooled two-pass estimate, CI from per-batch second moments
    mu = mean.value
    b_var = []
    off = 0
    for s in p.batch_sizes:
        chunk = p.values[off:off + int(s)]
        b_var.append(((chunk - mu) ** 2).mean())
        off += int(s)
    b_var = np.array(b_var)
    nb = b_var.size
    var_hw = 0.0 if nb < 2 else 1.96 * float(b_var.std(ddof=1)) / math.sqrt(nb)
    var_val = float(((p.values - mu) ** 2).sum() / max(1, cfg.samples - 1))
    variance = EstimateCI(var_val, var_hw, cfg.samples)
    median = _median_ci(p.values, cfg.antithetic, p.batch_sizes)
    lip = norms.lip_exact(spec)
    lip_flag = lip is not None
    if lip is None:
        lip = p.max_grad_norm
    a_vec, a_hw = _vector_ci(p.abs_grad_s1, p.abs_grad_s2, p.n_batches)
    return _derive(spec.dim, mean, variance, median, lip, lip_flag, gsq,
                   a_vec, a_hw, "estimate")


def exact_profile(spec: NormSpec) -> ConcentrationProfile:
    """Closed-form profile for l1, l2, sup, weighted sup."""
    from . import dist

    n = spec.dim
    zero = np.zeros(n)

    def ci(v):
        return EstimateCI(float(v), 0.0, 0)

    if isinstance(spec, norms.LpNorm) and spec.p == 2.0:
        mean, var, med = dist.chi_mean(n), dist.chi_var(n), dist.chi_median(n)
        gsq = 1.0
        a = np.full(n, dist.HALF_NORMAL_MEAN / mean)
    elif isinstance(spec, norms.LpNorm) and spec.p == 1.0:
        mean, var, med = dist.l1_mean(n), dist.l1_var(n), dist.l1_median(n)
        gsq = float(n)
        a = np.ones(n)
    elif isinstance(spec, norms.SupNorm):
        mean, var, med = (dist.maxabs_mean(n), dist.maxabs_var(n),
                          dist.maxabs_median(n))
        gsq = 1.0
        a = np.full(n, 1.0 / n)
    elif isinstance(spec, norms.WeightedSup):
        w = spec.weights
        mean, var, med = (dist.wmaxabs_mean(w), dist.wmaxabs_var(w),
                          dist.wmaxabs_median(w))
        probs = dist.wmaxabs_argmax_probs(w)
        gsq = float((w * w * probs).sum())
        a = w * probs
    else:
        raise ExactUnavailable(
            f"no closed-form profile for family {spec.family!r}")
    lip = norms.lip_exact(spec)
    return _derive(n, ci(mean), ci(var), ci(med), float(lip), True, ci(gsq),
                   a, zero, "exact")


@dataclass(frozen=True)
class KwapienResult:
    passed: bool
    margin: EstimateCI
    mean: EstimateCI
    median: EstimateCI


def kwapien_check(spec: NormSpec, cfg: McConfig) -> KwapienResult:
    """mean >= median up to three combined half-widths."""
    prof = estimate_profile(spec, cfg)
    hw = math.hypot(prof.mean.half_width, prof.median.half_width)
    margin = prof.mean.value - prof.median.value
    return KwapienResult(margin >= -3.0 * hw,
                         EstimateCI(margin, hw, cfg.samples),
                         prof.mean, prof.median)


def classic_bound(profile: ConcentrationProfile, eps: float,
                  side: str = "lower") -> float:
    """Classic concentration tail exp(-eps^2 k / 2) at relative deviation eps."""
    if not (eps > 0.0):
        raise ConfigError("eps must be positive")
    if side not in ("lower", "upper", "two"):
        raise ConfigError("side must be lower, upper, or two")
    v = math.exp(-eps * eps * profile.k / 2.0)
    return min(1.0, 2.0 * v) if side == "two" else min(1.0, v)
