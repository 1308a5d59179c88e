"""Canonical positions for norms: coordinate balancing and contraction.

Three related diagnostics and transforms. balance_report measures how far a
norm is from coordinate balance (equal E|d_i f|), together with the
integration-by-parts statistics E(G_i d_i f) and E(G_i d_i f * f) that
define the other two classical positions. w11_solve finds a positive
diagonal map making the norm balanced. diagonal_contraction integrates the
shrinking-diagonal dynamics that zero out coordinates where a seminorm's
directional mass exceeds a budget L, leaving every surviving entry at 1/2 or
above.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gstats import (ConfigError, EstimateCI, EstimatorError, McConfig,
                     _mean_ci, _vector_ci, profile_pass, substream)
from .norms import FunctionalSet, PolytopeNorm

__all__ = [
    "BalanceReport",
    "DiagonalMap",
    "ContractionResult",
    "balance_report",
    "w11_solve",
    "diagonal_contraction",
]


@dataclass(frozen=True)
class BalanceReport:
    """Per-coordinate position statistics of a norm under the Gaussian."""

    dim: int
    a_vec: np.ndarray            # E|d_i f|
    a_half_width: np.ndarray
    spread: float                # max_i |a_i / abar - 1|
    m_vec: np.ndarray            # E(G_i d_i f)
    m_half_width: np.ndarray
    m_residuals: np.ndarray      # m_vec - mean(m_vec), sums to 0
    ell_vec: np.ndarray          # E(G_i d_i f * f)
    ell_half_width: np.ndarray
    ell_residuals: np.ndarray
    mean_f: EstimateCI
    grad_mass_total: EstimateCI  # sum_i E(G_i d_i f); equals E f by parts

    def to_csv(self) -> str:
        lines = ["i,a,a_hw,m_resid,m_hw,ell_resid,ell_hw"]
        for i in range(self.dim):
            lines.append(",".join([str(i)] + [repr(float(c)) for c in (
                self.a_vec[i], self.a_half_width[i],
                self.m_residuals[i], self.m_half_width[i],
                self.ell_residuals[i], self.ell_half_width[i])]))
        return "\n".join(lines) + "\n"


def balance_report(spec, cfg: McConfig, stream: str = "balance") -> BalanceReport:
    """Measure coordinate balance and position residuals with CRN."""
    pp = profile_pass(spec, cfg, stream=stream, want_xgf=True)
    b = pp.n_batches
    a_vec, a_hw = _vector_ci(pp.abs_grad_s1, pp.abs_grad_s2, b)
    m_vec, m_hw = _vector_ci(pp.xg_s1, pp.xg_s2, b)
    ell_vec, ell_hw = _vector_ci(pp.xgf_s1, pp.xgf_s2, b)
    abar = float(a_vec.mean())
    if abar <= 0:
        raise ConfigError("degenerate norm: all E|d_i f| vanish")
    spread = float(np.abs(a_vec / abar - 1.0).max())
    return BalanceReport(
        dim=pp.dim,
        a_vec=a_vec, a_half_width=a_hw, spread=spread,
        m_vec=m_vec, m_half_width=m_hw,
        m_residuals=m_vec - m_vec.mean(),
        ell_vec=ell_vec, ell_half_width=ell_hw,
        ell_residuals=ell_vec - ell_vec.mean(),
        mean_f=_mean_ci(pp.bm_f, cfg.samples),
        grad_mass_total=_mean_ci(pp.bm_euler, cfg.samples),
    )


@dataclass(frozen=True)
class DiagonalMap:
    """Positive diagonal coordinate scaling (zeros allowed for contractions)."""

    entries: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=float)
        if e.ndim != 1 or e.size == 0 or np.any(e < 0) or not np.all(
                np.isfinite(e)):
            raise ConfigError("diagonal entries must be finite and >= 0")
        e = e.copy()
        e.flags.writeable = False
        object.__setattr__(self, "entries", e)

    @property
    def dim(self) -> int:
        return self.entries.size

    def geometric_mean(self) -> float:
        if np.any(self.entries == 0):
            return 0.0
        return float(np.exp(np.log(self.entries).mean()))

    def to_dict(self) -> dict:
        return {"lambda": [float(v) for v in self.entries]}


def _spread_of(lam: np.ndarray, x: np.ndarray, spec) -> tuple[np.ndarray, float]:
    g = np.atleast_2d(spec.subgradient(x * lam))
    a = lam * np.abs(g).mean(axis=0)
    abar = a.mean()
    if abar <= 0:
        raise EstimatorError("balancing collapsed: all coordinates inactive",
                             {"lambda": lam.tolist()})
    return a, float(np.abs(a / abar - 1.0).max())


def w11_solve(spec, cfg: McConfig, tol: float = 0.02,
              max_iter: int = 60) -> tuple[DiagonalMap, int]:
    """Find a diagonal map making E|d_i f| equal across coordinates.

    Damped multiplicative fixed point lambda_i <- lambda_i (abar/a_i)^damp
    on one fixed Gaussian block, renormalized to geometric mean 1 each
    step. The ratio is clamped to [1/4, 4] so a coordinate the block never
    activates (a_i = 0) still grows geometrically, and the damping halves
    whenever a step fails to shrink the spread (max norms react steeply to
    reweighting, so a fixed exponent oscillates). Returns the map and the
    number of iterations used. Raises EstimatorError (carrying the last
    spread) if tol is not reached in max_iter steps.
    """
    if not 0.0 < tol < 0.5:
        raise ConfigError("tol must lie in (0, 0.5)")
    if max_iter < 1:
        raise ConfigError("max_iter must be >= 1")
    n = spec.dim
    x = substream(cfg.seed, "w11").standard_normal((cfg.samples, n))
    lam = np.ones(n)
    a, spread = _spread_of(lam, x, spec)
    damp = 0.5
    for it in range(max_iter):
        if spread <= tol:
            return DiagonalMap(lam), it
        with np.errstate(divide="ignore"):
            step = np.clip(a.mean() / a, 0.25, 4.0) ** damp
        cand = lam * step
        cand = cand / np.exp(np.log(cand).mean())
        a2, spread2 = _spread_of(cand, x, spec)
        if spread2 < spread:
            lam, a, spread = cand, a2, spread2
            damp = min(damp * 1.2, 0.5)
        else:
            damp *= 0.5
    if spread <= tol:
        return DiagonalMap(lam), max_iter
    raise EstimatorError(
        f"balancing did not reach spread <= {tol} in {max_iter} iterations",
        {"last_spread": spread, "lambda": lam.tolist()})


@dataclass(frozen=True)
class ContractionResult:
    """Terminal state of the shrinking-diagonal dynamics."""

    d_tilde: DiagonalMap
    zero_set: np.ndarray         # indices with terminal entry exactly 0
    converged: bool
    t_final: float
    steps: int
    trace_t: np.ndarray
    trace_d: np.ndarray          # (steps+1, n) path of the diagonal
    trace_force: np.ndarray      # max_i |H_i| per step
    mean_v: float                # E V(G) on the driving block
    zero_bound: float            # 2 E V(G) / L
    zero_bound_ok: bool
    in_terminal_range: bool      # entries in {0} or [1/2 - 2h, 1]


def diagonal_contraction(seminorm, level: float, step: float = 0.02,
                         t_max: float = 30.0, cfg: McConfig | None = None,
                         tol_force: float = 1e-3) -> ContractionResult:
    """Integrate d'_i = -max(0, E(G_i d_i[V(D G)]) - level) - gap(d_i).

    ``seminorm`` is a FunctionalSet (max of |<v_j, .>|) or any object with
    eval/subgradient/dim. The gap force gap(d) = max(0, 1/4 - |d - 1/4|)
    pushes entries below 1/2 all the way to 0, so terminal entries split
    into a zero set and a set of entries >= 1/2 - 2*step whose directional
    mass E(G_i d_i[V(D G)]) is at most level (up to tol_force). The size of
    the zero set is checked against 2 E V(G) / level.
    """
    if isinstance(seminorm, FunctionalSet):
        seminorm = PolytopeNorm(seminorm)
    if level <= 0:
        raise ConfigError("level must be positive")
    if not 0 < step <= 0.05:
        raise ConfigError("step must lie in (0, 0.05]")
    cfg = cfg or McConfig()
    n = seminorm.dim
    x = substream(cfg.seed, "contract").standard_normal((cfg.samples, n))
    mean_v = float(np.atleast_1d(seminorm.eval(x)).mean())

    def force(d):
        g = np.atleast_2d(seminorm.subgradient(x * d))
        stat = d * (x * g).mean(axis=0)
        gap = np.maximum(0.0, 0.25 - np.abs(d - 0.25))
        return -np.maximum(0.0, stat - level) - gap

    d = np.ones(n)
    ts = [0.0]
    path = [d.copy()]
    forces = []
    t = 0.0
    converged = False
    while t < t_max:
        h = force(d)
        hmax = float(np.abs(h).max())
        forces.append(hmax)
        if hmax < tol_force:
            converged = True
            break
        d = np.clip(d + step * h, 0.0, 1.0)
        t += step
        ts.append(t)
        path.append(d.copy())
    else:
        forces.append(float(np.abs(force(d)).max()))

    if converged:
        # below 1/2 the gap force has no equilibrium and decays entries as
        # d' = -d near the bottom, so |H| < tol_force pins them under
        # tol_force: that is the zero attractor
        d = np.where(d < tol_force, 0.0, d)
    zero_set = np.flatnonzero(d == 0.0)
    nonzero = d[d > 0.0]
    in_range = bool(nonzero.size == 0
                    or np.all(nonzero >= 0.5 - 2.0 * step))
    zero_bound = 2.0 * mean_v / level
    return ContractionResult(
        d_tilde=DiagonalMap(d),
        zero_set=zero_set,
        converged=converged,
        t_final=t,
        steps=len(ts) - 1,
        trace_t=np.array(ts),
        trace_d=np.array(path),
        trace_force=np.array(forces),
        mean_v=mean_v,
        zero_bound=zero_bound,
        zero_bound_ok=bool(zero_set.size <= zero_bound + 1e-9),
        in_terminal_range=in_range,
    )
