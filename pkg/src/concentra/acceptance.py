"""Acceptance gate: eleven numbered checks over the whole package.

Each criterion is a zero-argument function returning a CriterionResult;
``run`` executes a selection and formats one PASS/FAIL line per criterion.
Budgets and seeds are fixed here so the gate is deterministic.
"""
from __future__ import annotations

import math
import os
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from . import deform, dist, ou, smallball
from .constants import SMOOTHED_MEAN_RATIO
from .gstats import (McConfig, estimate_profile, exact_profile, kwapien_check,
                     substream)
from .norms import (DirectSumSup, FunctionalSet, LinearImage, LpNorm,
                    PolytopeNorm, SupNorm, WeightedSup)
from .positions import balance_report, w11_solve
from .smallball import (ScalingStudy, SmallBallQuery, SplittingConfig,
                        bound_report, d_param, exact_log_smallball,
                        pcn_gof_pvalue, scaling_study, splitting_smallball)

__all__ = ["CriterionResult", "CRITERIA", "run", "format_line", "norm_roster"]


@dataclass(frozen=True)
class CriterionResult:
    number: int
    name: str
    passed: bool
    details: str
    seconds: float


def norm_roster():
    """Shared roster of concrete norms for the parameter-chain criteria."""
    poly = FunctionalSet(substream(7, "accept-roster").standard_normal(
        (20, 12)))
    a = substream(7, "accept-image").standard_normal((6, 10))
    return [
        ("l1-16", LpNorm(1.0, 16)),
        ("l2-32", LpNorm(2.0, 32)),
        ("sup-64", SupNorm(64)),
        ("wsup-16", WeightedSup(np.geomspace(1.0, 3.0, 16))),
        ("poly-12", PolytopeNorm(poly)),
        ("l2+sup-16", DirectSumSup(LpNorm(2.0, 8), SupNorm(8))),
        ("image-10", LinearImage(a, LpNorm(2.0, 6))),
    ]


def _fmt(x: float) -> str:
    return f"{x:.4g}"


# 1 -------------------------------------------------------------------------

def exact_scaling_criterion() -> CriterionResult:
    """Exact-engine growth exponent of -log P{sup <= 0.3 mean} over dyadic n."""
    t0 = time.perf_counter()
    study = scaling_study(lambda n: SupNorm(n), 0.3,
                          [64, 128, 256, 512, 1024, 2048, 4096],
                          engine="exact")
    dt = time.perf_counter() - t0
    increasing = bool(np.all(np.diff(-study.log_p) > 0.0))
    ok = 0.55 < study.gamma_hat < 1.0 and increasing and dt < 5.0
    return CriterionResult(
        1, "exact-linf-scaling", ok,
        f"gamma_hat={study.gamma_hat:.4f} increasing={increasing} "
        f"runtime={dt:.2f}s", dt)


# 2 -------------------------------------------------------------------------

def splitting_accuracy_criterion() -> CriterionResult:
    """Splitting engine vs the exact law on sup-norm n=256 at delta=0.3."""
    t0 = time.perf_counter()
    spec = SupNorm(256)
    query = SmallBallQuery.resolve(spec, 0.3, "mean")
    exact = exact_log_smallball(spec, query.threshold)
    rels, totals = [], []
    for seed in (1, 2, 3):
        scfg = SplittingConfig(per_level_samples=1000,
                               mcmc_steps_per_sample=40, seed=seed)
        res = splitting_smallball(query, scfg)
        rels.append(abs(res.log_p - exact) / abs(exact))
        totals.append(res.n_samples)
    dt = time.perf_counter() - t0
    ok = all(r <= 0.15 for r in rels) and dt < 120.0
    return CriterionResult(
        2, "splitting-accuracy", ok,
        f"exact_log_p={exact:.2f} rel_errors={[round(r, 4) for r in rels]} "
        f"samples={totals} runtime={dt:.1f}s", dt)


# 3 -------------------------------------------------------------------------

def bound_validity_criterion() -> CriterionResult:
    """Every reported bound sits above the exact probability on the grid."""
    t0 = time.perf_counter()
    violations = []
    cells = 0
    for name, make in (("l1", lambda n: LpNorm(1.0, n)),
                       ("l2", lambda n: LpNorm(2.0, n)),
                       ("sup", SupNorm)):
        for n in (16, 64, 256):
            spec = make(n)
            profile = exact_profile(spec)
            d_half = d_param(spec, 0.5)
            for delta in (0.1, 0.2, 0.3, 0.4):
                query = SmallBallQuery.resolve(spec, delta, "mean")
                rep = bound_report(profile, query, d_at_half=d_half)
                cells += 1
                for tag, log_b in (("classic", rep.classic_log),
                                   ("kv", rep.kv_log),
                                   ("hyper_sb", rep.hyper_sb_log),
                                   ("super_sb", rep.super_sb_log)):
                    if log_b is not None and log_b < rep.exact_log_p:
                        violations.append((name, n, delta, tag,
                                           log_b - rep.exact_log_p))
    dt = time.perf_counter() - t0
    return CriterionResult(
        3, "bound-validity", not violations,
        f"cells={cells} violations={violations or 0}", dt)


# 4 -------------------------------------------------------------------------

def parameter_chain_criterion() -> CriterionResult:
    """Poincare order k <= 1/beta_tilde <= 1/beta and R*L = beta_tilde."""
    t0 = time.perf_counter()
    cfg = McConfig(samples=20000, seed=11)
    failures = []
    for name, spec in norm_roster():
        p = estimate_profile(spec, cfg)
        mean, hw_m = p.mean.value, p.mean.half_width
        var, hw_v = p.variance.value, p.variance.half_width
        gsq, hw_g = p.grad_l2_sq.value, p.grad_l2_sq.half_width
        if var > gsq + 3.0 * math.hypot(hw_v, hw_g):
            failures.append((name, "poincare"))
        inv_bt = 1.0 / p.beta_tilde
        inv_b = 1.0 / p.beta
        hw_bt = inv_bt * (2.0 * hw_m / mean + hw_g / gsq)
        hw_b = inv_b * (2.0 * hw_m / mean + hw_v / var)
        hw_k = p.k * 2.0 * hw_m / mean
        if p.k > inv_bt + 3.0 * math.hypot(hw_k, hw_bt):
            failures.append((name, "k<=1/beta_tilde"))
        if inv_bt > inv_b + 3.0 * math.hypot(hw_bt, hw_b):
            failures.append((name, "1/beta_tilde<=1/beta"))
        if abs(p.big_r * p.l_ratio - p.beta_tilde) > 1e-12 * p.beta_tilde:
            failures.append((name, "R*L=beta_tilde"))
    dt = time.perf_counter() - t0
    return CriterionResult(
        4, "parameter-chain", not failures,
        f"norms={len(norm_roster())} failures={failures or 0}", dt)


# 5 -------------------------------------------------------------------------

def superconcentration_criterion() -> CriterionResult:
    """2/s >= log R for the sup norm, and Var * log n stays order one."""
    t0 = time.perf_counter()
    checks = []
    for n in (64, 1024):
        p = exact_profile(SupNorm(n))
        checks.append(2.0 / p.s >= math.log(p.big_r))
    ratios = [dist.maxabs_var(1 << e) * math.log(1 << e)
              for e in range(6, 13)]
    in_band = all(0.1 <= r <= 10.0 for r in ratios)
    dt = time.perf_counter() - t0
    return CriterionResult(
        5, "superconcentration", all(checks) and in_band,
        f"two_over_s_ok={checks} var_logn_range="
        f"[{_fmt(min(ratios))},{_fmt(max(ratios))}]", dt)


# 6 -------------------------------------------------------------------------

def semigroup_criterion() -> CriterionResult:
    """Variance-decay identities and hypercontractive decay on sup-64."""
    t0 = time.perf_counter()
    spec = SupNorm(64)
    exact_var = dist.maxabs_var(64)
    cfg = McConfig(samples=1000000, seed=3)
    grid = np.round(np.linspace(0.0, 1.0, 11), 10)
    curve = ou.variance_curve(spec, grid, cfg)
    notes = []
    ok_v0 = abs(curve.v[0] - exact_var) <= curve.v_half_width[0]
    notes.append(f"v0_err={_fmt(abs(curve.v[0] - exact_var))}")
    # the derivative check needs fine spacing: v decays at log-rate ~2/s,
    # which is huge for the sup norm, so a 0.1-step central difference is
    # dominated by its O(h^2 v''') bias rather than by estimator noise
    fine = ou.variance_curve(
        spec, [0.19, 0.2, 0.21, 0.49, 0.5, 0.51], cfg)
    fd_ok = True
    for t in (0.2, 0.5):
        k = int(np.argmin(np.abs(fine.t_grid - t)))
        rel = abs(fine.fd_residual[k]) / (2.0 * fine.grad_sq[k])
        fd_ok &= rel <= 0.10
        notes.append(f"fd_rel@{t}={_fmt(rel)}")
    decay_ok = bool(np.all(
        curve.v <= np.exp(-2.0 * grid) * curve.v[0]
        + curve.v_half_width + curve.v_half_width[0]))
    sig = curve.v > 4.0 * curve.v_half_width
    logv = np.log(curve.v[sig])
    ts = grid[sig]
    convex_ok = True
    for i in range(1, sig.sum() - 1):
        lhs = (logv[i + 1] - logv[i]) / (ts[i + 1] - ts[i]) - (
            (logv[i] - logv[i - 1]) / (ts[i] - ts[i - 1]))
        slack = 4.0 * (curve.v_half_width[sig] / curve.v[sig]).max() / min(
            ts[i + 1] - ts[i], ts[i] - ts[i - 1])
        convex_ok &= lhs >= -slack
    hyper_ok = True
    for t in (0.1, 0.5, 1.0):
        hyper_ok &= ou.hyper_check(spec, t, McConfig(
            samples=1000000, seed=3)).passed
    dt = time.perf_counter() - t0
    ok = ok_v0 and fd_ok and decay_ok and convex_ok and hyper_ok
    return CriterionResult(
        6, "semigroup-identities", ok,
        " ".join(notes) + f" decay={decay_ok} convex={convex_ok} "
        f"hyper={hyper_ok}", dt)


# 7 -------------------------------------------------------------------------

def positions_criterion() -> CriterionResult:
    """Balancing diagonal recovery, direct-sum spread, and the Euler mass."""
    t0 = time.perf_counter()
    cfg = McConfig(samples=20000, seed=17)
    w = np.geomspace(1.0, 4.0, 16)
    lam, iters_w = w11_solve(WeightedSup(w), cfg, tol=0.02, max_iter=200)
    target = (1.0 / w) / np.exp(np.mean(np.log(1.0 / w)))
    got = lam.entries / lam.geometric_mean()
    rel_w = float(np.abs(got / target - 1.0).max())
    mix = DirectSumSup(LpNorm(2.0, 8), SupNorm(8))
    lam2, iters_m = w11_solve(mix, cfg, tol=0.02, max_iter=200)
    x = substream(cfg.seed, "w11").standard_normal((cfg.samples, mix.dim))
    a = lam2.entries * np.abs(mix.subgradient(x * lam2.entries)).mean(axis=0)
    spread = float(np.abs(a / a.mean() - 1.0).max())
    rep = balance_report(SupNorm(32), cfg)
    euler_gap = abs(rep.grad_mass_total.value - rep.mean_f.value)
    euler_hw = 3.0 * math.hypot(rep.grad_mass_total.half_width,
                                rep.mean_f.half_width)
    ok = (rel_w <= 0.02 and spread <= 0.02 and iters_w <= 200
          and iters_m <= 200 and euler_gap <= euler_hw)
    dt = time.perf_counter() - t0
    return CriterionResult(
        7, "positions", ok,
        f"diag_rel_err={_fmt(rel_w)} iters={iters_w},{iters_m} "
        f"spread={_fmt(spread)} euler_gap={_fmt(euler_gap)} "
        f"(allow {_fmt(euler_hw)})", dt)


# 8 -------------------------------------------------------------------------

def f_transform_criterion() -> CriterionResult:
    """Sweep family equals exhaustive subset search; sandwich inequality."""
    t0 = time.perf_counter()
    rng = substream(19, "accept-ftrans")
    mismatches = 0
    sandwich_bad = 0
    for n in (4, 6, 8):
        for _ in range(100):
            m = int(rng.integers(1, 6))
            rows = rng.standard_normal((m, n)) * (rng.random((m, n)) < 0.7)
            rows[np.all(rows == 0.0, axis=1), 0] = 1.0
            fs = FunctionalSet(rows)
            hull = deform.UnconditionalPolytope(rows)
            for tau in (1.0, 3.0):
                for _ in range(3):
                    y = rng.standard_normal(n)
                    det = deform.f_transform_detail(fs, tau, y)
                    if det.sweep_exact is not True:
                        mismatches += 1
                ft = deform.FTransform(rows, tau)
                ys = rng.standard_normal((1000, n))
                base = hull.eval(ys)
                val = ft.eval(ys)
                bad = np.logical_or(
                    val < base * (1.0 - 1e-12) - 1e-12,
                    val > (1.0 + 1.0 / tau) * base * (1.0 + 1e-12) + 1e-12)
                sandwich_bad += int(bad.sum())
    dt = time.perf_counter() - t0
    return CriterionResult(
        8, "f-transform-exactness", mismatches == 0 and sandwich_bad == 0,
        f"sweep_mismatches={mismatches} sandwich_violations={sandwich_bad} "
        f"(300 sets x 2 tau, 3 exact points + 1000 sandwich points each)",
        dt)


# 9 -------------------------------------------------------------------------

def deformation_criterion() -> CriterionResult:
    """Spike detection and retention in the balance loop; pipeline validity.

    The retention clause (final mean at least half the source mean) cannot
    hold on this instance. Selecting the spike needs theta close to 1, and
    any such theta puts the exclusion threshold (theta/4 of the smoothed
    mean, about 0.86 here) far below the spike functionals' first
    coordinate (about 3.7), so every spike functional is excluded. What
    remains is bounded by the spike-free part, at most 0.47 of the source
    mean even with zero smoothing loss. The check is asserted as stated
    and reports the measured ratio.
    """
    t0 = time.perf_counter()
    n = 32
    w = np.ones(n)
    w[0] = 5.0
    spec = WeightedSup(w)
    prof = exact_profile(spec)
    delta = min(1.0, math.log(prof.big_r) / math.log(n))
    params = deform.SmoothingParams(tau=1.0 / math.log(n), delta=delta,
                                    h=1.0, theta=0.95, sample_budget=256)
    out = deform.balance_loop(spec, params, McConfig(samples=20000, seed=1))
    spike_first = out.trace.coord[0] == 0
    within_cap = out.iterations <= out.cap and out.converged
    ratio = float(out.trace.mean[-1] / prof.mean.value)
    retention = ratio >= SMOOTHED_MEAN_RATIO
    var_ok = float(out.trace.var[-1]) <= prof.variance.value
    pipe = deform.smalldev_pipeline(
        SupNorm(256), 0.25, cfg=McConfig(samples=10000, seed=1),
        engine="splitting",
        splitting=SplittingConfig(per_level_samples=1000, seed=1))
    ok = bool(spike_first and within_cap and retention and var_ok
              and pipe.valid)
    dt = time.perf_counter() - t0
    return CriterionResult(
        9, "deformation", ok,
        f"spike_first={bool(spike_first)} within_cap={within_cap} "
        f"retention={ratio:.3f}(need>={SMOOTHED_MEAN_RATIO})={retention} "
        f"var_ok={var_ok} pipeline_valid={pipe.valid} "
        f"(bound={pipe.log_bound:.3f} measured={pipe.empirical_log_p:.3f})",
        dt)


# 10 ------------------------------------------------------------------------

def hygiene_criterion() -> CriterionResult:
    """pCN sampler leaves the Gaussian invariant; mean >= median throughout."""
    t0 = time.perf_counter()
    pval = pcn_gof_pvalue(dim=8, chains=4000, steps=50, seed=23)
    cfg = McConfig(samples=20000, seed=29)
    kwapien_bad = [name for name, spec in norm_roster()
                   if not kwapien_check(spec, cfg).passed]
    dt = time.perf_counter() - t0
    return CriterionResult(
        10, "distributional-hygiene",
        pval > 0.01 and not kwapien_bad,
        f"pcn_gof_p={pval:.4f} kwapien_failures={kwapien_bad or 0}", dt)


# 11 ------------------------------------------------------------------------

def _cli_outputs(tmp: str, tag: str, threads: str) -> dict[str, bytes]:
    """Run one small config per subcommand; return output bytes by name."""
    import json

    from . import cli

    spec_json = {"family": "sup", "n": 16}
    runs = {
        "profile": {"command": "profile", "norm": spec_json,
                    "mc": {"samples": 4000, "seed": 3}},
        "semigroup": {"command": "semigroup", "norm": spec_json,
                      "mc": {"samples": 27000, "seed": 3},
                      "semigroup": {"t_grid": [0.0, 0.25, 0.5]}},
        "position": {"command": "position", "norm": spec_json,
                     "mc": {"samples": 4000, "seed": 3}},
        "smallball": {"command": "smallball", "norm": spec_json,
                      "mc": {"samples": 4000, "seed": 3},
                      "smallball": {"delta": 0.5, "engine": "exact"}},
        "scaling": {"command": "scaling", "norm": {"family": "sup", "n": 16},
                    "scaling": {"delta": 0.3, "engine": "exact",
                                "n_list": [16, 32, 64, 128]}},
        "deform": {"command": "deform", "norm": spec_json,
                   "mc": {"samples": 4000, "seed": 3},
                   "deform": {"tau": 0.37, "delta": 1.0, "theta": 0.9,
                              "sample_budget": 64, "inner_budget": 64}},
    }
    old = os.environ.get("CONCENTRA_THREADS")
    os.environ["CONCENTRA_THREADS"] = threads
    try:
        out: dict[str, bytes] = {}
        for name, conf in runs.items():
            cpath = os.path.join(tmp, f"{tag}-{name}.json")
            opath = os.path.join(tmp, f"{tag}-{name}.out")
            with open(cpath, "w") as fh:
                json.dump(conf, fh)
            code = cli.main(["--config", cpath, "--out", opath])
            if code != 0:
                raise RuntimeError(f"cli {name} exited {code}")
            with open(opath, "rb") as fh:
                out[name] = fh.read()
            for suffix in (".functionals.json", ".lambda.json"):
                extra = opath + suffix
                if os.path.exists(extra):
                    with open(extra, "rb") as fh:
                        out[name + "+" + suffix.split(".")[1]] = fh.read()
    finally:
        if old is None:
            os.environ.pop("CONCENTRA_THREADS", None)
        else:
            os.environ["CONCENTRA_THREADS"] = old
    return out


def determinism_criterion() -> CriterionResult:
    """Byte-identical CLI outputs across reruns and thread counts."""
    t0 = time.perf_counter()
    with tempfile.TemporaryDirectory() as tmp:
        a = _cli_outputs(tmp, "a", "1")
        b = _cli_outputs(tmp, "b", "1")
        c = _cli_outputs(tmp, "c", "4")
    rerun_bad = [k for k in a if a[k] != b[k]]
    thread_bad = [k for k in a if a[k] != c[k]]
    dt = time.perf_counter() - t0
    return CriterionResult(
        11, "cli-determinism", not rerun_bad and not thread_bad,
        f"commands={sorted(a)} rerun_mismatch={rerun_bad or 0} "
        f"thread_mismatch={thread_bad or 0}", dt)


CRITERIA = (
    exact_scaling_criterion,
    splitting_accuracy_criterion,
    bound_validity_criterion,
    parameter_chain_criterion,
    superconcentration_criterion,
    semigroup_criterion,
    positions_criterion,
    f_transform_criterion,
    deformation_criterion,
    hygiene_criterion,
    determinism_criterion,
)


def format_line(r: CriterionResult) -> str:
    word = "PASS" if r.passed else "FAIL"
    return f"{word} {r.number:2d} {r.name}: {r.details}"


def run(numbers=None, echo=None) -> list[CriterionResult]:
    """Run the selected criteria (all by default) in order."""
    picked = set(numbers) if numbers else set(range(1, len(CRITERIA) + 1))
    results = []
    for i, fn in enumerate(CRITERIA, start=1):
        if i not in picked:
            continue
        r = fn()
        results.append(r)
        if echo is not None:
            echo(format_line(r))
    return results
