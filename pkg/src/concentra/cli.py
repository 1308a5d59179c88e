"""Experiment runner: JSON config in, CSV/JSON artifacts out.

One config file describes one run: a command, a norm, a Monte Carlo block,
and a command-specific block. Outputs carry no timestamps and all floats
are written with full repr precision, so identical configs produce byte-
identical artifacts regardless of thread count.

Exit codes: 0 success, 2 invalid config, 3 estimator failure (diagnostics
written as JSON), 4 acceptance failure.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import deform, ou
from .gstats import (ConfigError, EstimatorError, ExactUnavailable,
                     McConfig, estimate_profile, exact_profile)
from .norms import NormError, spec_from_dict
from .positions import balance_report, w11_solve
from .smallball import (SmallBallQuery, SplittingConfig, bound_report,
                        d_param, exact_log_smallball, mc_smallball,
                        scaling_study, splitting_smallball)

__all__ = ["main"]

COMMANDS = ("profile", "semigroup", "position", "smallball", "scaling",
            "deform", "accept")


def _check_keys(block: dict, where: str, allowed: set[str],
                required: set[str] = frozenset()):
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(block) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    missing = required - set(block)
    if missing:
        raise ConfigError(f"missing keys in {where}: {sorted(missing)}")


def _mc_from_config(config: dict, args) -> McConfig:
    block = dict(config.get("mc", {}))
    _check_keys(block, "mc",
                {"samples", "seed", "batch", "antithetic", "streams"})
    if args.samples is not None:
        block["samples"] = args.samples
    if args.seed is not None:
        block["seed"] = args.seed
    if args.threads is not None:
        block["streams"] = args.threads
    elif "streams" not in block and os.environ.get("CONCENTRA_THREADS"):
        block["streams"] = int(os.environ["CONCENTRA_THREADS"])
    return McConfig(**block)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _splitting_from(block: dict, default_seed: int) -> SplittingConfig:
    _check_keys(block, "splitting",
                {"rho", "per_level_samples", "pcn_beta",
                 "mcmc_steps_per_sample", "seed", "max_levels"})
    block = dict(block)
    block.setdefault("seed", default_seed)
    return SplittingConfig(**block)


# ------------------------------------------------------------- commands

def _run_profile(config, spec, cfg, out):
    block = config.get("profile", {})
    _check_keys(block, "profile", {"engine"})
    engine = block.get("engine", "auto")
    if engine not in ("auto", "exact", "mc"):
        raise ConfigError("profile.engine must be auto, exact, or mc")
    if engine == "exact":
        p = exact_profile(spec)
    elif engine == "mc":
        p = estimate_profile(spec, cfg)
    else:
        try:
            p = exact_profile(spec)
        except ExactUnavailable:
            p = estimate_profile(spec, cfg)
    lines = ["stat,value,half_width",
             f"provenance,{p.provenance},",
             f"dim,{p.dim},",
             f"lip,{p.lip!r},",
             f"lip_is_exact,{int(p.lip_is_exact)},"]
    for name, e in (("mean", p.mean), ("variance", p.variance),
                    ("median", p.median), ("grad_l2_sq", p.grad_l2_sq)):
        lines.append(f"{name},{e.value!r},{e.half_width!r}")
    for name in ("k", "beta", "beta_tilde", "s", "big_r", "l_ratio"):
        lines.append(f"{name},{getattr(p, name)!r},")
    for i in range(p.dim):
        lines.append(f"a_{i},{float(p.a_vec[i])!r},"
                     f"{float(p.a_half_width[i])!r}")
    summary = (f"profile n={p.dim} mean={p.mean.value:.6g} "
               f"k={p.k:.6g} beta={p.beta:.6g}")
    return {out: "\n".join(lines) + "\n"}, summary


def _run_semigroup(config, spec, cfg, out):
    block = config.get("semigroup", {})
    _check_keys(block, "semigroup", {"t_grid"}, {"t_grid"})
    grid = [float(t) for t in block["t_grid"]]
    curve = ou.variance_curve(spec, grid, cfg)
    summary = (f"semigroup n={spec.dim} points={len(grid)} "
               f"v0={curve.v0:.6g}")
    return {out: curve.to_csv()}, summary


def _run_position(config, spec, cfg, out):
    block = config.get("position", {})
    _check_keys(block, "position", {"w11", "tol", "max_iter"})
    rep = balance_report(spec, cfg)
    artifacts = {out: rep.to_csv()}
    summary = (f"position n={spec.dim} spread={rep.spread:.6g} "
               f"mean={rep.mean_f.value:.6g}")
    if block.get("w11", True):
        tol = float(block.get("tol", 0.02))
        lam, iters = w11_solve(spec, cfg, tol=tol,
                               max_iter=int(block.get("max_iter", 60)))
        doc = {"entries": [float(v) for v in lam.entries],
               "iterations": iters, "tol": tol}
        artifacts[out + ".lambda.json"] = _dump(doc)
        summary += f" w11_iterations={iters}"
    return artifacts, summary


def _run_smallball(config, spec, cfg, out):
    block = config.get("smallball", {})
    _check_keys(block, "smallball",
                {"delta", "anchor", "engine", "splitting"}, {"delta"})
    delta = float(block["delta"])
    anchor = block.get("anchor", "mean")
    engine = block.get("engine", "auto")
    if engine not in ("auto", "exact", "mc", "splitting"):
        raise ConfigError(
            "smallball.engine must be auto, exact, mc, or splitting")
    query = SmallBallQuery.resolve(spec, delta, anchor, cfg=cfg)
    scfg = _splitting_from(block.get("splitting", {}), cfg.seed)
    used = engine
    log_p, hw, n_samples, levels, hits = None, 0.0, 0, None, None
    if engine in ("auto", "exact"):
        try:
            log_p = exact_log_smallball(spec, query.threshold)
            used = "exact"
        except ExactUnavailable:
            if engine == "exact":
                raise
    if log_p is None and engine in ("auto", "mc"):
        res = mc_smallball(query, cfg)
        used = "mc"
        log_p, hw, n_samples, hits = (res.log_p, res.log_p_hw,
                                      res.n_samples, res.hits)
        if engine == "auto" and (res.hits or 0) < 20:
            log_p = None
    if log_p is None or engine == "splitting":
        res = splitting_smallball(query, scfg)
        used = "splitting"
        log_p, hw, n_samples = res.log_p, res.log_p_hw, res.n_samples
        levels, hits = len(res.levels), None
    bounds = None
    try:
        rep = bound_report(exact_profile(spec), query,
                           d_at_half=d_param(spec, 0.5))
        bounds = {"classic_log": rep.classic_log, "kv_log": rep.kv_log,
                  "hyper_sb_log": rep.hyper_sb_log,
                  "super_sb_log": rep.super_sb_log,
                  "exact_log_p": rep.exact_log_p}
    except ExactUnavailable:
        pass
    doc = {"delta": delta, "anchor": anchor,
           "anchor_value": query.anchor_value,
           "threshold": query.threshold, "engine": used,
           "log_p": log_p, "log_p_hw": hw, "n_samples": n_samples,
           "levels": levels, "hits": hits, "bounds": bounds}
    summary = f"smallball n={spec.dim} engine={used} log_p={log_p:.6g}"
    return {out: _dump(doc)}, summary


def _run_scaling(config, cfg, out):
    block = config.get("scaling", {})
    _check_keys(block, "scaling",
                {"delta", "n_list", "engine", "splitting"},
                {"delta", "n_list"})
    template = dict(config["norm"])
    if "n" not in template:
        raise ConfigError("scaling needs a norm template with an 'n' key")
    engine = block.get("engine", "exact")

    def family(n):
        return spec_from_dict({**template, "n": n})

    scfg = _splitting_from(block.get("splitting", {}), cfg.seed)
    study = scaling_study(family, float(block["delta"]),
                          [int(n) for n in block["n_list"]],
                          engine=engine, scfg=scfg, cfg=cfg)
    summary = (f"scaling delta={study.delta} engine={engine} "
               f"gamma_hat={study.gamma_hat:.4f}")
    return {out: study.to_csv()}, summary


def _run_deform(config, spec, cfg, out):
    block = config.get("deform", {})
    _check_keys(block, "deform",
                {"tau", "delta", "h", "theta", "t_grid", "sample_budget",
                 "inner_budget"}, {"tau", "delta"})
    kwargs = dict(block)
    if "t_grid" in kwargs and kwargs["t_grid"] is not None:
        kwargs["t_grid"] = tuple(float(t) for t in kwargs["t_grid"])
    params = deform.SmoothingParams(**kwargs)
    outcome = deform.balance_loop(spec, params, cfg)
    store = [{"t": float(outcome.seminorm.t_grid[ti]),
              "vector": [float(v) for v in vec]}
             for ti, vec in zip(outcome.seminorm.func_t,
                                outcome.seminorm.funcs)]
    summary = (f"deform n={spec.dim} iterations={outcome.iterations} "
               f"converged={outcome.converged} "
               f"kept={outcome.seminorm.count}")
    return {out: outcome.trace.to_csv(),
            out + ".functionals.json": _dump(store)}, summary


def _run_accept(config, out):
    from . import acceptance
    block = config.get("accept", {})
    _check_keys(block, "accept", {"criteria"})
    numbers = block.get("criteria")
    if numbers is not None:
        numbers = [int(k) for k in numbers]
        bad = [k for k in numbers
               if not 1 <= k <= len(acceptance.CRITERIA)]
        if bad:
            raise ConfigError(f"unknown criteria: {bad}")
    results = acceptance.run(numbers, echo=print)
    passed = sum(r.passed for r in results)
    lines = [acceptance.format_line(r) for r in results]
    lines.append(f"{passed}/{len(results)} criteria passed")
    summary = lines[-1]
    ok = passed == len(results)
    return {out: "\n".join(lines) + "\n"}, summary, ok


# ------------------------------------------------------------- entry point

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="concentra",
        description="Gaussian norm concentration laboratory")
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--seed", type=int, help="override mc.seed")
    p.add_argument("--samples", type=int, help="override mc.samples")
    p.add_argument("--threads", type=int, help="override mc.streams")
    p.add_argument("--out", help="override the config's output path")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        with open(args.config) as fh:
            config = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2

    try:
        _check_keys(config, "config",
                    {"command", "norm", "mc", "out"} | set(COMMANDS),
                    {"command"})
        command = config["command"]
        if command not in COMMANDS:
            raise ConfigError(f"unknown command: {command!r}")
        blocks = [c for c in COMMANDS if c in config and c != command]
        if blocks:
            raise ConfigError(f"parameter blocks {blocks} do not match "
                              f"command {command!r}")
        out = args.out or config.get("out")
        if not out:
            raise ConfigError("output path required (config 'out' or --out)")

        if command == "accept":
            artifacts, summary, ok = _run_accept(config, out)
            code = 0 if ok else 4
        else:
            if "norm" not in config:
                raise ConfigError(f"{command} needs a 'norm' spec")
            cfg = _mc_from_config(config, args)
            if command == "scaling":
                artifacts, summary = _run_scaling(config, cfg, out)
            else:
                spec = spec_from_dict(config["norm"])
                run = {"profile": _run_profile,
                       "semigroup": _run_semigroup,
                       "position": _run_position,
                       "smallball": _run_smallball,
                       "deform": _run_deform}[command]
                artifacts, summary = run(config, spec, cfg, out)
            code = 0
    except (ConfigError, NormError, ExactUnavailable, TypeError,
            ValueError, KeyError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except EstimatorError as err:
        diag = {"error": str(err),
                "diagnostics": getattr(err, "diagnostics", None)}
        out = args.out or config.get("out")
        if out:
            with open(out, "w") as fh:
                fh.write(_dump(_jsonable(diag)))
        print(f"estimator failure: {err}", file=sys.stderr)
        return 3

    for path, text in artifacts.items():
        with open(path, "w") as fh:
            fh.write(text)
    print(summary)
    return code


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


if __name__ == "__main__":
    sys.exit(main())
