"""End-to-end CLI tests: exit codes, artifact shapes, determinism."""

import json
import math
import subprocess
import sys

import numpy as np
import pytest

from concentra import acceptance, cli, dist, gstats, norms, smallball


def write_config(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def run_cli(tmp_path, payload, *extra):
    cfg = write_config(tmp_path, payload)
    return cli.main(["--config", cfg, *extra])


def test_profile_exact_engine(tmp_path):
    out = tmp_path / "profile.csv"
    payload = {
        "command": "profile",
        "norm": {"family": "lp", "p": 2.0, "n": 16},
        "profile": {"engine": "exact"},
        "out": str(out),
    }
    assert run_cli(tmp_path, payload) == 0
    rows = {line.split(",")[0]: line.split(",")[1:]
            for line in out.read_text().splitlines()[1:]}
    assert rows["provenance"][0] == "exact"
    assert float(rows["mean"][0]) == pytest.approx(dist.chi_mean(16), rel=1e-12)
    assert float(rows["dim"][0]) == 16
    assert float(rows["k"][0]) == pytest.approx(dist.chi_mean(16) ** 2, rel=1e-12)
    first = out.read_bytes()
    assert run_cli(tmp_path, payload) == 0
    assert out.read_bytes() == first


def test_profile_mc_deterministic_across_threads(tmp_path):
    out = tmp_path / "mc.csv"
    payload = {
        "command": "profile",
        "norm": {"family": "sup", "n": 12},
        "profile": {"engine": "mc"},
        "mc": {"samples": 4000, "seed": 9},
        "out": str(out),
    }
    assert run_cli(tmp_path, payload) == 0
    single = out.read_bytes()
    assert run_cli(tmp_path, payload, "--threads", "4") == 0
    assert out.read_bytes() == single
    # and the estimate is the right scale
    rows = {line.split(",")[0]: line.split(",")[1:]
            for line in out.read_text().splitlines()[1:]}
    assert float(rows["mean"][0]) == pytest.approx(dist.maxabs_mean(12),
                                                   abs=0.05)
    assert rows["provenance"][0] == "estimate"


def test_semigroup_artifact(tmp_path):
    out = tmp_path / "curve.csv"
    payload = {
        "command": "semigroup",
        "norm": {"family": "sup", "n": 8},
        "semigroup": {"t_grid": [0.0, 0.3, 0.6]},
        "mc": {"samples": 4000, "seed": 2},
        "out": str(out),
    }
    assert run_cli(tmp_path, payload) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "t,v,v_hw,grad_sq,s,psi"
    assert len(lines) == 4
    v = [float(line.split(",")[1]) for line in lines[1:]]
    assert v[0] > v[-1]


def test_position_artifacts(tmp_path):
    out = tmp_path / "balance.csv"
    payload = {
        "command": "position",
        "norm": {"family": "weighted_sup", "weights": [1.0, 2.0, 4.0]},
        "position": {"w11": True, "tol": 0.03},
        "mc": {"samples": 20000, "seed": 5},
        "out": str(out),
    }
    assert run_cli(tmp_path, payload) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "i,a,a_hw,m_resid,m_hw,ell_resid,ell_hw"
    assert len(lines) == 4
    lam = json.loads((tmp_path / "balance.csv.lambda.json").read_text())
    assert set(lam) == {"entries", "iterations", "tol"}
    assert lam["tol"] == 0.03
    entries = np.asarray(lam["entries"], dtype=float)
    prod = entries * np.array([1.0, 2.0, 4.0])
    assert np.abs(prod / prod.mean() - 1.0).max() < 0.1


def test_smallball_exact_engine(tmp_path):
    out = tmp_path / "sb.json"
    payload = {
        "command": "smallball",
        "norm": {"family": "sup", "n": 8},
        "smallball": {"delta": 0.4, "anchor": "median", "engine": "exact"},
        "out": str(out),
    }
    assert run_cli(tmp_path, payload) == 0
    doc = json.loads(out.read_text())
    assert doc["engine"] == "exact"
    med = dist.maxabs_median(8)
    assert doc["anchor_value"] == pytest.approx(med, rel=1e-12)
    assert doc["log_p"] == pytest.approx(dist.maxabs_logcdf(8, 0.4 * med),
                                         rel=1e-12)
    assert doc["log_p_hw"] == 0.0
    assert doc["bounds"] is not None
    assert doc["bounds"]["classic_log"] >= doc["log_p"]


def test_scaling_rows_match_oracle(tmp_path):
    out = tmp_path / "scaling.csv"
    payload = {
        "command": "scaling",
        "norm": {"family": "sup", "n": 4},
        "scaling": {"delta": 0.5, "n_list": [4, 8, 16], "engine": "exact"},
        "out": str(out),
    }
    assert run_cli(tmp_path, payload) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "n,delta,engine,log_p,hw"
    for line in lines[1:]:
        n_str, _, _, log_p, _ = line.split(",")
        n = int(n_str)
        thr = 0.5 * dist.maxabs_mean(n)
        assert float(log_p) == pytest.approx(
            dist.maxabs_logcdf(n, thr), rel=1e-12)


def test_deform_artifacts(tmp_path):
    out = tmp_path / "trace.csv"
    payload = {
        "command": "deform",
        "norm": {"family": "sup", "n": 16},
        "deform": {"tau": 1 / math.log(16), "delta": 0.8, "theta": 0.7,
                   "sample_budget": 64, "inner_budget": 128},
        "mc": {"samples": 3000, "seed": 2},
        "out": str(out),
    }
    assert run_cli(tmp_path, payload) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "k,coord,mean,max_partial,count,var"
    store = json.loads((tmp_path / "trace.csv.functionals.json").read_text())
    assert isinstance(store, list) and store
    assert set(store[0]) == {"t", "vector"}
    assert len(store[0]["vector"]) == 16


def test_accept_single_criterion(tmp_path, capsys):
    out = tmp_path / "accept.txt"
    payload = {
        "command": "accept",
        "accept": {"criteria": [1]},
        "out": str(out),
    }
    assert run_cli(tmp_path, payload) == 0
    text = out.read_text()
    assert text.splitlines()[-1] == "1/1 criteria passed"
    assert text.startswith("PASS  1 ")
    assert "PASS  1 " in capsys.readouterr().out


def test_accept_failure_exits_4(tmp_path, monkeypatch):
    def stub():
        return acceptance.CriterionResult(1, "stub", False, "forced", 0.0)

    monkeypatch.setattr(acceptance, "CRITERIA", (stub,))
    out = tmp_path / "accept.txt"
    payload = {
        "command": "accept",
        "accept": {"criteria": [1]},
        "out": str(out),
    }
    assert run_cli(tmp_path, payload) == 4
    text = out.read_text()
    assert "FAIL  1 stub: forced" in text
    assert text.splitlines()[-1] == "0/1 criteria passed"


def test_invalid_configs_exit_2(tmp_path):
    out = str(tmp_path / "x.csv")
    # malformed JSON leaves no artifact behind
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["--config", str(bad)]) == 2
    assert not (tmp_path / "x.csv").exists()
    # missing config file
    assert cli.main(["--config", str(tmp_path / "absent.json")]) == 2
    cases = [
        # unknown top-level key
        {"command": "profile", "norm": {"family": "sup", "n": 4},
         "out": out, "bogus": 1},
        # unknown command
        {"command": "dance", "norm": {"family": "sup", "n": 4}, "out": out},
        # block for a different command
        {"command": "profile", "norm": {"family": "sup", "n": 4},
         "smallball": {"delta": 0.5}, "out": out},
        # missing command
        {"norm": {"family": "sup", "n": 4}, "out": out},
        # unknown norm family
        {"command": "profile", "norm": {"family": "banach", "n": 4},
         "out": out},
        # unknown block key
        {"command": "profile", "norm": {"family": "sup", "n": 4},
         "profile": {"motor": "v8"}, "out": out},
        # bad mc value
        {"command": "profile", "norm": {"family": "sup", "n": 4},
         "mc": {"samples": -5}, "out": out},
        # criteria out of range
        {"command": "accept", "accept": {"criteria": [99]}, "out": out},
    ]
    for payload in cases:
        assert run_cli(tmp_path, payload) == 2, payload
    # missing out path
    payload = {"command": "profile", "norm": {"family": "sup", "n": 4}}
    assert run_cli(tmp_path, payload) == 2


def test_estimator_failure_exits_3_with_diagnostics(tmp_path):
    out = tmp_path / "pos.csv"
    payload = {
        "command": "position",
        "norm": {"family": "weighted_sup", "weights": [1.0, 50.0]},
        "position": {"w11": True, "max_iter": 1},
        "mc": {"samples": 2000, "seed": 3},
        "out": str(out),
    }
    assert run_cli(tmp_path, payload) == 3
    doc = json.loads(out.read_text())
    assert "error" in doc
    assert "last_spread" in doc["diagnostics"]


def test_console_script_smoke(tmp_path):
    out = tmp_path / "profile.csv"
    cfg = write_config(tmp_path, {
        "command": "profile",
        "norm": {"family": "sup", "n": 6},
        "profile": {"engine": "exact"},
        "out": str(out),
    })
    proc = subprocess.run([sys.executable, "-m", "concentra.cli",
                           "--config", cfg],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert out.exists()
