from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
import pytest

from cbsde.cli import canonical_json, main


def _cfg(tmp_path, configs, name, **changes):
    raw = json.loads((configs / f"{name}.json").read_text())
    raw["problem"] = str(configs / raw["problem"])
    if "strategy" in raw:
        raw["strategy"] = str(configs / raw["strategy"])
    for key, val in changes.items():
        raw[key] = val
    path = tmp_path / f"{name}.cfg.json"
    path.write_text(json.dumps(raw))
    return str(path)


def _run(cmd, cfg, out, *extra):
    return main([cmd, "--config", cfg, "--out", str(out), *extra])


def _load(path):
    return json.loads(path.read_text())


def test_canonical_json_format():
    text = canonical_json({"b": 0.1, "a": [1, float("nan")], "c": np.float64(1 / 3)})
    assert text == '{\n  "a": [\n    1,\n    null\n  ],\n  "b": 0.10000000000000001,\n  "c": 0.33333333333333331\n}\n'


def test_validate(tmp_path, configs, capsys):
    assert _run("validate", _cfg(tmp_path, configs, "d1"), tmp_path) == 0
    assert _load(tmp_path / "validation.json")["passed"]


def test_malformed_cost_exits_2(tmp_path, configs, capsys):
    code = _run("solve-constrained", _cfg(tmp_path, configs, "bad_cost"), tmp_path)
    assert code == 2
    assert "H3(iv)" in capsys.readouterr().err


def test_solve_constrained_d1(tmp_path, configs, capsys):
    assert _run("solve-constrained", _cfg(tmp_path, configs, "d1"), tmp_path) == 0
    s = _load(tmp_path / "summary.json")
    assert abs(s["y0"] - 0.9) <= 1e-3 and s["converged"]
    assert {"schedule", "y0", "violation", "monotone", "converged", "gap"} <= set(_load(tmp_path / "penalization.json"))
    assert (tmp_path / "solution.csv").read_text().startswith("t,mode,x_1,Y,dK")


def test_solve_constrained_single_mode(tmp_path, configs, capsys):
    assert _run("solve-constrained", _cfg(tmp_path, configs, "single"), tmp_path) == 0
    y0 = _load(tmp_path / "summary.json")["y0"]
    assert abs(y0 - np.exp(-0.05)) <= 0.05 * 0.05 / 200
    assert _run("solve-reflected", _cfg(tmp_path, configs, "single"), tmp_path / "r") == 0
    assert _load(tmp_path / "r" / "reflected.json")["y0"]["picard"][0] == pytest.approx(y0, abs=1e-14)


def test_ladder_exhausted_exits_3(tmp_path, configs, capsys):
    cfg = _cfg(tmp_path, configs, "d1", ladder={"schedule": [1, 2, 4]})
    assert _run("solve-constrained", cfg, tmp_path) == 3
    assert not _load(tmp_path / "penalization.json")["converged"]


def test_solve_reflected_d1(tmp_path, configs, capsys):
    assert _run("solve-reflected", _cfg(tmp_path, configs, "d1"), tmp_path) == 0
    r = _load(tmp_path / "reflected.json")
    assert r["y0"]["picard"] == pytest.approx([0.9, 1.0], abs=1e-3)
    assert r["y0"]["penalized"] == pytest.approx([0.9, 1.0], abs=1e-3)
    assert (tmp_path / "reflected_1.csv").exists() and (tmp_path / "reflected_2.csv").exists()


def test_route_disagreement_exits_4(tmp_path, configs, capsys):
    cfg = _cfg(tmp_path, configs, "d1", ladder={"schedule": [1, 2]})
    assert _run("solve-reflected", cfg, tmp_path) == 4
    assert "routes disagree" in capsys.readouterr().err


def test_evaluate(tmp_path, configs, capsys):
    cfg = _cfg(tmp_path, configs, "d1")
    assert _run("evaluate", cfg, tmp_path) == 0
    e = _load(tmp_path / "evaluation.json")
    assert e["mean"] == pytest.approx(0.9, abs=1e-12) and e["stderr"] == 0.0 and e["n"] == 200
    assert _run("evaluate", cfg, tmp_path / "e", "--strategy", str(configs / "empty.strategy.json")) == 0
    assert _load(tmp_path / "e" / "evaluation.json")["mean"] == 0.0
    assert _run("evaluate", cfg, tmp_path / "m", "--strategy", str(tmp_path / "missing.json")) == 2


def test_extract_strategy(tmp_path, configs, capsys):
    assert _run("extract-strategy", _cfg(tmp_path, configs, "d1"), tmp_path) == 0
    assert _load(tmp_path / "strategy.json") == {"i0": 1, "switches": [{"t": 0.0, "to": 2}]}


def test_compare_d1(tmp_path, configs, capsys):
    assert _run("compare", _cfg(tmp_path, configs, "d1"), tmp_path) == 0
    c = _load(tmp_path / "compare.json")
    assert set(c["values"]) == {"constrained", "reflected", "lattice_dp", "strategy"}
    assert len(c["pairs"]) == 6 and c["passed"]
    assert all(abs(v - 0.9) <= 1e-3 for v in c["values"].values())


def test_compare_breach_exits_4(tmp_path, configs, capsys):
    assert _run("compare", _cfg(tmp_path, configs, "d1", compare={"tol": 1e-9}), tmp_path) == 4
    assert "FAIL" in capsys.readouterr().out


def test_compare_lsmc_uses_stderr_tolerance(tmp_path, configs, capsys):
    cfg = _cfg(tmp_path, configs, "affine_lsmc", lsmc={"paths": 2000, "seed": 1, "basis": {"degree": 2}},
               grid={"N": 20}, evaluate={"paths": 500, "seed": 3})
    assert _run("compare", cfg, tmp_path) == 0
    c = _load(tmp_path / "compare.json")
    assert c["engine"] == "lsmc"
    for q in c["pairs"]:
        se = np.hypot(c["stderr"][q["a"]], c["stderr"][q["b"]])
        assert q["tol"] == pytest.approx(max(1e-3, 3 * se))


def test_simulate(tmp_path, configs, capsys):
    assert _run("simulate", _cfg(tmp_path, configs, "affine_lattice"), tmp_path, "--seed", "5") == 0
    s = _load(tmp_path / "simulate.json")
    assert s["seed"] == 5
    assert len(list((tmp_path / "paths").glob("path_*.csv"))) == s["count"]


def test_verify_appendix(tmp_path, configs, capsys):
    assert _run("verify-appendix", _cfg(tmp_path, configs, "d1"), tmp_path) == 0
    v = _load(tmp_path / "verify.json")
    assert v["passed"] and v["battery"]["passed"]
    assert all(c["holds"] for c in v["comparison"])


def test_missing_problem_file_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"problem": "nope.json"}))
    assert main(["validate", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_outputs_bit_identical_across_threads(tmp_path, configs, capsys):
    cfg = _cfg(tmp_path, configs, "affine_lsmc", lsmc={"paths": 1000, "seed": 1, "basis": {"degree": 2}},
               grid={"N": 10}, evaluate={"paths": 200, "seed": 3})
    _run("compare", cfg, tmp_path / "a", "--threads", "1")
    _run("compare", cfg, tmp_path / "b", "--threads", "4")
    for name in ("compare.json", "strategy.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_module_entry_point(tmp_path, configs):
    res = subprocess.run([sys.executable, "-m", "cbsde", "evaluate", "--config", _cfg(tmp_path, configs, "d1"),
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout)["mean"] == pytest.approx(0.9, abs=1e-12)
