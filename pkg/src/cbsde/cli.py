"""Config-driven experiment runner.

Usage: ``python -m cbsde <command> --config cfg.json [--out DIR] [--threads N] [--seed S]``.

Exit codes: 0 ok, 2 config or validation failure, 3 non-convergence,
4 cross-check failure. JSON outputs have sorted keys and floats written
with 17 significant digits, so reruns are byte-identical.

CSV layouts (column order is fixed):

* ``solution.csv`` (lattice): t, mode, x_1..x_d, Y, dK
* ``solution.csv`` (lsmc): t, mode, count, Y_mean, Y_std, dK_mean
* ``reflected_<i>.csv`` (lattice): t, x_1..x_d, Y, barrier, dK
* ``reflected_<i>.csv`` (lsmc): t, Y_mean, Y_min, Y_max, barrier_mean, dK_mean
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bsde, reflected, switching, verify
from .engines import LatticeEngine, LsmcEngine
from .errors import (IterationLimit, InvalidStrategy, LadderExhausted, MalformedSpec, NoConvergence,
                     NonMarkovian, NonTerminating)
from .lattice import Lattice, switching_value_dp, write_lattice_csv
from .lsmc import BasisSpec
from .model import (DriverSpec, ObliqueSystemSpec, SwitchingProblem, switching_to_constrained,
                    validate_problem)
from .simulate import Strategy, TimeGrid, sample_paths

EXIT_OK, EXIT_CONFIG, EXIT_NONCONV, EXIT_CROSS = 0, 2, 3, 4


# --------------------------------------------------------------------------
# canonical JSON
# --------------------------------------------------------------------------

def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def _encode(obj, indent: int, level: int) -> str:
    pad = "\n" + " " * (indent * (level + 1))
    end = "\n" + " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [json.dumps(k) + ": " + _encode(obj[k], indent, level + 1) for k in sorted(obj)]
        return "{" + pad + ("," + pad).join(items) + end + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        return "[" + pad + ("," + pad).join(_encode(v, indent, level + 1) for v in obj) + end + "]"
    if isinstance(obj, float):
        # non-finite values have no JSON literal
        return format(obj, ".17g") if math.isfinite(obj) else "null"
    return json.dumps(obj)


def canonical_json(obj) -> str:
    """Sorted keys, floats with 17 significant digits, trailing newline."""
    return _encode(_plain(obj), 2, 0) + "\n"


def write_json(path: Path, obj) -> None:
    path.write_text(canonical_json(obj))


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    problem: SwitchingProblem
    engine: str = "lattice"
    N: int = 200
    dx: float | None = None
    halfwidth: float = 5.0
    paths: int = 10_000
    basis: BasisSpec = field(default_factory=BasisSpec)
    seed: int = 0
    schedule: list | None = None
    ladder_tol: float | None = None
    driver: dict | None = None
    route: str = "both"
    reflected_tol: float = 1e-3
    max_rounds: int = 50
    eval_paths: int = 1000
    eval_seed: int = 0
    compare_tol: float = 1e-3
    strategy: Path | None = None
    simulate_paths: int = 10
    out: Path = Path("out")
    raw: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path, out=None, seed=None) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise MalformedSpec(f"config file {path} not found")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise MalformedSpec(f"config is not valid JSON: {exc}") from exc
        base = path.parent
        prob = raw.get("problem")
        if prob is None:
            raise MalformedSpec("config needs a 'problem' entry")
        if isinstance(prob, str):
            ppath = base / prob
            if not ppath.is_file():
                raise MalformedSpec(f"problem file {ppath} not found")
            try:
                problem = SwitchingProblem.load(ppath)
            except json.JSONDecodeError as exc:
                raise MalformedSpec(f"problem file is not valid JSON: {exc}") from exc
        else:
            problem = SwitchingProblem.from_dict(prob)
        engine = raw.get("engine", "lattice")
        if engine not in ("lattice", "lsmc"):
            raise MalformedSpec("engine must be 'lattice' or 'lsmc'")
        lat = raw.get("lattice", {})
        dx = lat.get("dx", "auto")
        ls = raw.get("lsmc", {})
        ev = raw.get("evaluate", {})
        lad = raw.get("ladder", {})
        ref = raw.get("reflected", {})
        cfg = cls(
            problem=problem,
            engine=engine,
            N=int(raw.get("grid", {}).get("N", 200)),
            dx=None if dx in (None, "auto") else float(dx),
            halfwidth=float(lat.get("halfwidth", 5.0)),
            paths=int(ls.get("paths", 10_000)),
            basis=BasisSpec(**ls.get("basis", {})),
            seed=int(ls.get("seed", 0)),
            schedule=lad.get("schedule"),
            ladder_tol=lad.get("tol"),
            driver=raw.get("driver"),
            route=ref.get("route", "both"),
            reflected_tol=float(ref.get("tol", 1e-3)),
            max_rounds=int(ref.get("max_rounds", 50)),
            eval_paths=int(ev.get("paths", 1000)),
            eval_seed=int(ev.get("seed", 0)),
            compare_tol=float(raw.get("compare", {}).get("tol", 1e-3)),
            strategy=None if raw.get("strategy") is None else base / raw["strategy"],
            simulate_paths=int(raw.get("simulate", {}).get("paths", 10)),
            out=Path(out) if out is not None else base / raw.get("outputs", "out"),
            raw=raw,
        )
        if seed is not None:
            cfg.seed = cfg.eval_seed = int(seed)
        if cfg.route not in ("picard", "penalized", "both"):
            raise MalformedSpec("reflected.route must be picard, penalized or both")
        if cfg.engine == "lattice" and (not problem.markovian or problem.dim > 2):
            raise MalformedSpec("the lattice engine needs a Markovian problem with d <= 2")
        return cfg

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.problem.T, self.N)

    def build_engine(self, threads: int = 1):
        p = self.problem
        if self.engine == "lattice":
            return LatticeEngine(Lattice(p, self.grid, self.dx, self.halfwidth))
        ps = sample_paths(p, self.grid, self.paths, self.seed, threads=threads)
        return LsmcEngine(p, ps, self.basis)

    def build_lattice(self) -> Lattice | None:
        p = self.problem
        if not p.markovian or p.dim > 2:
            return None
        return Lattice(p, self.grid, self.dx, self.halfwidth)

    def constrained(self):
        """Driver, constraint and terminal; ``driver`` in the config overrides the linear part."""
        p = self.problem
        drv, con, term = switching_to_constrained(p)
        if self.driver:
            d = self.driver
            drv = DriverSpec(p.m, p.dim, p.psi, d.get("y_coef"), d.get("z_coef"), d.get("u_coef"),
                             d.get("lipschitz"), _pair(d.get("gamma_bounds")))
        return drv, con, term

    def oblique(self) -> ObliqueSystemSpec:
        p = self.problem
        drv, con, term = self.constrained()
        B = drv.u_coef.copy()
        np.fill_diagonal(B, drv.y_coef - drv.u_coef.sum(axis=1))
        return ObliqueSystemSpec(p.m, p.dim, p.psi, term, p.c, B, drv.z_coef, con.allowed)


def _pair(v):
    return None if v is None else (float(v[0]), float(v[1]))


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _validate_or_fail(cfg: ExperimentConfig) -> dict | None:
    rep = validate_problem(cfg.problem, grid_times=cfg.grid.times)
    if rep.passed:
        return None
    return rep.to_dict()


def _print_failure(rep: dict) -> None:
    print(canonical_json(rep), end="")
    for c in rep.get("clauses", []):
        if not c.get("passed", True):
            print(f"validation failed: clause {c['clause']}: {c.get('detail', '')}", file=sys.stderr)


def _se(sol) -> float:
    return float(sol.stderr or 0.0)


def _solution_csv(path: Path, sol, eng) -> None:
    if isinstance(eng, LatticeEngine):
        dK = np.concatenate([sol.dK, np.zeros((1,) + sol.dK.shape[1:])])
        write_lattice_csv(path, eng.L, {"Y": sol.Y, "dK": dK})
        return
    grid = sol.grid
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "mode", "count", "Y_mean", "Y_std", "dK_mean"])
        for k in range(grid.N + 1):
            occ = eng.paths.I[:, k]
            for i in range(sol.m):
                sel = occ == i
                y = sol.Y[k, i, sel]
                dk = sol.dK[k, i, sel] if k < grid.N else np.zeros(0)
                w.writerow([format(grid.t(k), ".17g"), i + 1, int(sel.sum()),
                            format(float(y.mean()), ".17g") if y.size else "",
                            format(float(y.std()), ".17g") if y.size else "",
                            format(float(dk.mean()), ".17g") if dk.size else ""])


def _reflected_csvs(out: Path, sol, eng) -> list[str]:
    names = []
    grid = sol.grid
    for i in range(sol.m):
        f = out / f"reflected_{i + 1}.csv"
        names.append(f.name)
        with open(f, "w", newline="") as fh:
            w = csv.writer(fh)
            if isinstance(eng, LatticeEngine):
                L = eng.L
                w.writerow(["t"] + [f"x_{a + 1}" for a in range(L.d)] + ["Y", "barrier", "dK"])
                for k in range(grid.N + 1):
                    for n in range(L.M):
                        dk = sol.dK[k, i, n] if k < grid.N else 0.0
                        w.writerow([format(grid.t(k), ".17g")] + [format(float(v), ".17g") for v in L.nodes[n]]
                                   + [format(float(v), ".17g") for v in (sol.Y[k, i, n], sol.barrier[k, i, n], dk)])
            else:
                w.writerow(["t", "Y_mean", "Y_min", "Y_max", "barrier_mean", "dK_mean"])
                for k in range(grid.N + 1):
                    y = sol.Y[k, i]
                    dk = float(sol.dK[k, i].mean()) if k < grid.N else 0.0
                    w.writerow([format(v, ".17g") for v in (grid.t(k), float(y.mean()), float(y.min()),
                                                            float(y.max()), float(sol.barrier[k, i].mean()), dk)])
    return names


def _ladder(cfg: ExperimentConfig, eng, keep_levels: bool = False):
    drv, con, term = cfg.constrained()
    return bsde.penalization_ladder(drv, con, term, eng, cfg.schedule, cfg.ladder_tol,
                                    keep_levels=keep_levels)


def _reflected(cfg: ExperimentConfig, eng):
    sys_ = cfg.oblique()
    routes = {}
    if cfg.route in ("picard", "both"):
        routes["picard"] = reflected.solve_oblique_picard(sys_, eng, cfg.max_rounds)
    if cfg.route in ("penalized", "both"):
        n = (cfg.schedule or bsde.DEFAULT_SCHEDULE)[-1]
        routes["penalized"] = reflected.solve_oblique_penalized(sys_, n, eng)
    return routes


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_validate(cfg: ExperimentConfig, args) -> int:
    rep = validate_problem(cfg.problem, grid_times=cfg.grid.times)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_json(cfg.out / "validation.json", rep.to_dict())
    if not rep.passed:
        _print_failure(rep.to_dict())
        return EXIT_CONFIG
    print("validation passed")
    return EXIT_OK


def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    ps = sample_paths(cfg.problem, cfg.grid, cfg.simulate_paths, cfg.seed, threads=args.threads)
    cfg.out.mkdir(parents=True, exist_ok=True)
    ps.dump(cfg.out / "paths")
    write_json(cfg.out / "simulate.json", {
        "count": len(ps), "seed": cfg.seed, "N": cfg.N,
        "mean_marks": float(ps.mark_counts().mean()),
        "mean_X_T": ps.X[:, -1].mean(axis=0),
        "final_mode_counts": np.bincount(ps.I[:, -1], minlength=cfg.problem.m),
    })
    print(f"wrote {len(ps)} paths to {cfg.out / 'paths'}")
    return EXIT_OK


def cmd_solve_constrained(cfg: ExperimentConfig, args) -> int:
    bad = _validate_or_fail(cfg)
    if bad is not None:
        _print_failure(bad)
        return EXIT_CONFIG
    eng = cfg.build_engine(args.threads)
    cfg.out.mkdir(parents=True, exist_ok=True)
    try:
        sol, rep = _ladder(cfg, eng)
    except LadderExhausted as exc:
        write_json(cfg.out / "penalization.json", exc.report.to_dict())
        print(f"penalization ladder exhausted: {exc}", file=sys.stderr)
        return EXIT_NONCONV
    write_json(cfg.out / "penalization.json", rep.to_dict())
    _solution_csv(cfg.out / "solution.csv", sol, eng)
    summary = {"y0": sol.y0, "violation": sol.violation, "converged": rep.converged,
               "converged_at": rep.converged_at, "stderr": sol.stderr, "engine": eng.tag,
               "y0_modes": [sol.y0_mode(i) for i in range(sol.m)]}
    if eng.tag == "lsmc":
        # the basis actually used; path-dependent problems switch to PathFeature
        summary["basis"] = eng.basis.kind
    write_json(cfg.out / "summary.json", summary)
    print(canonical_json(summary), end="")
    return EXIT_OK


def cmd_solve_reflected(cfg: ExperimentConfig, args) -> int:
    bad = _validate_or_fail(cfg)
    if bad is not None:
        _print_failure(bad)
        return EXIT_CONFIG
    eng = cfg.build_engine(args.threads)
    cfg.out.mkdir(parents=True, exist_ok=True)
    routes = _reflected(cfg, eng)
    m = cfg.problem.m
    values = {name: [s.y0_mode(i) for i in range(m)] for name, s in routes.items()}
    main = routes.get("picard") or routes["penalized"]
    files = _reflected_csvs(cfg.out, main, eng)
    diff = None
    if len(routes) == 2:
        diff = float(np.max(np.abs(np.subtract(values["picard"], values["penalized"]))))
    summary = {"y0": values, "route_difference": diff, "tol": cfg.reflected_tol,
               "rounds": routes["picard"].rounds if "picard" in routes else None,
               "obstacle_gap": main.obstacle_gap(), "files": files}
    write_json(cfg.out / "reflected.json", summary)
    if diff is not None and diff > cfg.reflected_tol:
        print(f"routes disagree: picard {values['picard']} penalized {values['penalized']}", file=sys.stderr)
        return EXIT_CROSS
    print(canonical_json(summary), end="")
    return EXIT_OK


def _load_strategy(cfg: ExperimentConfig, args) -> Strategy:
    path = Path(args.strategy) if getattr(args, "strategy", None) else cfg.strategy
    if path is None or not path.is_file():
        raise MalformedSpec(f"strategy file {path} not found")
    try:
        return Strategy.load(path)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise MalformedSpec(f"strategy file is malformed: {exc}") from exc


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    s = _load_strategy(cfg, args)
    est = switching.evaluate_strategy(cfg.problem, s, cfg.eval_paths, cfg.eval_seed, cfg.grid, args.threads)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_json(cfg.out / "evaluation.json", est.to_dict())
    print(canonical_json(est.to_dict()), end="")
    return EXIT_OK


def _value_source(cfg: ExperimentConfig, eng):
    if isinstance(eng, LatticeEngine):
        return switching_value_dp(eng.L, cfg.problem)
    sol, _ = _ladder(cfg, eng)
    return sol


def cmd_extract_strategy(cfg: ExperimentConfig, args) -> int:
    bad = _validate_or_fail(cfg)
    if bad is not None:
        _print_failure(bad)
        return EXIT_CONFIG
    eng = cfg.build_engine(args.threads)
    src = _value_source(cfg, eng)
    s = switching.extract_optimal_strategy(src, cfg.problem, grid=cfg.grid)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_json(cfg.out / "strategy.json", s.to_dict())
    print(canonical_json(s.to_dict()), end="")
    return EXIT_OK


def cmd_compare(cfg: ExperimentConfig, args) -> int:
    """Constrained Y_0, reflected Y^{i0}_0, lattice DP and J(extracted strategy) side by side."""
    bad = _validate_or_fail(cfg)
    if bad is not None:
        _print_failure(bad)
        return EXIT_CONFIG
    p = cfg.problem
    eng = cfg.build_engine(args.threads)
    sol, rep = _ladder(cfg, eng)
    refl = reflected.solve_oblique_picard(cfg.oblique(), eng, cfg.max_rounds)
    values = {"constrained": sol.y0, "reflected": refl.y0_mode(p.i0)}
    errors = {"constrained": _se(sol), "reflected": _se(sol)}
    L = eng.L if isinstance(eng, LatticeEngine) else cfg.build_lattice()
    if L is not None:
        values["lattice_dp"] = switching_value_dp(L, p).value0()
        errors["lattice_dp"] = 0.0
    J = switching.evaluate_feedback(sol, p, cfg.eval_paths, cfg.eval_seed, cfg.grid, args.threads)
    values["strategy"] = J.mean
    errors["strategy"] = J.std_error
    strat = switching.extract_optimal_strategy(sol, p, grid=cfg.grid)
    lsmc = isinstance(eng, LsmcEngine)
    pairs = []
    names = sorted(values)
    for a_i, a in enumerate(names):
        for b in names[a_i + 1:]:
            se = float(np.hypot(errors[a], errors[b]))
            tol = max(cfg.compare_tol, 3 * se) if lsmc else cfg.compare_tol + 3 * se
            diff = abs(values[a] - values[b])
            pairs.append({"a": a, "b": b, "diff": diff, "tol": tol, "ok": bool(diff <= tol)})
    passed = all(q["ok"] for q in pairs)
    result = {"engine": eng.tag, "values": values, "stderr": errors, "pairs": pairs, "passed": passed,
              "ladder": {"converged_at": rep.converged_at, "violation": sol.violation},
              "picard_rounds": refl.rounds, "strategy": strat.to_dict(), "payoff": J.to_dict()}
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_json(cfg.out / "compare.json", result)
    write_json(cfg.out / "strategy.json", strat.to_dict())
    for q in pairs:
        print(f"{q['a']:>12} vs {q['b']:<12} diff {q['diff']:.3e}  tol {q['tol']:.3e}  "
              f"{'ok' if q['ok'] else 'FAIL'}")
    return EXIT_OK if passed else EXIT_CROSS


def cmd_verify_appendix(cfg: ExperimentConfig, args) -> int:
    """Monotone-limit battery, level-to-level comparison and the sampled structural inequality."""
    bad = _validate_or_fail(cfg)
    if bad is not None:
        _print_failure(bad)
        return EXIT_CONFIG
    p = cfg.problem
    eng = cfg.build_engine(args.threads)
    sol, rep, levels = _ladder(cfg, eng, keep_levels=True)
    battery = verify.monotone_limit_battery(rep, levels)
    comps = []
    for lo, hi in zip(levels, levels[1:]):
        v = verify.check_multidim_comparison(verify.per_mode_last(hi.Y), verify.per_mode_last(lo.Y))
        comps.append({"n": lo.n, "n_next": hi.n, **v.to_dict()})
    sys_ = cfg.oblique()
    struct = []
    for lo, hi in zip(rep.schedule[:3], rep.schedule[1:4]):
        F1 = verify.oblique_generator(sys_, hi, p.lam, 0.0, p.x0)
        F2 = verify.oblique_generator(sys_, lo, p.lam, 0.0, p.x0)
        r = verify.check_structural_inequality(F1, F2, p.m, p.dim)
        struct.append({"n": lo, "n_next": hi, **r.to_dict()})
    ok = battery.passed and all(c["holds"] for c in comps) and all(s["holds"] for s in struct)
    out = {"battery": battery.to_dict(), "comparison": comps, "structural": struct, "passed": ok}
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_json(cfg.out / "verify.json", out)
    print(f"battery {'passed' if battery.passed else 'FAILED'}; "
          f"comparison {sum(bool(c['holds']) for c in comps)}/{len(comps)}; "
          f"structural {sum(s['holds'] for s in struct)}/{len(struct)}")
    return EXIT_OK if ok else EXIT_CROSS


COMMANDS = {
    "validate": cmd_validate,
    "simulate": cmd_simulate,
    "solve-constrained": cmd_solve_constrained,
    "solve-reflected": cmd_solve_reflected,
    "evaluate": cmd_evaluate,
    "extract-strategy": cmd_extract_strategy,
    "compare": cmd_compare,
    "verify-appendix": cmd_verify_appendix,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cbsde", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="experiment config (JSON)")
        sp.add_argument("--out", default=None, help="output directory (overrides the config)")
        sp.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
        sp.add_argument("--seed", type=int, default=None, help="overrides every seed in the config")
        if name == "evaluate":
            sp.add_argument("--strategy", default=None, help="strategy file (JSON)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.load(args.config, args.out, args.seed)
        return COMMANDS[args.command](cfg, args)
    except (MalformedSpec, InvalidStrategy, NonMarkovian) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NoConvergence, IterationLimit, LadderExhausted, NonTerminating) as exc:
        print(f"no convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONV


if __name__ == "__main__":
    sys.exit(main())
