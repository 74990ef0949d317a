"""Discrete backward solvers: plain, penalized, and the penalization ladder."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .engines import (BackwardResult, LatticeEngine, LsmcEngine, StepModel, run_backward,
                      values_at_lsmc)
from .errors import LadderExhausted, MalformedSpec
from .lattice import Lattice
from .model import CoefficientSpec, ConstraintSpec, DriverSpec
from .simulate import PathSet, TimeGrid, subset

log = logging.getLogger(__name__)

DEFAULT_SCHEDULE = tuple(2**e for e in range(15))
MONOTONE_TOL = 1e-8
LADDER_TOL = 1e-3


def as_engine(engine):
    if isinstance(engine, (LatticeEngine, LsmcEngine)):
        return engine
    if isinstance(engine, Lattice):
        return LatticeEngine(engine)
    raise MalformedSpec("engine must be a Lattice, LatticeEngine or LsmcEngine")


@dataclass
class BackwardSolution:
    """Discrete solution stored as per-mode values.

    ``Y[k, i, q]`` is v_k(i, .) at lattice node or path ``q``; the one
    dimensional solution along a path is Y[k, I_k]. ``U[k][i, j]`` is the
    jump component y_j - y_i seen from regime i. ``dK[k, i, q]`` is the
    penalty increment n * dt * sum_j lambda_j h^-.
    """

    engine: str
    grid: TimeGrid
    Y: np.ndarray
    Z: np.ndarray
    dK: np.ndarray
    n: float
    i0: int
    y0: float
    violation: float
    k_norm: float
    implicit: bool = True
    sweeps: int = 1
    residual: float = 0.0
    stderr: float | None = None
    _engine: object = field(default=None, repr=False)
    _model: StepModel | None = field(default=None, repr=False)
    _terminal: object = field(default=None, repr=False)
    _result: BackwardResult | None = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return self.Y.shape[1]

    def U(self, k: int) -> np.ndarray:
        y = self.Y[k]
        return y[None, :, :] - y[:, None, :]

    def values_at(self, k: int, x, feats=None) -> np.ndarray:
        """Per-mode values at arbitrary states, shape (S, m)."""
        eng = self._engine
        if isinstance(eng, LatticeEngine):
            return np.column_stack([eng.L.interpolate(self.Y[k, i], x) for i in range(self.m)])
        return values_at_lsmc(self._result, eng, self._model, self._terminal, k, x, feats)

    def y0_mode(self, i: int) -> float:
        eng = self._engine
        if isinstance(eng, LatticeEngine):
            return float(self.Y[0, i, eng.L.origin])
        return float(self.Y[0, i].mean())

    def along_paths(self, ps: PathSet | None = None) -> dict:
        """One-dimensional processes (Y, U, K) along paths.

        For the LSMC engine ``ps`` defaults to the engine's own paths.
        Returns arrays Y (S, N+1), U (S, N+1, m) with U(i) = y_i - y_{I},
        and K (S, N+1) with K_0 = 0.
        """
        eng = self._engine
        N = self.grid.N
        if ps is None:
            if not isinstance(eng, LsmcEngine):
                raise MalformedSpec("lattice solutions need explicit paths")
            ps = eng.paths
        S = len(ps)
        Yp = np.empty((S, N + 1))
        Up = np.empty((S, N + 1, self.m))
        K = np.zeros((S, N + 1))
        rows = np.arange(S)
        for k in range(N + 1):
            if isinstance(eng, LsmcEngine) and ps is eng.paths:
                vals = self.Y[k].T
                dk = self.dK[k].T if k < N else None
            else:
                vals = self.values_at(k, ps.X[:, k])
                dk = (np.column_stack([eng.L.interpolate(self.dK[k, i], ps.X[:, k]) for i in range(self.m)])
                      if k < N else None)
            cur = ps.I[:, k]
            Yp[:, k] = vals[rows, cur]
            Up[:, k] = vals - Yp[:, k][:, None]
            if k < N:
                K[:, k + 1] = K[:, k] + dk[rows, cur]
        return {"Y": Yp, "U": Up, "K": K}


def _solve(driver, constraint, terminal, engine, n, stderr_batches: int = 0) -> BackwardSolution:
    eng = as_engine(engine)
    if driver.m != eng.p.m:
        raise MalformedSpec("driver and forward model disagree on the number of modes")
    if driver.lipschitz is None:
        raise MalformedSpec("driver needs a Lipschitz certificate")
    model = StepModel.build(driver, constraint, eng.p.lam, n)
    dt = eng.grid.dt
    if n * dt * float(eng.p.lam.sum()) >= 1:
        log.info("penalty level %s: n*dt*sum(lambda) >= 1, implicit step required", n)
    res = run_backward(eng, model, terminal)
    stderr = None
    if isinstance(eng, LsmcEngine) and stderr_batches > 1:
        stderr = _batch_stderr(eng, model, terminal, stderr_batches)
    return BackwardSolution(
        engine=eng.tag, grid=eng.grid, Y=res.Y, Z=res.Z, dK=res.dK, n=float(n), i0=eng.p.i0,
        y0=eng.y0(res.Y[0]), violation=res.violation, k_norm=res.k_norm, implicit=True,
        sweeps=res.sweeps, residual=res.residual, stderr=stderr,
        _engine=eng, _model=model, _terminal=terminal, _result=res)


def _batch_stderr(eng: LsmcEngine, model: StepModel, terminal, B: int) -> float:
    """Standard error of Y_0 from B independent sub-batches of the paths."""
    S = len(eng.paths)
    vals = []
    for b in range(B):
        sub = subset(eng.paths, np.arange(b, S, B))
        sub_eng = LsmcEngine(eng.p, sub, eng.basis)
        res = run_backward(sub_eng, model, terminal, record_residual=False)
        vals.append(sub_eng.y0(res.Y[0]))
    return float(np.std(vals, ddof=1) / np.sqrt(B))


def solve_bsde(driver: DriverSpec, terminal: CoefficientSpec, engine, stderr_batches: int = 0) -> BackwardSolution:
    """Unpenalized backward scheme; K is identically zero."""
    return _solve(driver, None, terminal, engine, 0.0, stderr_batches)


def solve_penalized(driver: DriverSpec, constraint: ConstraintSpec, terminal: CoefficientSpec, n: float,
                    engine, stderr_batches: int = 0) -> BackwardSolution:
    """Scheme with the penalty n * sum_j lambda_j h^-(., j) added to the driver."""
    if n < 0:
        raise MalformedSpec("penalty level must be non-negative")
    return _solve(driver, constraint, terminal, engine, n, stderr_batches)


@dataclass
class PenalizationReport:
    schedule: list
    y0: list
    violation: list
    k_norm: list
    monotone_flags: list
    violation_flags: list
    gaps: list
    stderr: list
    tol: float
    converged: bool = False
    converged_at: float | None = None
    gap: float = float("nan")
    engine: str = "lattice"

    @property
    def monotone(self) -> bool:
        return all(self.monotone_flags)

    @property
    def violation_nonincreasing(self) -> bool:
        return all(self.violation_flags)

    def to_dict(self) -> dict:
        return {
            "schedule": [float(n) for n in self.schedule],
            "y0": list(self.y0),
            "violation": list(self.violation),
            "k_norm": list(self.k_norm),
            "monotone": self.monotone,
            "monotone_flags": list(self.monotone_flags),
            "violation_nonincreasing": self.violation_nonincreasing,
            "gaps": list(self.gaps),
            "stderr": [None if s is None else float(s) for s in self.stderr],
            "tol": self.tol,
            "converged": self.converged,
            "converged_at": self.converged_at,
            "gap": self.gap,
            "engine": self.engine,
        }


def penalization_ladder(driver: DriverSpec, constraint: ConstraintSpec, terminal: CoefficientSpec, engine,
                        schedule=None, tol: float | None = None, stop_early: bool = False,
                        keep_levels: bool = False, stderr_batches: int = 10):
    """Solve the penalized scheme along an increasing schedule of penalty levels.

    Converged at the first consecutive pair (n, n') with |Y^{n'}_0 - Y^n_0|
    <= tol and violation(n') <= tol; ``converged_at`` records n. The full
    schedule is run unless ``stop_early``; the last solution is returned.
    On the lattice ``tol`` defaults to 1e-3. On paths it defaults to three
    standard errors of Y_0, never below 1e-3 (the penalization bias does
    not shrink with the path count); the standard error comes from
    ``stderr_batches`` sub-batches solved at the finest level run (at
    every level with ``stop_early``). Returns (solution, report), plus the
    list of solutions when ``keep_levels``.
    """
    eng = as_engine(engine)
    schedule = list(DEFAULT_SCHEDULE if schedule is None else schedule)
    if not schedule or any(b <= a for a, b in zip(schedule, schedule[1:])) or schedule[0] < 0:
        raise MalformedSpec("schedule must be a non-empty increasing sequence of levels")
    lsmc = isinstance(eng, LsmcEngine)
    report = PenalizationReport(schedule, [], [], [], [], [], [], [], tol if tol is not None else LADDER_TOL,
                                engine=eng.tag)
    levels = []
    prev = None
    sol = None
    lattice_mono = []
    model = None
    for n in schedule:
        sol = solve_penalized(driver, constraint, terminal, n, eng)
        model = sol._model
        if lsmc and stop_early and stderr_batches > 1:
            sol.stderr = _batch_stderr(eng, model, terminal, stderr_batches)
        report.y0.append(sol.y0)
        report.violation.append(sol.violation)
        report.k_norm.append(sol.k_norm)
        report.stderr.append(sol.stderr)
        if keep_levels:
            levels.append(sol)
        if prev is not None and not lsmc:
            lattice_mono.append(bool(np.all(prev.Y <= sol.Y + MONOTONE_TOL)))
        if stop_early and prev is not None and _pair_converged(report, prev, sol, lsmc, tol):
            break
        prev = sol
    if lsmc and not stop_early and stderr_batches > 1:
        sol.stderr = _batch_stderr(eng, model, terminal, stderr_batches)
        report.stderr[-1] = sol.stderr
    _fill_flags(report, lattice_mono, lsmc, tol, sol.stderr if lsmc else None, stop_early)
    if not report.converged:
        raise LadderExhausted("penalization schedule ended before convergence", sol, report)
    if keep_levels:
        return sol, report, levels
    return sol, report


def _pair_converged(report, prev, sol, lsmc, tol) -> bool:
    level_tol = tol if tol is not None else (max(3 * (sol.stderr or 0.0), LADDER_TOL) if lsmc else LADDER_TOL)
    return abs(sol.y0 - prev.y0) <= level_tol and sol.violation <= level_tol


def _fill_flags(report: PenalizationReport, lattice_mono, lsmc: bool, tol, se, stop_early: bool) -> None:
    """Monotonicity, violation and convergence flags from the recorded levels."""
    y0, viol = report.y0, report.violation
    se = float(se or 0.0)
    level_tol = tol if tol is not None else (max(3 * se, LADDER_TOL) if lsmc else LADDER_TOL)
    report.tol = level_tol
    for q in range(1, len(y0)):
        gap = abs(y0[q] - y0[q - 1])
        if lsmc:
            pooled = np.sqrt(2.0) * se
            mono = y0[q - 1] <= y0[q] + 2 * pooled + MONOTONE_TOL
            vflag = viol[q] <= viol[q - 1] + 2 * pooled * pooled + MONOTONE_TOL
        else:
            mono = lattice_mono[q - 1]
            vflag = viol[q] <= viol[q - 1] + 1e-12
        report.monotone_flags.append(bool(mono))
        report.violation_flags.append(bool(vflag))
        report.gaps.append(gap)
        report.gap = gap
        if not report.converged and gap <= level_tol and viol[q] <= level_tol:
            report.converged = True
            report.converged_at = float(report.schedule[q - 1])


@dataclass
class ComparisonVerdict:
    holds: bool
    max_excess: float
    witness: dict | None
    preconditions: dict

    def to_dict(self) -> dict:
        return {"holds": self.holds, "max_excess": self.max_excess, "witness": self.witness,
                "preconditions": self.preconditions}


def driver_values(driver: DriverSpec, t: float, x, y: np.ndarray, Z: np.ndarray, feats=None) -> np.ndarray:
    """f(t, i, x, y_i, z_i, (y_j - y_i)_j) for every mode i at every point; shape (m, P)."""
    m = y.shape[0]
    out = np.empty_like(y)
    for i in range(m):
        u = y - y[i][None, :]
        out[i] = (driver.running_term(t, i, x, feats) + driver.y_coef[i] * y[i]
                  + Z[i] @ driver.z_coef[i] + (driver.u_coef[i][:, None] * u).sum(axis=0))
    return out


def check_comparison(run1, run2, engine, tol: float = 1e-8) -> ComparisonVerdict:
    """Solve two runs on common randomness and test Y^1 <= Y^2 + tol everywhere.

    A run is ``(driver, terminal)`` or ``(driver, terminal, constraint, n)``;
    the second form adds the nondecreasing penalty K to the run.
    """
    eng = as_engine(engine)
    sols = []
    for run in (run1, run2):
        if len(run) == 2:
            sols.append(solve_bsde(run[0], run[1], eng))
        else:
            sols.append(solve_penalized(run[0], run[2], run[1], run[3], eng))
    s1, s2 = sols
    grid = eng.grid
    pre = {}
    pre["terminal_ordered"] = bool(np.all(s1.Y[-1] <= s2.Y[-1] + 1e-12))
    worst = -np.inf
    for k in range(grid.N):
        x, f = eng.states(k), eng.features(k)
        f1 = driver_values(run1[0], grid.t(k), x, s1.Y[k], s1.Z[k], f)
        f2 = driver_values(run2[0], grid.t(k), x, s1.Y[k], s1.Z[k], f)
        worst = max(worst, float(np.max(f1 - f2)))
    pre["driver_ordered"] = bool(worst <= 1e-12)
    W = run2[0].u_coef
    pre["jump_certificate"] = bool(np.all(W[~np.eye(W.shape[0], dtype=bool)] >= 0)
                                   or run2[0].gamma_bounds is not None)
    diff = s1.Y - s2.Y
    idx = np.unravel_index(int(np.argmax(diff)), diff.shape)
    excess = float(diff[idx])
    holds = excess <= tol
    witness = None if holds else {"k": int(idx[0]), "mode": int(idx[1]) + 1, "point": int(idx[2]),
                                  "excess": excess}
    return ComparisonVerdict(bool(holds), excess, witness, pre)
