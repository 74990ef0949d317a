"""Obliquely reflected BSDE systems: penalized route, iterated-barrier route, identification."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bsde import BackwardSolution, as_engine, solve_bsde, solve_penalized
from .engines import LatticeEngine, StepModel
from .errors import IterationLimit, MalformedSpec
from .lattice import write_lattice_csv
from .model import ObliqueSystemSpec, oblique_to_constrained
from .simulate import TimeGrid

PICARD_TOL = 1e-9


def barrier_of(Y: np.ndarray, sys: ObliqueSystemSpec, grid: TimeGrid) -> np.ndarray:
    """O_k(i) = max_{j in A_i} (Y_k(j) + c_ij(t_k)); -inf where A_i is empty."""
    O = np.full(Y.shape, -np.inf)
    for k in range(Y.shape[0]):
        C = sys.shifts.at(grid.t(k))
        for i in range(sys.m):
            js = np.flatnonzero(sys.allowed[i])
            if js.size:
                O[k, i] = np.max(Y[k, js] + C[i, js][:, None], axis=0)
    return O


@dataclass
class ReflectedSolution:
    """Per-mode (Y^i, Z^i, K^i) on the grid with the barrier O^i."""

    engine: str
    grid: TimeGrid
    sys: ObliqueSystemSpec
    Y: np.ndarray        # (N+1, m, P)
    Z: np.ndarray        # (N, m, P, d)
    dK: np.ndarray       # (N, m, P)
    barrier: np.ndarray  # (N+1, m, P)
    route: str
    rounds: int = 0
    n: float | None = None
    history: list = field(default_factory=list, repr=False)
    _engine: object = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return self.Y.shape[1]

    def y0_mode(self, i: int) -> float:
        if isinstance(self._engine, LatticeEngine):
            return float(self.Y[0, i, self._engine.L.origin])
        return float(self.Y[0, i].mean())

    def values_at(self, k: int, x, feats=None) -> np.ndarray:
        eng = self._engine
        if isinstance(eng, LatticeEngine):
            return np.column_stack([eng.L.interpolate(self.Y[k, i], x) for i in range(self.m)])
        raise MalformedSpec("off-path evaluation of a path-based reflected solution is not available")

    def obstacle_gap(self) -> float:
        """min over (k < N, i, point) of Y - O; non-negative when the obstacle holds."""
        gap = self.Y[:-1] - self.barrier[:-1]
        return float(np.min(np.where(np.isfinite(gap), gap, np.inf)))

    def skorokhod(self) -> np.ndarray:
        """Per-mode sum_k (Y_k - O_k) dK_k, maximised over points."""
        gap = np.where(np.isfinite(self.barrier[:-1]), self.Y[:-1] - self.barrier[:-1], 0.0)
        return (gap * self.dK).sum(axis=0).max(axis=1)

    def to_csv(self, path) -> None:
        eng = self._engine
        if not isinstance(eng, LatticeEngine):
            raise MalformedSpec("CSV export is available for lattice solutions")
        dK = np.concatenate([self.dK, np.zeros((1,) + self.dK.shape[1:])])
        write_lattice_csv(path, eng.L, {"Y": self.Y, "barrier": self.barrier, "dK": dK})


def solve_oblique_penalized(sys: ObliqueSystemSpec, n: float, engine) -> ReflectedSolution:
    """Penalized system: penalty n sum_{j in A_i} lambda_j [Y^i - h_ij(Y^j)]^- in mode i."""
    eng = as_engine(engine)
    driver, constraint, terminal = oblique_to_constrained(sys)
    sol = solve_penalized(driver, constraint, terminal, n, eng)
    return ReflectedSolution(sol.engine, sol.grid, sys, sol.Y, sol.Z, sol.dK,
                             barrier_of(sol.Y, sys, sol.grid), "penalized", 0, float(n), _engine=eng)


def solve_oblique_picard(sys: ObliqueSystemSpec, engine, max_rounds: int = 50,
                         tol: float = PICARD_TOL, keep_history: bool = False) -> ReflectedSolution:
    """Iterated single-barrier scheme.

    Round 0 is the unreflected system. Round r solves, for each mode, the
    reflected equation with barrier max_j (Y^{j, r-1} + c_ij) by the backward
    recursion y = max(O, continuation + dt * psi) (a Snell envelope when the
    driver does not depend on y). Stops when sup |Y^r - Y^{r-1}| <= tol.
    """
    eng = as_engine(engine)
    driver, _, terminal = oblique_to_constrained(sys)
    base = solve_bsde(driver, terminal, eng)
    grid = eng.grid
    N, dt, m = grid.N, grid.dt, sys.m
    Y_prev = base.Y
    Z_prev = base.Z
    history = [Y_prev.copy()] if keep_history else []
    model = StepModel.build(driver, None, eng.p.lam, 0.0)
    B = sys.coupling
    with_z = bool(np.any(sys.z_coef)) or not eng.p.sigma.is_zero()
    dK = np.zeros((N, m, eng.points))
    for r in range(1, max_rounds + 1):
        O = barrier_of(Y_prev, sys, grid)
        Y = np.empty_like(Y_prev)
        Z = np.zeros_like(Z_prev)
        Y[N] = Y_prev[N]
        dK = np.zeros((N, m, eng.points))
        for k in range(N - 1, -1, -1):
            t = grid.t(k)
            A, Zk, _ = eng.continuation(k, Y[k + 1], with_z)
            x, f = eng.states(k), eng.features(k)
            for i in range(m):
                others = np.delete(np.arange(m), i)
                expl = (driver.running_term(t, i, x, f) + Zk[i] @ sys.z_coef[i]
                        + (B[i, others][:, None] * Y_prev[k, others]).sum(axis=0))
                cont = (A[i] + dt * expl) / (1.0 - dt * B[i, i])
                Y[k, i] = np.maximum(O[k, i], cont)
                dK[k, i] = Y[k, i] - cont
            Z[k] = Zk
        change = float(np.max(np.abs(Y - Y_prev)))
        if keep_history:
            history.append(Y.copy())
        Y_prev, Z_prev = Y, Z
        if change <= tol:
            return ReflectedSolution(eng.tag, grid, sys, Y, Z, dK, barrier_of(Y, sys, grid), "picard",
                                     r, None, history, eng)
    raise IterationLimit(f"Picard iteration did not settle in {max_rounds} rounds")


def identify_constrained(sol: ReflectedSolution, i0: int | None = None) -> BackwardSolution:
    """One-dimensional quadruple built from the reflected family.

    Y~ = Y^{I}, Z~ = Z^{I_-}, U~(i) = Y^i - Y^{I_-} and K~ accumulates the
    reflection increments of the current mode; use ``along_paths`` on the
    result for pathwise arrays.
    """
    eng = sol._engine
    grid = sol.grid
    i0 = eng.p.i0 if i0 is None else i0
    driver, constraint, terminal = oblique_to_constrained(sol.sys)
    model = StepModel.build(driver, constraint, eng.p.lam, 0.0)
    violation, k_norm = 0.0, 0.0
    for k in range(grid.N):
        w = eng.occupation(k)
        h = model.penalty_parts(grid.t(k), sol.Y[k])
        violation += float((w * ((h**2) * model.lam[None, :, None]).sum(axis=1)).sum()) * grid.dt
        k_norm += float((w * sol.dK[k]).sum())
    y0 = sol.y0_mode(i0)
    return BackwardSolution(eng.tag, grid, sol.Y, sol.Z, sol.dK, float("inf"), i0, y0, violation,
                            k_norm, _engine=eng, _model=model, _terminal=terminal)


def constraint_slack(sol: BackwardSolution, constraint_costs) -> float:
    """min over nodes of Y^I - Y^j - c(t, I, j) on allowed pairs (>= 0 when satisfied)."""
    grid = sol.grid
    worst = np.inf
    for k in range(grid.N):
        C = constraint_costs.costs.at(grid.t(k))
        A = constraint_costs.allowed
        y = sol.Y[k]
        slack = y[:, None, :] - y[None, :, :] - C[:, :, None]
        worst = min(worst, float(np.min(np.where(A[:, :, None], slack, np.inf))))
    return worst
