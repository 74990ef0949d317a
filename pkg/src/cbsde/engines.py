"""Backward scheme shared by the constrained, penalized and reflected solvers.

Both engines represent the solution by per-mode (frozen regime) values
v_k(i, x): on the lattice at the nodes, on paths at every simulated state.
One backward step reads

    y_i = A_i + dt * f(t_k, i, x, y_i, z_i, (y_j - y_i)_j)
              + n * dt * sum_{j in A_i} lambda_j * (y_j - y_i + c_ij)^+,

with A_i the mode-i continuation E^i[v_{k+1}(i, X_{k+1})]. Writing the
continuation this way, rather than as the full-kernel expectation minus the
jump compensator, is an exact identity on the lattice (the realised jump sum
telescopes against the compensator) and removes a large variance term on paths.
The step is solved implicitly in y, exactly, mode by mode (Gauss-Seidel
across modes).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MalformedSpec, NoConvergence
from .lattice import Lattice
from .lsmc import BasisSpec, RegressionOperator, fit_conditional
from .model import ConstraintSpec, CostSpec, DriverSpec, SwitchingProblem
from .simulate import PathSet

GS_TOL = 1e-12
GS_SWEEPS = 100


def solve_mode(a: float, R: np.ndarray, b: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Root of a*y - sum_j omega_j (b_j - y)^+ - R = 0 per point.

    ``R``: (P,), ``b``: (J, P), ``omega``: (J,). The left side is increasing
    in y, so the active set is {j : G(b_j) > 0} and the root is explicit.
    """
    if b.shape[0] == 0:
        return R / a
    G = a * b - R[None, :]
    for j in range(b.shape[0]):
        G[j] -= (omega[:, None] * np.maximum(b - b[j][None, :], 0.0)).sum(axis=0)
    active = G > 0
    num = R + (np.where(active, b, 0.0) * omega[:, None]).sum(axis=0)
    den = a + (active * omega[:, None]).sum(axis=0)
    return num / den


def node_solve(A: np.ndarray, base: np.ndarray, beta: np.ndarray, W: np.ndarray,
               omega: np.ndarray, C: np.ndarray, allowed: np.ndarray, dt: float,
               tol: float = GS_TOL, max_sweeps: int = GS_SWEEPS):
    """Solve the implicit step for all modes at all points.

    ``A``, ``base``: (m, P) continuation and explicit driver part (running
    term plus gamma . z); ``beta`` (m,), ``W`` (m, m) coupling coefficients,
    ``omega`` (m,) penalty weights n * dt * lambda_j. Returns (y, sweeps).
    """
    m = A.shape[0]
    a = 1.0 - dt * (beta - W.sum(axis=1))
    if np.any(a <= 0):
        raise NoConvergence("implicit step ill-posed: dt * (y-Lipschitz) >= 1; refine the grid")
    y = A.copy()
    coupled = np.any(W) or (np.any(omega > 0) and np.any(allowed))
    if m == 1 or not coupled:
        return (A + dt * base) / a[:, None], 1
    for sweep in range(1, max_sweeps + 1):
        change = 0.0
        for i in range(m):
            js = np.flatnonzero(allowed[i] & (omega > 0))
            R = A[i] + dt * (base[i] + W[i] @ y)
            new = solve_mode(a[i], R, y[js] + C[i, js][:, None], omega[js])
            change = max(change, float(np.max(np.abs(new - y[i]))) if new.size else 0.0)
            y[i] = new
        if change <= tol * (1.0 + float(np.max(np.abs(y)))):
            return y, sweep
    raise NoConvergence(f"cross-mode fixed point did not converge in {max_sweeps} sweeps")


class LatticeEngine:
    """Exact conditional expectations on a lattice."""

    tag = "lattice"

    def __init__(self, L: Lattice):
        self.L = L
        self.p = L.p
        self.grid = L.grid
        self._pi = None

    @property
    def points(self) -> int:
        return self.L.M

    def states(self, k: int) -> np.ndarray:
        return self.L.nodes

    def features(self, k: int):
        return None

    def continuation(self, k: int, y_next: np.ndarray, with_z: bool):
        m, d = y_next.shape[0], self.p.dim
        A = np.stack([self.L.expect_frozen(y_next[i], k, i) for i in range(m)])
        if with_z:
            Z = np.stack([self.L.expect_frozen_dw(y_next[i], k, i) for i in range(m)])
        else:
            Z = np.zeros((m, self.L.M, d))
        return A, Z, None

    def running_terms(self, driver: DriverSpec, k: int) -> np.ndarray:
        return _running(driver, self.grid.t(k), self.states(k), None)

    def occupation(self, k: int) -> np.ndarray:
        if self._pi is None:
            self._pi = self.L.forward_distribution()
        return self._pi[k]

    def y0(self, Y0: np.ndarray) -> float:
        return float(Y0[self.p.i0, self.L.origin])


class LsmcEngine:
    """Regression estimates over a fixed set of simulated paths."""

    tag = "lsmc"

    def __init__(self, p: SwitchingProblem, paths: PathSet, basis: BasisSpec | None = None):
        self.p = p
        self.paths = paths
        self.grid = paths.grid
        self.basis = basis or BasisSpec()
        if p.feature_map and self.basis.kind != "PathFeature":
            self.basis = BasisSpec("PathFeature", self.basis.degree)
        self._running = {}

    def running_terms(self, driver: DriverSpec, k: int) -> np.ndarray:
        # the running term does not depend on the penalty level; cache it per coefficient
        coef = driver.running
        key = (id(coef), k)
        hit = self._running.get(key)
        if hit is None or hit[0] is not coef:
            hit = (coef, _running(driver, self.grid.t(k), self.states(k), self.features(k)))
            self._running[key] = hit
        return hit[1]

    @property
    def points(self) -> int:
        return len(self.paths)

    def states(self, k: int) -> np.ndarray:
        return self.paths.X[:, k]

    def features(self, k: int):
        return None if self.paths.features is None else self.paths.features[:, k]

    def continuation(self, k: int, y_next: np.ndarray, with_z: bool):
        m, d = y_next.shape[0], self.p.dim
        ps = self.paths
        if with_z:
            dw = ps.dW[:, k] / self.grid.dt
            resp = np.concatenate([y_next[:, :, None], y_next[:, :, None] * dw[None, :, :]], axis=2)
        else:
            resp = y_next[:, :, None]
        op = fit_conditional(ps.X[:, k], ps.I[:, k], resp, self.basis, m, self.features(k), per_mode=True)
        pred = _predict_modes(op, ps.X[:, k], self.features(k), m)
        A = pred[:, :, 0]
        Z = pred[:, :, 1:] if with_z else np.zeros((m, len(ps), d))
        return A, Z, op

    def occupation(self, k: int) -> np.ndarray:
        S = len(self.paths)
        w = np.zeros((self.p.m, S))
        w[self.paths.I[:, k], np.arange(S)] = 1.0 / S
        return w

    def y0(self, Y0: np.ndarray) -> float:
        return float(Y0[self.p.i0].mean())


def _running(driver: DriverSpec, t: float, x, feats) -> np.ndarray:
    return np.stack([driver.running_term(t, i, x, feats) for i in range(driver.m)])


def _predict_modes(op: RegressionOperator, x, feats, m: int) -> np.ndarray:
    out = []
    for i in range(m):
        v = op.predict(i, x, feats)
        out.append(v[:, None] if v.ndim == 1 else v)
    return np.stack(out)


@dataclass
class StepModel:
    """Everything the backward step needs besides the continuation."""

    driver: DriverSpec
    costs: CostSpec | None
    allowed: np.ndarray
    lam: np.ndarray
    n: float

    @classmethod
    def build(cls, driver: DriverSpec, constraint: ConstraintSpec | None, lam, n: float):
        m = driver.m
        if constraint is None:
            return cls(driver, None, np.zeros((m, m), dtype=bool), np.asarray(lam, float), 0.0)
        if constraint.m != m:
            raise MalformedSpec("driver and constraint disagree on the number of modes")
        return cls(driver, constraint.costs, constraint.allowed, np.asarray(lam, float), float(n))

    def cost(self, t: float) -> np.ndarray:
        m = self.driver.m
        return np.zeros((m, m)) if self.costs is None else self.costs.at(t)

    def with_z(self) -> bool:
        return bool(np.any(self.driver.z_coef))

    def step(self, t: float, x, feats, A: np.ndarray, Z: np.ndarray, dt: float, running=None):
        base = _running(self.driver, t, x, feats) if running is None else running
        base = base + np.einsum("id,ipd->ip", self.driver.z_coef, Z)
        omega = self.n * dt * self.lam
        C = self.cost(t)
        y, sweeps = node_solve(A, base, self.driver.y_coef, self.driver.u_coef, omega, C,
                               self.allowed, dt)
        return y, sweeps

    def penalty_parts(self, t: float, y: np.ndarray):
        """(h^-)_{ij} = (y_j - y_i + c_ij)^+ on allowed pairs; shape (m, m, P)."""
        C = self.cost(t)
        h = np.maximum(y[None, :, :] - y[:, None, :] + C[:, :, None], 0.0)
        return np.where(self.allowed[:, :, None], h, 0.0)


@dataclass
class BackwardResult:
    Y: np.ndarray
    Z: np.ndarray
    dK: np.ndarray
    operators: list
    violation: float
    k_norm: float
    sweeps: int
    residual: float


def run_backward(engine, model: StepModel, terminal, record_residual: bool = True) -> BackwardResult:
    grid = engine.grid
    N, dt, m, P, d = grid.N, grid.dt, model.driver.m, engine.points, engine.p.dim
    Y = np.empty((N + 1, m, P))
    Z = np.zeros((N, m, P, d))
    dK = np.zeros((N, m, P))
    ops = [None] * N
    xN, fN = engine.states(N), engine.features(N)
    Y[N] = np.stack([terminal.scalar(grid.T, i, xN, fN) for i in range(m)])
    # Z is part of the solution, so it is estimated whenever there is Brownian noise
    with_z = model.with_z() or not engine.p.sigma.is_zero()
    sweeps, residual = 0, 0.0
    for k in range(N - 1, -1, -1):
        t = grid.t(k)
        A, Zk, op = engine.continuation(k, Y[k + 1], with_z)
        x, f = engine.states(k), engine.features(k)
        run = engine.running_terms(model.driver, k)
        y, s = model.step(t, x, f, A, Zk, dt, run)
        sweeps = max(sweeps, s)
        Y[k], Z[k], ops[k] = y, Zk, op
        if model.n > 0:
            dK[k] = model.n * dt * (model.penalty_parts(t, y) * model.lam[None, :, None]).sum(axis=1)
        if record_residual:
            u = y[None, :, :] - y[:, None, :]  # u[i, j] = y_j - y_i
            fval = np.stack([
                run[i] + model.driver.y_coef[i] * y[i]
                + Zk[i] @ model.driver.z_coef[i] + (model.driver.u_coef[i][:, None] * u[i]).sum(axis=0)
                for i in range(m)])
            residual = max(residual, float(np.max(np.abs(y - A - fval * dt - dK[k]))))
    violation, k_norm = 0.0, 0.0
    for k in range(N):
        w = engine.occupation(k)
        if np.any(model.allowed):
            h = model.penalty_parts(grid.t(k), Y[k])
            viol = ((h**2) * model.lam[None, :, None]).sum(axis=1)
            violation += float((w * viol).sum()) * dt
        k_norm += float((w * dK[k]).sum())
    return BackwardResult(Y, Z, dK, ops, violation, k_norm, sweeps, residual)


def values_at_lsmc(result: BackwardResult, engine: LsmcEngine, model: StepModel, terminal, k: int,
                   x, feats=None) -> np.ndarray:
    """Recompute per-mode values at arbitrary states from the stored regressions; (S, m)."""
    x = np.atleast_2d(np.asarray(x, float))
    m = model.driver.m
    grid = engine.grid
    if k == grid.N:
        return np.stack([terminal.scalar(grid.T, i, x, feats) for i in range(m)], axis=1)
    pred = _predict_modes(result.operators[k], x, feats, m)
    A = pred[:, :, 0]
    Z = pred[:, :, 1:] if pred.shape[2] > 1 else np.zeros((m, x.shape[0], engine.p.dim))
    y, _ = model.step(grid.t(k), x, feats, A, Z, grid.dt)
    return y.T
