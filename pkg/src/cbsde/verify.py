"""Cone geometry, viability and multidimensional comparison checks, monotone-limit battery."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Callable

import numpy as np

from .errors import MalformedSpec

FEAS_TOL = 1e-12


@dataclass(frozen=True)
class ConvexCone:
    """Polyhedral cone with a closed-form or enumerable projection.

    kinds: ``orthant`` ((R+)^p x R^q, ``mask`` marks the constrained
    coordinates), ``halfspace`` ({x : <a, x> >= 0}) and ``intersection``
    ({x : A x >= 0} with at most 8 rows).
    """

    kind: str
    dim: int
    mask: np.ndarray | None = None
    normals: np.ndarray | None = None

    @classmethod
    def orthant_product(cls, p: int, q: int = 0) -> "ConvexCone":
        return cls("orthant", p + q, mask=np.arange(p + q) < p)

    @classmethod
    def halfspace(cls, a) -> "ConvexCone":
        a = np.asarray(a, float)
        if not np.any(a):
            raise MalformedSpec("halfspace normal must be non-zero")
        return cls("halfspace", a.shape[0], normals=a[None, :])

    @classmethod
    def intersection(cls, A) -> "ConvexCone":
        A = np.atleast_2d(np.asarray(A, float))
        if A.shape[0] > 8:
            raise MalformedSpec("at most 8 halfspaces are supported")
        return cls("intersection", A.shape[1], normals=A)

    def contains(self, x, tol: float = FEAS_TOL) -> np.ndarray:
        x = np.asarray(x, float)
        if self.kind == "orthant":
            return np.all(np.where(self.mask, x >= -tol, True), axis=-1)
        return np.all(x @ self.normals.T >= -tol, axis=-1)


def project_cone(C: ConvexCone, x) -> np.ndarray:
    """Euclidean projection onto C; works on the last axis of ``x``."""
    x = np.asarray(x, float)
    if x.shape[-1] != C.dim:
        raise MalformedSpec(f"point dimension {x.shape[-1]} does not match cone dimension {C.dim}")
    if C.kind == "orthant":
        return np.where(C.mask, np.maximum(x, 0.0), x)
    A = C.normals
    flat = x.reshape(-1, C.dim)
    best = np.where(C.contains(flat)[:, None], flat, np.nan)
    best_d = np.where(np.isnan(best[:, 0]), np.inf, 0.0)
    k = A.shape[0]
    for r in range(1, min(k, C.dim) + 1):
        for S in combinations(range(k), r):
            As = A[list(S)]
            G = As @ As.T
            if np.linalg.matrix_rank(G) < r:
                continue
            # the projection lies on some face {A_S y = 0} and equals the orthogonal
            # projection onto it, so the nearest feasible face projection is exact
            lam = np.linalg.solve(G, As @ flat.T)  # (r, P)
            y = flat - (As.T @ lam).T
            ok = C.contains(y, 1e-10)
            d = np.linalg.norm(flat - y, axis=1)
            better = ok & (d < best_d)
            best[better] = y[better]
            best_d[better] = d[better]
    # the apex is always feasible
    apex = ~np.isfinite(best_d)
    best[apex] = 0.0
    return best.reshape(x.shape)


def cone_distance(C: ConvexCone, x) -> np.ndarray:
    x = np.asarray(x, float)
    return np.linalg.norm(x - project_cone(C, x), axis=-1)


@dataclass
class Verdict:
    holds: bool | None
    max_distance: float
    witness: dict | None = None
    reason: str = ""

    def __bool__(self) -> bool:
        return bool(self.holds)

    def to_dict(self) -> dict:
        return {"holds": self.holds, "max_distance": self.max_distance, "witness": self.witness,
                "reason": self.reason}


def check_viability(Y, C: ConvexCone, tol: float = 1e-8) -> Verdict:
    """max over all leading indices of d_C(Y) <= tol. ``Y`` has the vector axis last."""
    Y = np.asarray(Y, float)
    d = cone_distance(C, Y)
    if d.size == 0:
        return Verdict(True, 0.0)
    idx = np.unravel_index(int(np.argmax(d)), d.shape)
    worst = float(d[idx])
    holds = worst <= tol
    witness = None if holds else {"index": [int(i) for i in idx], "value": Y[idx].tolist(),
                                  "distance": worst}
    return Verdict(holds, worst, witness)


def stack_for_comparison(Y1, Y2) -> np.ndarray:
    """(Y1 - Y2, Y2) along the last axis."""
    Y1 = np.asarray(Y1, float)
    Y2 = np.asarray(Y2, float)
    return np.concatenate([Y1 - Y2, Y2], axis=-1)


def check_multidim_comparison(Y1, Y2, tol: float = 1e-8, terminal_index: int = -1) -> Verdict:
    """Viability of (Y1 - Y2, Y2) in (R+)^m x R^m, i.e. Y1 >= Y2 - tol everywhere.

    ``Y1``, ``Y2``: arrays with time on the first axis and the m components
    on the last axis. A terminal ordering failure is reported as a
    precondition failure with ``holds = None``.
    """
    Y1 = np.asarray(Y1, float)
    Y2 = np.asarray(Y2, float)
    if Y1.shape != Y2.shape:
        raise MalformedSpec("runs must have the same shape")
    m = Y1.shape[-1]
    if np.any(Y1[terminal_index] < Y2[terminal_index] - tol):
        bad = np.unravel_index(int(np.argmin(Y1[terminal_index] - Y2[terminal_index])), Y1[terminal_index].shape)
        return Verdict(None, float("nan"), {"terminal_index": [int(i) for i in bad]},
                       "precondition failed: terminal values are not ordered")
    C = ConvexCone.orthant_product(m, m)
    return check_viability(stack_for_comparison(Y1, Y2), C, tol)


def per_mode_last(Y: np.ndarray) -> np.ndarray:
    """Reorder solver arrays (N+1, m, P) to (N+1, P, m) for the cone checks."""
    return np.moveaxis(np.asarray(Y), 1, -1)


@dataclass
class StructuralCheck:
    holds: bool
    required_c0: float
    witness: dict | None

    def to_dict(self) -> dict:
        return {"holds": self.holds, "required_c0": self.required_c0, "witness": self.witness}


def check_structural_inequality(F1: Callable, F2: Callable, m: int, d: int, n_samples: int = 10_000,
                                seed: int = 0, scale: float = 5.0, c0_limit: float = 1e6) -> StructuralCheck:
    """Sampled check of the drift condition of the multidimensional comparison.

    Tests -4 <y^-, F1(y^+ + y', z) - F2(y', z')> <= 2 sum_i 1{y_i<0}|z_i - z'_i|^2 + 2 C0 |y^-|^2
    and returns the smallest C0 consistent with the samples. Points with
    tiny negative parts are included so that a missing ordering F1 >= F2
    shows up as an unbounded requirement. ``F`` maps (y (S, m), z (S, m, d))
    to (S, m).
    """
    rng = np.random.default_rng(seed)
    S = n_samples
    y = rng.normal(size=(S, m)) * scale
    y *= 10.0 ** rng.uniform(-6, 0, size=(S, 1))
    yp = rng.normal(size=(S, m)) * scale
    z = rng.normal(size=(S, m, d)) * scale
    zp = z + rng.normal(size=(S, m, d)) * scale * (rng.random((S, 1, 1)) < 0.5)
    yneg = np.maximum(-y, 0.0)
    ypos = np.maximum(y, 0.0)
    lhs = -4 * (yneg * (F1(ypos + yp, z) - F2(yp, zp))).sum(axis=1)
    zterm = 2 * ((y < 0) * ((z - zp) ** 2).sum(axis=2)).sum(axis=1)
    n2 = (yneg**2).sum(axis=1)
    excess = lhs - zterm
    with np.errstate(divide="ignore", invalid="ignore"):
        need = np.where(n2 > 0, excess / (2 * n2), np.where(excess > 1e-12, np.inf, 0.0))
    s = int(np.argmax(need))
    c0 = float(max(need[s], 0.0))
    holds = c0 <= c0_limit
    witness = None if holds else {"y": y[s].tolist(), "y_prime": yp[s].tolist(), "required_c0": c0}
    return StructuralCheck(bool(holds), c0, witness)


def oblique_generator(sys, n: float, lam, t: float, x) -> Callable:
    """Driver of the penalized oblique system at fixed (t, x), as F(y, z) -> (S, m)."""
    lam = np.asarray(lam, float)
    C = sys.shifts.at(t)
    x = np.atleast_2d(np.asarray(x, float))
    r = np.array([sys.running.scalar(t, i, x)[0] if sys.running is not None else 0.0 for i in range(sys.m)])

    def F(y, z):
        out = r[None, :] + y @ sys.coupling.T + np.einsum("smd,md->sm", z, sys.z_coef)
        pen = np.maximum(y[:, None, :] - y[:, :, None] + C[None, :, :], 0.0)  # [s, i, j]
        pen = np.where(sys.allowed[None], pen, 0.0)
        return out + n * (pen * lam[None, None, :]).sum(axis=2)

    return F


@dataclass
class BatteryReport:
    increasing: bool
    uniform_bound: float
    bounded: bool
    cauchy: bool
    tail_distances: list
    details: dict

    @property
    def passed(self) -> bool:
        return self.increasing and self.bounded and self.cauchy

    def to_dict(self) -> dict:
        return {"passed": self.passed, "increasing": self.increasing, "uniform_bound": self.uniform_bound,
                "bounded": self.bounded, "cauchy": self.cauchy, "tail_distances": self.tail_distances,
                "details": self.details}


def _level_norms(sol) -> tuple[float, float, float, float]:
    eng = sol._engine
    N = sol.grid.N
    dt = sol.grid.dt
    ny = nz = nu = 0.0
    for k in range(N):
        w = eng.occupation(k)
        ny = max(ny, float(np.max(np.abs(sol.Y[k]) * (w > 0))))
        nz += float((w * (sol.Z[k] ** 2).sum(axis=-1)).sum()) * dt
        U = sol.U(k)
        nu += float((w * (U**2).sum(axis=1)).sum()) * dt
    return ny, float(np.sqrt(nz)), float(np.sqrt(nu)), float(sol.k_norm)


def _level_distance(a, b) -> float:
    eng = a._engine
    dt = a.grid.dt
    dist = 0.0
    for k in range(a.grid.N):
        w = eng.occupation(k)
        dz = np.abs(a.Z[k] - b.Z[k]).sum(axis=-1)
        du = np.abs(a.U(k) - b.U(k)).sum(axis=1)
        dist += float((w * (dz + du)).sum()) * dt
    return dist


def monotone_limit_battery(report, levels=None, tail: int = 4, tol: float = 1e-8,
                           bound: float | None = None) -> BatteryReport:
    """(a) Y^n_0 nondecreasing, (b) sup_n of the level norms finite, (c) (Z^n, U^n) Cauchy in L^1.

    ``report`` is a PenalizationReport or a plain sequence of Y^n_0 values;
    ``levels`` the matching list of solutions, needed for (b) and (c).
    """
    y0 = list(report.y0) if hasattr(report, "y0") else [float(v) for v in report]
    inc = all(a <= b + tol for a, b in zip(y0, y0[1:]))
    if hasattr(report, "monotone_flags"):
        inc = inc and report.monotone
    details: dict = {"y0": y0}
    ub, bounded, cauchy, dists = float("nan"), True, True, []
    if levels:
        norms = [_level_norms(s) for s in levels]
        ub = float(max(sum(nm) for nm in norms))
        details["norms"] = [list(nm) for nm in norms]
        bounded = bool(np.isfinite(ub)) and (bound is None or ub <= bound)
        dists = [_level_distance(a, b) for a, b in zip(levels, levels[1:])]
        tail_d = dists[-tail:]
        if tail_d:
            cauchy = max(tail_d) <= 1e-8 or tail_d[-1] <= 0.75 * tail_d[0]
    elif hasattr(report, "k_norm"):
        ub = float(max(report.k_norm)) if report.k_norm else 0.0
        bounded = bool(np.isfinite(ub))
    return BatteryReport(bool(inc), ub, bool(bounded), bool(cauchy), dists[-tail:], details)
