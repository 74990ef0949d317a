"""Switching problems: payoff evaluation, optimal strategy extraction, certification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidStrategy, NonTerminating
from .model import FEATURE_MAPS, SwitchingProblem
from .simulate import PathBundle, Strategy, Switch, TimeGrid, simulate_controlled

TOL_HIT = 1e-6


@dataclass(frozen=True)
class PayoffEstimate:
    mean: float
    std_error: float
    count: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.std_error, "n": self.count}


def evaluate_strategy(p: SwitchingProblem, s: Strategy, count: int = 1000, seed: int = 0,
                      grid: TimeGrid | None = None, threads: int = 1) -> PayoffEstimate:
    """Monte Carlo estimate of g(alpha_T, X_T) + int psi dt + sum of switching costs."""
    grid = grid or TimeGrid(p.T, 200)
    s.validate(p.m, p.T)
    ps = simulate_controlled(p, s, grid, count, seed, threads=threads)
    final = ps.I[:, -1]
    term = p.g.scalar(p.T, final, ps.X[:, -1])
    pay = term + ps.running + ps.switch_cost
    se = float(pay.std(ddof=1) / np.sqrt(count)) if count > 1 else 0.0
    if np.ptp(pay) == 0:
        se = 0.0
    return PayoffEstimate(float(pay.mean()), se, int(count))


def switch_bound(p: SwitchingProblem) -> int:
    """Upper bound (psi_bar T + g_bar + Y_bar) / c_bar + 1 on the number of switches."""
    b = p.bounds
    y_bar = (p.T + 1.0) * max(b.psi_bar, b.g_bar)
    return int(np.floor((b.psi_bar * p.T + b.g_bar + y_bar) / b.c_bar)) + 1


def _values_fn(sol):
    if hasattr(sol, "values_at"):
        return sol.values_at
    raise TypeError("solution must provide values_at(k, x)")


def _walk(p: SwitchingProblem, values_at, grid: TimeGrid, path: PathBundle | None, rule, tol: float,
          max_switches: int | None = None, cost=None) -> Strategy:
    """Follow one path, switching at grid times whenever ``rule`` fires."""
    cost = p.cost if cost is None else cost
    max_switches = switch_bound(p) if max_switches is None else max_switches
    x = p.x0.copy()
    mode = p.i0
    switches = []
    dt = grid.dt
    for k in range(grid.N + 1):
        t = grid.t(k)
        if k < grid.N:
            while True:
                vals = values_at(k, x[None])[0]
                target = rule(vals, mode, cost(t), tol)
                if target is None:
                    break
                switches.append(Switch(t, int(target)))
                mode = int(target)
                if len(switches) > max_switches:
                    raise NonTerminating(f"more than {max_switches} switches; scheme defect")
            dw = np.zeros(p.dim) if path is None else path.dW[k]
            drift = p.b.evaluate(t, mode, x[None])[0]
            vol = p.sigma.evaluate(t, mode, x[None])[0]
            x = x + drift * dt + vol * dw
    return Strategy(p.i0, tuple(switches))


def _hitting_rule(vals, mode, C, tol):
    others = [j for j in range(len(vals)) if j != mode]
    if not others:
        return None
    cand = np.array([vals[j] + C[mode, j] for j in others])
    if vals[mode] <= cand.max() + tol:
        return others[int(np.argmax(cand))]
    return None


def _u_rule(vals, mode, C, tol):
    # U(j) = Y^j - Y^mode; the constraint -U(j) - c(mode, j) >= 0 binds when
    # max_j U(j) + c(mode, j) reaches 0
    others = [j for j in range(len(vals)) if j != mode]
    if not others:
        return None
    u = np.array([vals[j] - vals[mode] + C[mode, j] for j in others])
    if u.max() >= -tol:
        return others[int(np.argmax(u))]
    return None


def extract_optimal_strategy(sol, p: SwitchingProblem, path: PathBundle | None = None,
                             tol: float = TOL_HIT, grid: TimeGrid | None = None) -> Strategy:
    """Switch at the first grid time the current value hits its barrier.

    ``sol`` is anything with ``values_at(k, x)`` returning per-mode values
    (lattice DP output, reflected or constrained solutions). ``path``
    supplies Brownian increments; without it the state moves by its drift
    only. The new mode is the smallest maximiser of Y^j + c(t, mode, j).
    No switch is emitted at the horizon.
    """
    grid = grid or getattr(sol, "grid", None) or sol.lattice.grid
    return _walk(p, _values_fn(sol), grid, path, _hitting_rule, tol)


def strategy_from_U(sol, p: SwitchingProblem, path: PathBundle | None = None,
                    tol: float = TOL_HIT, grid: TimeGrid | None = None) -> Strategy:
    """Switch when max_j U(j) + c(t, mode, j) reaches zero, U read from the constrained solution.

    ``c`` is taken from the constraint the solution was computed with, so an
    always-slack constraint never triggers a switch.
    """
    grid = grid or sol.grid
    model = getattr(sol, "_model", None)
    cost = model.cost if model is not None and model.costs is not None else None
    return _walk(p, _values_fn(sol), grid, path, _u_rule, tol, cost=cost)


def evaluate_feedback(sol, p: SwitchingProblem, count: int = 1000, seed: int = 0,
                      grid: TimeGrid | None = None, threads: int = 1, tol: float = TOL_HIT) -> PayoffEstimate:
    """Payoff of the feedback strategy that applies the hitting rule on every path.

    Each path uses the Brownian increments of ``simulate_controlled`` for
    the same ``(seed, path)``, so on a deterministic problem this equals
    ``evaluate_strategy`` of the extracted strategy.
    """
    grid = grid or getattr(sol, "grid", None) or sol.lattice.grid
    values_at = _values_fn(sol)
    ps = simulate_controlled(p, Strategy(p.i0, ()), grid, count, seed, threads=threads, with_payoff=False)
    fmap = p.feature_map
    update = FEATURE_MAPS[fmap] if fmap else None
    S, dt = count, grid.dt
    rows = np.arange(S)
    x = np.broadcast_to(p.x0, (S, p.dim)).copy()
    phi = x.copy() if fmap else None
    mode = np.full(S, p.i0, dtype=np.int64)
    pay = np.zeros(S)
    nsw = np.zeros(S, dtype=np.int64)
    limit = switch_bound(p)
    for k in range(grid.N):
        t = grid.t(k)
        C = p.cost(t)
        vals = values_at(k, x) if phi is None else values_at(k, x, phi)
        while True:
            cand = vals + C[mode]
            cand[rows, mode] = -np.inf
            target = np.argmax(cand, axis=1)
            best = cand[rows, target]
            hit = (vals[rows, mode] <= best + tol) & np.isfinite(best)
            if not np.any(hit):
                break
            pay[hit] += C[mode[hit], target[hit]]
            mode = np.where(hit, target, mode)
            nsw += hit
            if np.any(nsw > limit):
                raise NonTerminating(f"more than {limit} switches; scheme defect")
        pay += p.psi.scalar(t, mode, x, phi) * dt
        x = x + p.b.evaluate(t, mode, x, phi) * dt + p.sigma.evaluate(t, mode, x, phi) * ps.dW[:, k]
        if fmap:
            phi = update(phi, x, t, grid.t(k + 1))
    pay += p.g.scalar(p.T, mode, x, phi)
    se = float(pay.std(ddof=1) / np.sqrt(S)) if S > 1 and np.ptp(pay) > 0 else 0.0
    return PayoffEstimate(float(pay.mean()), se, int(S))


def random_strategies(p: SwitchingProblem, count: int, seed: int = 0, max_switches: int = 3) -> list[Strategy]:
    """Random finite strategies for certification tests."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        k = int(rng.integers(0, max_switches + 1))
        times = np.sort(rng.uniform(0, p.T, k))
        if k and rng.random() < 0.3:
            times[0] = 0.0
        mode, sw = p.i0, []
        for t in times:
            choices = [j for j in range(p.m) if j != mode]
            if not choices:
                break
            mode = int(rng.choice(choices))
            sw.append(Switch(float(t), mode))
        out.append(Strategy(p.i0, tuple(sw)))
    return out


@dataclass
class Certificate:
    optimal: bool
    value: PayoffEstimate
    y0: float | None
    worst_candidate: dict | None
    tolerance_floor: float

    def __bool__(self) -> bool:
        return self.optimal

    def to_dict(self) -> dict:
        return {"optimal": self.optimal, "value": self.value.to_dict(), "y0": self.y0,
                "worst_candidate": self.worst_candidate, "tolerance_floor": self.tolerance_floor}


def certify_optimality(p: SwitchingProblem, s_star: Strategy, candidates, count: int = 1000, seed: int = 0,
                       y0: float | None = None, grid: TimeGrid | None = None, atol: float = 1e-3) -> Certificate:
    """J(s*) >= J(s) - 3 pooled stderr for all candidates, and J(s*) close to Y_0 if given.

    ``atol`` is added to the comparison with Y_0, which carries the
    discretisation error of the solver (zero-variance problems would
    otherwise demand exact equality).
    """
    js = evaluate_strategy(p, s_star, count, seed, grid)
    ok = True
    worst = None
    for idx, s in enumerate(candidates):
        try:
            jc = evaluate_strategy(p, s, count, seed, grid)
        except InvalidStrategy:
            continue
        pooled = float(np.hypot(js.std_error, jc.std_error))
        margin = js.mean - (jc.mean - 3 * pooled - 1e-12)
        if worst is None or margin < worst["margin"]:
            worst = {"index": idx, "strategy": s.to_dict(), "J": jc.mean, "margin": margin}
        if margin < 0:
            ok = False
    if y0 is not None and abs(js.mean - y0) > 3 * js.std_error + atol:
        ok = False
    return Certificate(ok, js, y0, worst, atol)
