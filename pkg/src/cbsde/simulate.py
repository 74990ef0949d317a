"""Forward simulation of the regime process, the state diffusion and controlled paths.

Randomness is drawn from a counter-based generator keyed by (seed, path
index, step, slot):

* slot 0: the Poisson mark count of the step,
* slot 1 + n: time and value of the n-th mark in the step,
* slots from ``NORMAL_SLOT``: Gaussian increments of the sub-steps.

Marks are placed at their exact times; the state is advanced by Euler
sub-steps between consecutive event times, so regime changes are never
snapped to the grid.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import InvalidStrategy
from .model import FEATURE_MAPS, SwitchingProblem
from .rng import CounterRNG

NORMAL_SLOT = 1 << 16


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if not self.T > 0 or self.N < 1:
            raise ValueError("grid needs T > 0 and N >= 1")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt

    def t(self, k: int) -> float:
        return k * self.dt

    def index_of(self, t: float) -> int:
        """Grid index k with t in (t_{k-1}, t_k]; 0 for t = 0."""
        k = int(np.searchsorted(self.times, t - 1e-12 * self.T, side="left"))
        return min(max(k, 0), self.N)


@dataclass(frozen=True)
class Switch:
    t: float
    to: int


@dataclass(frozen=True)
class Strategy:
    """Impulse control: initial regime and a finite list of (time, new mode)."""

    i0: int
    switches: tuple[Switch, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "switches", tuple(
            s if isinstance(s, Switch) else Switch(float(s[0]), int(s[1])) for s in self.switches))

    def validate(self, m: int, T: float) -> None:
        if not 0 <= self.i0 < m:
            raise InvalidStrategy(f"initial mode {self.i0 + 1} outside 1..{m}")
        prev_t, prev_mode = -np.inf, self.i0
        for s in self.switches:
            if not 0 <= s.t <= T:
                raise InvalidStrategy(f"switch time {s.t} outside [0, {T}]")
            if not 0 <= s.to < m:
                raise InvalidStrategy(f"switch target {s.to + 1} outside 1..{m}")
            if s.t < prev_t:
                raise InvalidStrategy("switch times must be non-decreasing")
            if s.to == prev_mode:
                raise InvalidStrategy("a switch must change the mode")
            prev_t, prev_mode = s.t, s.to

    def mode_at(self, t: float) -> int:
        mode = self.i0
        for s in self.switches:
            if s.t <= t:
                mode = s.to
        return mode

    def __len__(self) -> int:
        return len(self.switches)

    def to_dict(self) -> dict:
        return {"i0": self.i0 + 1, "switches": [{"t": s.t, "to": s.to + 1} for s in self.switches]}

    @classmethod
    def from_dict(cls, data: dict) -> "Strategy":
        try:
            return cls(int(data["i0"]) - 1,
                       tuple(Switch(float(s["t"]), int(s["to"]) - 1) for s in data.get("switches", [])))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidStrategy(f"malformed strategy: {exc}") from exc

    @classmethod
    def load(cls, path) -> "Strategy":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


@dataclass
class PathBundle:
    """One scenario: increments, marks, regime and state along the grid."""

    grid: TimeGrid
    index: int
    dW: np.ndarray          # (N, d)
    marks: list             # [(tau, mode)] with 0-based modes
    I: np.ndarray           # (N + 1,) regime at t_k (right-continuous)
    X: np.ndarray           # (N + 1, d)


@dataclass
class PathSet:
    """A batch of paths stored column-wise; iterating yields PathBundle views.

    ``I[:, k]`` is the regime at t_k, ``X[:, k]`` the state, ``dW[:, k]`` the
    Brownian increment over (t_k, t_{k+1}]. Marks are flat arrays sorted by
    (path, time).
    """

    grid: TimeGrid
    indices: np.ndarray
    dW: np.ndarray
    I: np.ndarray
    X: np.ndarray
    mark_path: np.ndarray
    mark_time: np.ndarray
    mark_value: np.ndarray
    mark_step: np.ndarray
    counts: np.ndarray
    features: np.ndarray | None = None
    running: np.ndarray | None = None
    switch_cost: np.ndarray | None = None

    def __len__(self) -> int:
        return self.indices.shape[0]

    @property
    def count(self) -> int:
        return len(self)

    def __getitem__(self, s: int) -> PathBundle:
        sel = self.mark_path == s
        marks = list(zip(self.mark_time[sel].tolist(), self.mark_value[sel].tolist()))
        return PathBundle(self.grid, int(self.indices[s]), self.dW[s], marks, self.I[s], self.X[s])

    def __iter__(self) -> Iterator[PathBundle]:
        for s in range(len(self)):
            yield self[s]

    def mark_counts(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def dump(self, directory) -> list[Path]:
        """Write one CSV per path with columns t, I, X_1..X_d (modes 1-based)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        d = self.X.shape[2]
        header = "t,I," + ",".join(f"X_{j + 1}" for j in range(d))
        out = []
        for s in range(len(self)):
            data = np.column_stack([self.grid.times, self.I[s] + 1, self.X[s]])
            f = directory / f"path_{int(self.indices[s])}.csv"
            np.savetxt(f, data, delimiter=",", header=header, comments="", fmt="%.17g")
            out.append(f)
        return out


def _concat(parts: Sequence[PathSet]) -> PathSet:
    if len(parts) == 1:
        return parts[0]
    offs = np.cumsum([0] + [len(p) for p in parts[:-1]])

    def cat(name):
        vals = [getattr(p, name) for p in parts]
        return None if vals[0] is None else np.concatenate(vals)

    return PathSet(
        grid=parts[0].grid,
        indices=cat("indices"), dW=cat("dW"), I=cat("I"), X=cat("X"),
        mark_path=np.concatenate([p.mark_path + o for p, o in zip(parts, offs)]),
        mark_time=cat("mark_time"), mark_value=cat("mark_value"), mark_step=cat("mark_step"),
        counts=cat("counts"), features=cat("features"), running=cat("running"),
        switch_cost=cat("switch_cost"),
    )


def _poisson_counts(u: np.ndarray, mean: float) -> np.ndarray:
    """Inverse-CDF Poisson draws; exact for the small means used per step."""
    counts = np.zeros(u.shape, dtype=np.int64)
    if mean <= 0:
        return counts
    pmf = np.exp(-mean)
    cdf = pmf
    n = 0
    active = u > cdf
    while active.any() and n < 10_000:
        n += 1
        counts[active] = n
        pmf = pmf * mean / n
        cdf = cdf + pmf
        active = u > cdf
    return counts


class _Events:
    """Per-step events: exact times in (t_k, t_{k+1}] and new modes."""

    def __init__(self, p: SwitchingProblem, rng: CounterRNG | None, strategy: Strategy | None):
        self.p, self.rng, self.strategy = p, rng, strategy
        if strategy is not None:
            self.times = np.array([s.t for s in strategy.switches], dtype=float)
            self.modes = np.array([s.to for s in strategy.switches], dtype=np.int64)

    def __call__(self, paths: np.ndarray, k: int, grid: TimeGrid):
        S = paths.shape[0]
        t0, t1 = grid.t(k), grid.t(k + 1)
        if self.strategy is not None:
            if k == grid.N - 1:
                sel = (self.times > t0) & (self.times <= grid.T)
            else:
                sel = (self.times > t0) & (self.times <= t1)
            times = np.broadcast_to(self.times[sel], (S, int(sel.sum())))
            modes = np.broadcast_to(self.modes[sel], (S, int(sel.sum())))
            return times, modes, np.ones(times.shape, dtype=bool)
        lam = self.p.lam
        total = lam.sum()
        counts = _poisson_counts(self.rng.uniforms(paths, k, 0), total * grid.dt)
        cmax = int(counts.max()) if S else 0
        times = np.full((S, cmax), t1)
        modes = np.zeros((S, cmax), dtype=np.int64)
        valid = np.arange(cmax)[None, :] < counts[:, None]
        cum = np.cumsum(lam) / total
        for n in range(cmax):
            ut, um = self.rng.uniforms2(paths, k, 1 + n)
            times[:, n] = np.where(valid[:, n], t0 + ut * grid.dt, t1)
            modes[:, n] = np.minimum(np.searchsorted(cum, um, side="right"), lam.shape[0] - 1)
        if cmax > 1:
            order = np.argsort(np.where(valid, times, np.inf), axis=1, kind="stable")
            times = np.take_along_axis(times, order, 1)
            modes = np.take_along_axis(modes, order, 1)
            valid = np.take_along_axis(valid, order, 1)
        return times, modes, valid


def _simulate_chunk(p: SwitchingProblem, grid: TimeGrid, paths: np.ndarray, seed: int,
                    strategy: Strategy | None, with_payoff: bool) -> PathSet:
    S, N, d = paths.shape[0], grid.N, p.dim
    rng = CounterRNG(seed)
    events = _Events(p, rng, strategy)
    fmap = p.feature_map
    update = FEATURE_MAPS[fmap] if fmap else None

    I = np.empty((S, N + 1), dtype=np.int64)
    X = np.empty((S, N + 1, d))
    dW = np.zeros((S, N, d))
    counts = np.zeros((S, N), dtype=np.int64)
    feats = np.empty((S, N + 1, d)) if fmap else None
    running = np.zeros(S) if with_payoff else None
    cost = np.zeros(S) if with_payoff else None
    mk_path, mk_time, mk_val, mk_step = [], [], [], []

    i0 = p.i0 if strategy is None else strategy.i0
    cur = np.full(S, i0, dtype=np.int64)
    if strategy is not None:
        # switches at time 0 act before the first step
        for s in strategy.switches:
            if s.t <= 0.0:
                if with_payoff:
                    cost += p.cost(0.0)[cur, s.to]
                cur = np.full(S, s.to, dtype=np.int64)
    x = np.broadcast_to(p.x0, (S, d)).copy()
    phi = x.copy() if fmap else None
    I[:, 0], X[:, 0] = cur, x
    if fmap:
        feats[:, 0] = phi
    nslots = (d + 1) // 2

    for k in range(N):
        t0 = grid.t(k)
        times, modes, valid = events(paths, k, grid)
        c = times.shape[1]
        bounds = np.concatenate([np.full((S, 1), t0), times, np.full((S, 1), grid.t(k + 1))], axis=1)
        if strategy is not None and k == N - 1:
            bounds[:, -1] = grid.T
        dw_k = np.zeros((S, d))
        for r in range(c + 1):
            s0 = bounds[:, r]
            h = np.maximum(bounds[:, r + 1] - s0, 0.0)
            if np.any(h > 0):
                xi = rng.normals(paths, k, NORMAL_SLOT + r * nslots, d)
                sq = np.sqrt(h)[:, None]
                # coefficients depend on time only through piecewise pieces; use the sub-step start
                tr = float(s0[0]) if c == 0 else None
                drift, vol, psi = _coefficients(p, s0, tr, cur, x, phi, with_payoff)
                inc = sq * xi
                x = x + drift * h[:, None] + vol * inc
                dw_k = dw_k + inc
                if with_payoff:
                    running = running + psi * h
            if r < c:
                ok = valid[:, r]
                new = np.where(ok, modes[:, r], cur)
                if with_payoff:
                    cc = p.cost(float(times[0, r]))
                    cost = cost + np.where(ok & (new != cur), cc[cur, new], 0.0)
                if strategy is None:
                    sel = np.flatnonzero(ok)
                    mk_path.append(sel)
                    mk_time.append(times[sel, r])
                    mk_val.append(modes[sel, r])
                    mk_step.append(np.full(sel.shape[0], k))
                cur = new
        if strategy is None:
            counts[:, k] = valid.sum(axis=1)
        dW[:, k] = dw_k
        I[:, k + 1] = cur
        X[:, k + 1] = x
        if fmap:
            phi = update(phi, x, t0, grid.t(k + 1))
            feats[:, k + 1] = phi

    if mk_path:
        mp = np.concatenate(mk_path)
        mt = np.concatenate(mk_time)
        mv = np.concatenate(mk_val)
        ms = np.concatenate(mk_step)
        order = np.lexsort((mt, mp))
        mp, mt, mv, ms = mp[order], mt[order], mv[order], ms[order]
    else:
        mp = ms = mv = np.zeros(0, dtype=np.int64)
        mt = np.zeros(0)
    return PathSet(grid, paths.astype(np.int64), dW, I, X, mp, mt, mv, ms, counts, feats,
                   running, cost)


def _coefficients(p: SwitchingProblem, s0, tr, cur, x, phi, with_psi):
    """Drift, diagonal volatility and running profit at sub-step starts ``s0``."""
    if tr is not None or np.all(s0 == s0[0]):
        t = float(s0[0])
        drift = p.b.evaluate(t, cur, x, phi)
        vol = p.sigma.evaluate(t, cur, x, phi)
        psi = p.psi.scalar(t, cur, x, phi) if with_psi else None
        return drift, vol, psi
    # sub-step starts differ across paths; group by coefficient time piece
    drift = np.empty_like(x)
    vol = np.empty_like(x)
    psi = np.empty(x.shape[0]) if with_psi else None
    pieces = {}
    for coef in (p.b, p.sigma, p.psi):
        if coef.breaks.size:
            pieces[id(coef)] = np.searchsorted(coef.breaks, s0, side="right")
    key = np.zeros(x.shape[0], dtype=np.int64)
    for arr in pieces.values():
        key = key * 1000 + arr
    for val in np.unique(key):
        sel = key == val
        t = float(s0[sel][0])
        f = None if phi is None else phi[sel]
        drift[sel] = p.b.evaluate(t, cur[sel], x[sel], f)
        vol[sel] = p.sigma.evaluate(t, cur[sel], x[sel], f)
        if with_psi:
            psi[sel] = p.psi.scalar(t, cur[sel], x[sel], f)
    return drift, vol, psi


def _run(p, grid, count, seed, strategy, with_payoff, threads, first_index):
    if count < 1:
        raise ValueError("count must be at least 1")
    paths = np.arange(first_index, first_index + count, dtype=np.uint64)
    threads = max(1, int(threads))
    if threads == 1 or count < 2 * threads:
        return _simulate_chunk(p, grid, paths, seed, strategy, with_payoff)
    chunks = np.array_split(paths, threads)
    with ThreadPoolExecutor(threads) as pool:
        parts = list(pool.map(lambda c: _simulate_chunk(p, grid, c, seed, strategy, with_payoff), chunks))
    return _concat(parts)


def sample_paths(p: SwitchingProblem, grid: TimeGrid, count: int, seed: int,
                 threads: int = 1, first_index: int = 0) -> PathSet:
    """Simulate ``count`` paths of the marked regime process and the state X^I.

    Path ``first_index + s`` depends only on ``(seed, first_index + s)``.
    """
    return _run(p, grid, count, seed, None, False, threads, first_index)


def simulate_controlled(p: SwitchingProblem, s: Strategy, grid: TimeGrid, count: int, seed: int,
                        threads: int = 1, with_payoff: bool = True) -> PathSet:
    """Simulate the state under a deterministic switching strategy.

    With ``with_payoff`` the returned set carries the running-profit integral
    and the accumulated switching costs per path.
    """
    s.validate(p.m, p.T)
    if abs(grid.T - p.T) > 1e-12:
        raise InvalidStrategy("grid horizon differs from the problem horizon")
    return _run(p, grid, count, seed, s, with_payoff, threads, 0)


def subset(ps: PathSet, sel) -> PathSet:
    """Paths ``sel`` (boolean mask or index array) of a PathSet, marks re-indexed."""
    idx = np.flatnonzero(sel) if np.asarray(sel).dtype == bool else np.asarray(sel, dtype=np.int64)
    remap = np.full(len(ps), -1, dtype=np.int64)
    remap[idx] = np.arange(idx.shape[0])
    keep = remap[ps.mark_path] >= 0
    pick = lambda a: None if a is None else a[idx]
    return PathSet(ps.grid, ps.indices[idx], ps.dW[idx], ps.I[idx], ps.X[idx],
                   remap[ps.mark_path[keep]], ps.mark_time[keep], ps.mark_value[keep],
                   ps.mark_step[keep], ps.counts[idx], pick(ps.features), pick(ps.running),
                   pick(ps.switch_cost))
