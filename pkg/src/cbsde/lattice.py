"""Recombining mode-augmented lattice: exact conditional expectations and DP oracles.

The state grid is fixed over time (nodes ``x0 + j * dx`` per dimension,
covering the state box). Under mode ``i`` each dimension moves by
``-dx, 0, +dx`` with trinomial probabilities matching the first two
moments of the Euler step; moves leaving the grid are clamped to the edge.
Regime jumps to ``j != i`` happen with probability ``lambda(j) * dt`` and
leave the state unchanged.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MalformedSpec, NonMarkovian
from .model import SwitchingProblem
from .simulate import TimeGrid

MAX_NODES_PER_DIM = 4001


@dataclass
class Kernel:
    """Frozen-mode diffusion moves: target node indices, probabilities and dW per move."""

    targets: np.ndarray  # (M, B)
    probs: np.ndarray    # (M, B)
    dw: np.ndarray       # (M, B, d)
    trimmed: int


def _sup_on_box(coef, box, m, n_per_dim):
    axes = [np.linspace(lo, hi, n_per_dim) for lo, hi in box]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, box.shape[0])
    sup = np.zeros(coef.out)
    times = list(coef.breaks) + [0.0]
    for t in times:
        for i in range(m):
            sup = np.maximum(sup, np.abs(coef.evaluate(float(t), i, pts)).max(axis=0))
    return sup


class Lattice:
    """Trinomial (d = 1) or product-trinomial (d = 2) lattice for a Markovian problem."""

    def __init__(self, p: SwitchingProblem, grid: TimeGrid, dx=None, default_halfwidth: float = 5.0):
        if not p.markovian:
            raise NonMarkovian("the lattice engine needs Affine or PiecewiseConstantInTime coefficients")
        if p.dim > 2:
            raise MalformedSpec("the lattice engine supports d <= 2")
        if abs(grid.T - p.T) > 1e-12:
            raise MalformedSpec("grid horizon differs from the problem horizon")
        dt = grid.dt
        if dt * p.modes.total_rate >= 1:
            raise MalformedSpec("lattice needs dt * sum(lambda) < 1; refine the grid")
        self.p, self.grid, self.m, self.d = p, grid, p.m, p.dim
        box = p.state_box
        if box is None:
            box = np.column_stack([p.x0 - default_halfwidth, p.x0 + default_halfwidth])
        self.box = np.asarray(box, float)
        npd = 2001 if self.d == 1 else 201
        sig_bar = _sup_on_box(p.sigma, self.box, p.m, npd)
        b_bar = _sup_on_box(p.b, self.box, p.m, npd)
        self.sigma_bar, self.b_bar = sig_bar, b_bar

        dxs = np.zeros(self.d)
        axes = []
        for a in range(self.d):
            if dx is not None:
                h = float(np.broadcast_to(np.asarray(dx, float), (self.d,))[a])
            elif sig_bar[a] > 0:
                h = sig_bar[a] * np.sqrt(3 * dt)
            elif b_bar[a] > 0:
                h = b_bar[a] * dt
            else:
                h = 0.0
            x0 = p.x0[a]
            if h > 0:
                lo = int(np.ceil(max(x0 - self.box[a, 0], 0.0) / h - 1e-9))
                hi = int(np.ceil(max(self.box[a, 1] - x0, 0.0) / h - 1e-9))
                if lo + hi + 1 > MAX_NODES_PER_DIM:
                    raise MalformedSpec("lattice too fine for the state box; pass a larger dx")
                axes.append(x0 + h * np.arange(-lo, hi + 1))
            else:
                axes.append(np.array([x0]))
            dxs[a] = h
        self.dx = dxs
        self.axes = axes
        self.shape = tuple(len(ax) for ax in axes)
        self.M = int(np.prod(self.shape))
        self.nodes = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(self.M, self.d)
        self.origin = int(np.ravel_multi_index(
            tuple(int(np.argmin(np.abs(ax - x))) for ax, x in zip(axes, p.x0)), self.shape))
        self._cache: dict = {}
        self.trimmed = 0

    # -- kernels ---------------------------------------------------------------
    def _piece_key(self, k: int):
        t = self.grid.t(k)
        return tuple(int(np.searchsorted(c.breaks, t, side="right")) for c in (self.p.b, self.p.sigma))

    def kernel(self, k: int, i: int) -> Kernel:
        key = (self._piece_key(k), i)
        if key not in self._cache:
            self._cache[key] = self._build_kernel(self.grid.t(k), i)
            self.trimmed += self._cache[key].trimmed
        return self._cache[key]

    def _build_kernel(self, t: float, i: int) -> Kernel:
        dt = self.grid.dt
        mu = self.p.b.evaluate(t, i, self.nodes)
        sig = self.p.sigma.evaluate(t, i, self.nodes)
        per_dim_p, per_dim_w, trimmed = [], [], 0
        moves = np.array([-1, 0, 1])
        for a in range(self.d):
            h = self.dx[a]
            if h == 0:
                pr = np.tile([0.0, 1.0, 0.0], (self.M, 1))
                per_dim_p.append(pr)
                per_dim_w.append(np.zeros((self.M, 3)))
                continue
            m1, s2 = mu[:, a] * dt, sig[:, a] ** 2 * dt
            second = (s2 + m1**2) / (2 * h * h)
            first = m1 / (2 * h)
            pu, pd = second + first, second - first
            bad = (pu < 0) | (pd < 0)
            if bad.any():
                trimmed += int(bad.sum())
                two = np.minimum(np.abs(m1) / h, 1.0)
                pu = np.where(bad, np.where(m1 > 0, two, 0.0), pu)
                pd = np.where(bad, np.where(m1 < 0, two, 0.0), pd)
            over = pu + pd > 1
            if over.any():
                trimmed += int(over.sum())
                tot = pu + pd
                pu = np.where(over, pu / tot, pu)
                pd = np.where(over, pd / tot, pd)
            pm = 1.0 - pu - pd
            pr = np.column_stack([pd, pm, pu])
            sg = sig[:, a][:, None]
            with np.errstate(divide="ignore", invalid="ignore"):
                w = np.where(sg > 0, (moves[None, :] * h - m1[:, None]) / sg, 0.0)
            per_dim_p.append(pr)
            per_dim_w.append(w)
        idx = np.array(np.unravel_index(np.arange(self.M), self.shape)).T  # (M, d)
        if self.d == 1:
            probs = per_dim_p[0]
            tgt = np.clip(idx[:, :1] + moves[None, :], 0, self.shape[0] - 1)
            targets = tgt
            dw = per_dim_w[0][:, :, None]
        else:
            probs = (per_dim_p[0][:, :, None] * per_dim_p[1][:, None, :]).reshape(self.M, 9)
            t0 = np.clip(idx[:, 0:1] + moves[None, :], 0, self.shape[0] - 1)
            t1 = np.clip(idx[:, 1:2] + moves[None, :], 0, self.shape[1] - 1)
            targets = (t0[:, :, None] * self.shape[1] + t1[:, None, :]).reshape(self.M, 9)
            w0 = np.broadcast_to(per_dim_w[0][:, :, None], (self.M, 3, 3)).reshape(self.M, 9)
            w1 = np.broadcast_to(per_dim_w[1][:, None, :], (self.M, 3, 3)).reshape(self.M, 9)
            dw = np.stack([w0, w1], -1)
        return Kernel(targets, probs, dw, trimmed)

    # -- expectations ------------------------------------------------------------
    def expect_frozen(self, v_next: np.ndarray, k: int, i: int) -> np.ndarray:
        """E[v(X_{k+1}) | X_k = node] with the mode frozen at ``i``."""
        K = self.kernel(k, i)
        return (K.probs * v_next[K.targets]).sum(axis=1)

    def expect_frozen_dw(self, v_next: np.ndarray, k: int, i: int) -> np.ndarray:
        """E[v(X_{k+1}) dW | X_k = node] / dt, shape (M, d)."""
        K = self.kernel(k, i)
        return np.einsum("mb,mbd->md", K.probs * v_next[K.targets], K.dw) / self.grid.dt

    def jump_probs(self) -> np.ndarray:
        """(m, m) matrix of one-step regime-jump probabilities; diagonal is zero."""
        P = np.tile(self.p.lam * self.grid.dt, (self.m, 1))
        np.fill_diagonal(P, 0.0)
        return P

    def forward_distribution(self) -> np.ndarray:
        """Law of (I_k, X_k) on the lattice started at (i0, x0), shape (N+1, m, M)."""
        N, m, M = self.grid.N, self.m, self.M
        pi = np.zeros((N + 1, m, M))
        pi[0, self.p.i0, self.origin] = 1.0
        J = self.jump_probs()
        stay = 1.0 - J.sum(axis=1)
        for k in range(N):
            nxt = np.zeros((m, M))
            for i in range(m):
                K = self.kernel(k, i)
                w = (pi[k, i] * stay[i])[:, None] * K.probs
                nxt[i] += np.bincount(K.targets.ravel(), weights=w.ravel(), minlength=M)
                for j in range(m):
                    if J[i, j] > 0:
                        nxt[j] += pi[k, i] * J[i, j]
            pi[k + 1] = nxt
        return pi

    # -- interpolation -------------------------------------------------------------
    def interpolate(self, values: np.ndarray, x) -> np.ndarray:
        """Piecewise-linear interpolation of node values at states ``x`` (S, d)."""
        x = np.atleast_2d(np.asarray(x, float))
        v = values.reshape(self.shape)
        if self.d == 1:
            if self.M == 1:
                return np.full(x.shape[0], float(v[0]))
            return np.interp(x[:, 0], self.axes[0], v)
        pos, wts = [], []
        for a in range(2):
            ax = self.axes[a]
            if len(ax) == 1:
                pos.append(np.zeros((x.shape[0], 2), dtype=int))
                wts.append(np.column_stack([np.ones(x.shape[0]), np.zeros(x.shape[0])]))
                continue
            xa = np.clip(x[:, a], ax[0], ax[-1])
            j = np.clip(np.searchsorted(ax, xa, side="right") - 1, 0, len(ax) - 2)
            f = (xa - ax[j]) / (ax[j + 1] - ax[j])
            pos.append(np.column_stack([j, j + 1]))
            wts.append(np.column_stack([1 - f, f]))
        out = np.zeros(x.shape[0])
        for u in range(2):
            for w in range(2):
                out += wts[0][:, u] * wts[1][:, w] * v[pos[0][:, u], pos[1][:, w]]
        return out


@dataclass
class LatticeFunction:
    """Values per (time index, mode, node)."""

    lattice: Lattice
    values: np.ndarray  # (N + 1, m, M)
    stop: np.ndarray | None = field(default=None, repr=False)

    def at(self, k: int, i: int | None = None) -> np.ndarray:
        return self.values[k] if i is None else self.values[k, i]

    def value0(self, i: int | None = None) -> float:
        i = self.lattice.p.i0 if i is None else i
        return float(self.values[0, i, self.lattice.origin])

    def interpolate(self, k: int, i: int, x) -> np.ndarray:
        return self.lattice.interpolate(self.values[k, i], x)

    def values_at(self, k: int, x) -> np.ndarray:
        """Per-mode values at states ``x``; shape (S, m)."""
        return np.column_stack([self.interpolate(k, i, x) for i in range(self.values.shape[1])])

    def to_csv(self, path) -> None:
        write_lattice_csv(path, self.lattice, {"V": self.values})


def write_lattice_csv(path, L: Lattice, columns: dict) -> None:
    """Tidy CSV with columns t, mode, x_1..x_d followed by ``columns`` (arrays (N+1, m, M))."""
    names = list(columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "mode"] + [f"x_{a + 1}" for a in range(L.d)] + names)
        times = L.grid.times
        for k in range(L.grid.N + 1):
            for i in range(L.m):
                for n in range(L.M):
                    row = [repr(float(times[k])), i + 1] + [repr(float(v)) for v in L.nodes[n]]
                    for name in names:
                        arr = columns[name]
                        row.append(repr(float(arr[k, i, n])) if k < arr.shape[0] else "")
                    w.writerow(row)


def _as_values(L: Lattice, V) -> np.ndarray:
    return V.values if isinstance(V, LatticeFunction) else np.asarray(V, float)


def conditional_expectation(L: Lattice, V, k: int) -> np.ndarray:
    """E[V_{k+1}(I_{k+1}, X_{k+1}) | I_k = i, X_k = node] under the full kernel; shape (m, M).

    ``V`` is a LatticeFunction (its slice k+1 is used) or an (m, M) array of
    values at time k+1.
    """
    vals = _as_values(L, V)
    nxt = vals[k + 1] if vals.ndim == 3 else vals
    J = L.jump_probs()
    stay = 1.0 - J.sum(axis=1)
    out = np.empty((L.m, L.M))
    for i in range(L.m):
        out[i] = stay[i] * L.expect_frozen(nxt[i], k, i)
        for j in range(L.m):
            if J[i, j] > 0:
                out[i] += J[i, j] * nxt[j]
    return out


def _profit_arrays(L: Lattice, p: SwitchingProblem):
    N, m = L.grid.N, L.m
    psi = np.empty((N, m, L.M))
    for k in range(N):
        for i in range(m):
            psi[k, i] = p.psi.scalar(L.grid.t(k), i, L.nodes)
    g = np.stack([p.g.scalar(p.T, i, L.nodes) for i in range(m)])
    return psi, g


def snell_envelope(L: Lattice, barrier, terminal, running=None, modes=None) -> LatticeFunction:
    """V_k = max(O_k, E^i[V_{k+1}] + psi_k dt) for k < N and V_N = g, per frozen mode.

    ``barrier``: array (N+1, m, M) (slice N unused; -inf means no stopping),
    ``terminal``: (m, M), ``running``: (N, m, M) or None.
    """
    N, dt = L.grid.N, L.grid.dt
    O = _as_values(L, barrier)
    m = O.shape[1]
    modes = range(m) if modes is None else modes
    V = np.empty((N + 1, m, L.M))
    stop = np.zeros((N + 1, m, L.M), dtype=bool)
    V[N] = np.asarray(terminal, float)
    for k in range(N - 1, -1, -1):
        for i in modes:
            cont = L.expect_frozen(V[k + 1, i], k, i)
            if running is not None:
                cont = cont + running[k, i] * dt
            stop[k, i] = O[k, i] >= cont
            V[k, i] = np.where(stop[k, i], O[k, i], cont)
    return LatticeFunction(L, V, stop)


def switching_value_dp(L: Lattice, p: SwitchingProblem, max_sweeps: int | None = None) -> LatticeFunction:
    """Coupled backward recursion for the switching value on the lattice.

    V_k(i) = max(E^i[V_{k+1}(i)] + psi_i dt, max_{j != i} V_k(j) + c(t_k, i, j)),
    with the inner max iterated (Jacobi) to its fixed point.
    """
    if not p.markovian:
        raise NonMarkovian("switching_value_dp needs Markovian coefficients")
    N, m, dt = L.grid.N, L.m, L.grid.dt
    psi, g = _profit_arrays(L, p)
    V = np.empty((N + 1, m, L.M))
    V[N] = g
    max_sweeps = m + 1 if max_sweeps is None else max_sweeps
    for k in range(N - 1, -1, -1):
        C = p.cost(L.grid.t(k))
        cont = np.stack([L.expect_frozen(V[k + 1, i], k, i) + psi[k, i] * dt for i in range(m)])
        cur = cont
        for _ in range(max_sweeps):
            switched = np.max(cur[None, :, :] + np.where(np.eye(m, dtype=bool), -np.inf, C)[:, :, None], axis=1)
            new = np.maximum(cont, switched)
            if np.array_equal(new, cur):
                break
            cur = new
        V[k] = cur
    return LatticeFunction(L, V)


def value_bound(p: SwitchingProblem, t) -> np.ndarray:
    return (p.T - np.asarray(t, float) + 1.0) * max(p.bounds.psi_bar, p.bounds.g_bar)


def bound_check(V, p: SwitchingProblem, grid: TimeGrid | None = None, tol: float = 1e-12) -> bool:
    """True iff |V_k| <= (T - t_k + 1) max(psi_bar, g_bar) everywhere.

    ``V`` is a LatticeFunction or an array whose first axis is time.
    """
    vals = _as_values(None, V) if not isinstance(V, LatticeFunction) else V.values
    if grid is None:
        grid = V.lattice.grid if isinstance(V, LatticeFunction) else TimeGrid(p.T, vals.shape[0] - 1)
    bound = value_bound(p, grid.times)
    amax = np.abs(vals).reshape(vals.shape[0], -1).max(axis=1)
    return bool(np.all(amax <= bound + tol))
