"""Mode-stratified least-squares regression for conditional expectations on paths."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np

from .errors import DegenerateStratum, MalformedSpec

RIDGE = 1e-8
BASIS_KINDS = ("PolynomialPerMode", "LocalPartitionPerMode", "PathFeature")


@dataclass(frozen=True)
class BasisSpec:
    """Regression basis; always fitted separately for each current mode."""

    kind: str = "PolynomialPerMode"
    degree: int = 3
    cells: int = 8
    stratified: bool = True

    def __post_init__(self):
        if self.kind not in BASIS_KINDS:
            raise MalformedSpec(f"unknown basis kind {self.kind!r}")
        if not self.stratified:
            raise MalformedSpec("only mode-stratified regression is supported")

    def size(self, d: int) -> int:
        if self.kind == "LocalPartitionPerMode":
            return self.cells**d
        dim = 2 * d if self.kind == "PathFeature" else d
        return len(_exponents(dim, self.degree)) + 1


def _exponents(dim: int, degree: int) -> list[tuple[int, ...]]:
    out = []
    for deg in range(1, degree + 1):
        out.extend(combinations_with_replacement(range(dim), deg))
    return out


@dataclass
class _Stratum:
    kind: str                       # "ridge", "mean" or "cells"
    center: np.ndarray | None = None
    scale: np.ndarray | None = None
    fcenter: np.ndarray | None = None
    keep: np.ndarray | None = None
    coef: np.ndarray | None = None  # (q, r) for r responses
    intercept: np.ndarray | None = None
    edges: list | None = None
    cell_mean: np.ndarray | None = None


def _raw_inputs(basis: BasisSpec, x, features):
    if basis.kind == "PathFeature":
        if features is None:
            raise MalformedSpec("PathFeature basis needs path features")
        return np.concatenate([x, features], axis=1)
    return x


def _poly(z: np.ndarray, degree: int) -> np.ndarray:
    cols = [np.prod(z[:, list(e)], axis=1) for e in _exponents(z.shape[1], degree)]
    return np.column_stack(cols) if cols else np.zeros((z.shape[0], 0))


def _fit_stratum(basis: BasisSpec, z: np.ndarray, y: np.ndarray) -> _Stratum:
    """Ridge fit with standardised features and an unpenalised intercept.

    ``y`` has shape (n, r): several responses share one design matrix.
    """
    if basis.kind == "LocalPartitionPerMode":
        edges = [np.quantile(z[:, a], np.linspace(0, 1, basis.cells + 1)[1:-1]) for a in range(z.shape[1])]
        cell = _cells(z, edges, basis.cells)
        total = basis.cells ** z.shape[1]
        cnt = np.bincount(cell, minlength=total)
        means = np.empty((total, y.shape[1]))
        overall = y.mean(axis=0)
        for c in range(y.shape[1]):
            s = np.bincount(cell, weights=y[:, c], minlength=total)
            means[:, c] = np.where(cnt > 0, s / np.maximum(cnt, 1), overall[c])
        return _Stratum("cells", edges=edges, cell_mean=means)
    center = z.mean(axis=0)
    scale = z.std(axis=0)
    keep_in = scale > 1e-12 * (1.0 + np.abs(center))
    zs = (z[:, keep_in] - center[keep_in]) / scale[keep_in]
    F = _poly(zs, basis.degree)
    fcenter = F.mean(axis=0)
    Fc = F - fcenter
    ymean = y.mean(axis=0)
    if F.shape[1] == 0:
        return _Stratum("ridge", center, scale, fcenter, keep_in, np.zeros((0, y.shape[1])), ymean)
    G = Fc.T @ Fc
    ridge = RIDGE * np.trace(G) / G.shape[0]
    coef = np.linalg.solve(G + ridge * np.eye(G.shape[0]), Fc.T @ (y - ymean))
    return _Stratum("ridge", center, scale, fcenter, keep_in, coef, ymean)


def _cells(z, edges, cells):
    idx = np.zeros(z.shape[0], dtype=np.int64)
    for a, e in enumerate(edges):
        idx = idx * cells + np.searchsorted(e, z[:, a], side="right")
    return idx


def _predict_stratum(st: _Stratum, basis: BasisSpec, z: np.ndarray) -> np.ndarray:
    if st.kind == "mean":
        return np.broadcast_to(st.intercept, (z.shape[0], st.intercept.shape[0])).copy()
    if st.kind == "cells":
        return st.cell_mean[_cells(z, st.edges, basis.cells)]
    zs = (z[:, st.keep] - st.center[st.keep]) / st.scale[st.keep]
    F = _poly(zs, basis.degree) - st.fcenter
    return st.intercept + F @ st.coef


@dataclass
class RegressionOperator:
    """Fitted per-mode predictors at one time index.

    ``predict(i, x)`` evaluates the mode-``i`` regression at arbitrary states.
    """

    basis: BasisSpec
    strata: list
    degenerate: list

    def predict(self, i: int, x, features=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        z = _raw_inputs(self.basis, x, features)
        out = _predict_stratum(self.strata[i], self.basis, z)
        return out[:, 0] if out.shape[1] == 1 else out

    def predict_all(self, x, features=None) -> np.ndarray:
        """Predictions of every mode's regression at ``x``; shape (m, S[, r])."""
        return np.stack([self.predict(i, x, features) for i in range(len(self.strata))])


def fit_conditional(x: np.ndarray, modes: np.ndarray, responses, basis: BasisSpec, m: int,
                    features=None, per_mode: bool = False) -> RegressionOperator:
    """Least-squares projection of ``responses`` on functions of ``x`` per current mode.

    ``x``: states at t_k, shape (S, d); ``modes``: regime at t_k per path;
    ``responses``: shape (S,) or (S, r); with ``per_mode`` an array
    (m, S[, r]) giving each mode stratum its own response. Strata with
    fewer paths than basis functions fall back to the stratum mean and emit
    a DegenerateStratum warning; empty strata use a pooled fit over all paths.
    """
    x = np.atleast_2d(np.asarray(x, float))
    resp = np.asarray(responses, float)
    z = _raw_inputs(basis, x, features)
    p = basis.size(x.shape[1])
    strata, degenerate = [], []
    pooled = None
    for i in range(m):
        y = resp[i] if per_mode else resp
        y = y[:, None] if y.ndim == 1 else y
        sel = modes == i
        n = int(sel.sum())
        if n == 0:
            if pooled is None or per_mode:
                pooled = _fit_stratum(basis, z, y)
            strata.append(pooled)
            degenerate.append(i)
            continue
        if n < p:
            warnings.warn(f"mode {i + 1} has {n} paths for {p} basis functions; using the mean",
                          DegenerateStratum, stacklevel=2)
            strata.append(_Stratum("mean", intercept=y[sel].mean(axis=0)))
            degenerate.append(i)
            continue
        strata.append(_fit_stratum(basis, z[sel], y[sel]))
    return RegressionOperator(basis, strata, degenerate)


def jump_component(I_left: np.ndarray, value_by_mode: np.ndarray) -> np.ndarray:
    """U(i) = v(i, X) - v(I_{t-}, X) per path from per-mode values of shape (m, S).

    Returns an array (S, m).
    """
    v = np.asarray(value_by_mode, float)
    cur = v[np.asarray(I_left), np.arange(v.shape[1])]
    return (v - cur[None, :]).T
