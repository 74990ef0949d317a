"""Problem data: modes, coefficient families, drivers, constraints, and assumption checks.

Coefficients are restricted to serializable parametric families so every
problem can round-trip through a JSON file. All families are evaluated at the
state clipped to the declared state box, which keeps them bounded and
Lipschitz.

Mode indices are 0-based in Python and 1-based in files and reports.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from scipy.stats import qmc

from .errors import MalformedSpec

SCHEMA = "cbsde/1"
STRICT_MARGIN = 1e-9


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ModeSet:
    """The regime set {1..m} with jump intensities lambda(i) > 0."""

    m: int
    lam: np.ndarray

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        if self.m < 1:
            raise MalformedSpec("need at least one mode")
        if lam.shape != (self.m,):
            raise MalformedSpec(f"lambda must have {self.m} entries, got {lam.shape}")
        if np.any(~np.isfinite(lam)) or np.any(lam <= 0):
            raise MalformedSpec("every jump intensity lambda(i) must be positive")
        object.__setattr__(self, "lam", _frozen(lam))

    @property
    def total_rate(self) -> float:
        return float(self.lam.sum())


# --------------------------------------------------------------------------
# path features (escape hatch for non-Markovian coefficients)
# --------------------------------------------------------------------------

def _running_mean_update(phi, x_new, t_old, t_new):
    if t_new <= 0:
        return x_new.copy()
    return (phi * t_old + x_new * (t_new - t_old)) / t_new


def _running_max_update(phi, x_new, t_old, t_new):
    return np.maximum(phi, x_new)


# name -> update(phi, x_new, t_old, t_new); initial value is x0, dimension d
FEATURE_MAPS: dict[str, Callable] = {
    "running_mean": _running_mean_update,
    "running_max": _running_max_update,
}


# --------------------------------------------------------------------------
# coefficient families
# --------------------------------------------------------------------------

COEFF_KINDS = ("Affine", "PiecewiseConstantInTime", "PathFeature")


def _affine_block(params: dict, m: int, out: int, d: int, q: int = 0) -> dict:
    def arr(name, shape):
        raw = params.get(name, 0.0)
        a = np.asarray(raw, dtype=float)
        try:
            return _frozen(np.broadcast_to(a.reshape(a.shape), shape))
        except ValueError:
            pass
        # allow per-mode values without the trailing singleton dims
        try:
            return _frozen(np.broadcast_to(a.reshape(a.shape + (1,) * (len(shape) - a.ndim)), shape))
        except ValueError as exc:
            raise MalformedSpec(f"parameter {name!r} with shape {a.shape} does not fit {shape}") from exc

    block = {
        "const": arr("const", (m, out)),
        "linear": arr("linear", (m, out, d)),
        "abs": arr("abs", (m, out, d)),
    }
    if q:
        block["feature"] = arr("feature", (m, out, q))
    return block


def _eval_block(block, i, x, features=None):
    const = block["const"][i]
    y = const + np.einsum("...od,...d->...o", block["linear"][i], x)
    y = y + np.einsum("...od,...d->...o", block["abs"][i], np.abs(x))
    if features is not None and "feature" in block:
        y = y + np.einsum("...oq,...q->...o", block["feature"][i], features)
    return y


@dataclass(frozen=True)
class CoefficientSpec:
    """A per-mode coefficient ``x -> const_i + L_i x + A_i |x| (+ F_i phi)``.

    ``out`` is the output dimension: d for drift and (diagonal) volatility,
    1 for running and terminal profits. ``PiecewiseConstantInTime`` switches
    between affine blocks at the given break times; ``PathFeature`` adds a
    term linear in a registered running feature of the path.
    """

    kind: str
    m: int
    d: int
    out: int
    params: dict
    box: np.ndarray | None = None
    blocks: tuple = field(init=False, repr=False, compare=False)
    breaks: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in COEFF_KINDS:
            raise MalformedSpec(f"unknown coefficient kind {self.kind!r}")
        q = self.d if self.kind == "PathFeature" else 0
        if self.kind == "PiecewiseConstantInTime":
            pieces = self.params.get("pieces")
            breaks = np.asarray(self.params.get("breaks", []), dtype=float)
            if not pieces or len(pieces) != len(breaks) + 1:
                raise MalformedSpec("PiecewiseConstantInTime needs len(pieces) == len(breaks) + 1")
            if np.any(np.diff(breaks) <= 0):
                raise MalformedSpec("break times must be strictly increasing")
            blocks = tuple(_affine_block(pc, self.m, self.out, self.d) for pc in pieces)
        else:
            breaks = np.zeros(0)
            blocks = (_affine_block(self.params, self.m, self.out, self.d, q),)
            if self.kind == "PathFeature":
                if self.params.get("feature_map") not in FEATURE_MAPS:
                    raise MalformedSpec(
                        f"PathFeature needs feature_map in {sorted(FEATURE_MAPS)}"
                    )
                if "lipschitz" not in self.params:
                    raise MalformedSpec("PathFeature coefficients must declare a Lipschitz bound")
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "breaks", _frozen(breaks))
        if self.box is not None:
            object.__setattr__(self, "box", _frozen(self.box))

    # -- construction helpers -------------------------------------------------
    @classmethod
    def constant(cls, values, m: int, d: int, out: int = 1, box=None) -> "CoefficientSpec":
        return cls("Affine", m, d, out, {"const": values}, box)

    @classmethod
    def from_dict(cls, spec: dict, m: int, d: int, out: int, box=None) -> "CoefficientSpec":
        if not isinstance(spec, dict) or "kind" not in spec:
            raise MalformedSpec(f"coefficient spec needs a 'kind': {spec!r}")
        return cls(spec["kind"], m, d, out, dict(spec.get("params", {})), box)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": _jsonable(self.params)}

    # -- evaluation ------------------------------------------------------------
    @property
    def markovian(self) -> bool:
        return self.kind != "PathFeature"

    @property
    def feature_map(self) -> str | None:
        return self.params.get("feature_map") if self.kind == "PathFeature" else None

    def _clip(self, x):
        if self.box is None:
            return x
        return np.clip(x, self.box[:, 0], self.box[:, 1])

    def evaluate(self, t: float, i, x, features=None) -> np.ndarray:
        """Value at time ``t`` for mode(s) ``i`` and states ``x`` of shape (S, d).

        ``i`` is an int or an int array of shape (S,). Returns shape (S, out).
        """
        x = self._clip(np.atleast_2d(np.asarray(x, dtype=float)))
        block = self.blocks[int(np.searchsorted(self.breaks, t, side="right"))]
        i = np.asarray(i)
        if i.ndim == 0:
            i = np.full(x.shape[0], int(i))
        return _eval_block(block, i, x, features)

    def scalar(self, t: float, i, x, features=None) -> np.ndarray:
        return self.evaluate(t, i, x, features)[:, 0]

    def lipschitz(self) -> float:
        if self.kind == "PathFeature":
            return float(self.params["lipschitz"])
        k = 0.0
        for block in self.blocks:
            for i in range(self.m):
                k = max(
                    k,
                    np.linalg.norm(block["linear"][i], 2) + np.linalg.norm(block["abs"][i], 2),
                )
        return float(k)

    def is_zero(self) -> bool:
        return all(
            not np.any(arr) for block in self.blocks for arr in block.values()
        )


@dataclass(frozen=True)
class CostSpec:
    """Switching cost c(t, i, j) = c0[i, j] + c1[i, j] * t (kind Constant has c1 = 0)."""

    m: int
    c0: np.ndarray
    c1: np.ndarray | None = None

    def __post_init__(self):
        c0 = np.asarray(self.c0, dtype=float)
        if c0.ndim == 0:
            c0 = np.full((self.m, self.m), float(c0))
        if c0.shape != (self.m, self.m):
            raise MalformedSpec(f"cost matrix must be {self.m}x{self.m}")
        c0 = c0.copy()
        np.fill_diagonal(c0, 0.0)
        object.__setattr__(self, "c0", _frozen(c0))
        if self.c1 is not None:
            c1 = np.asarray(self.c1, dtype=float)
            if c1.ndim == 0:
                c1 = np.full((self.m, self.m), float(c1))
            c1 = c1.copy()
            np.fill_diagonal(c1, 0.0)
            object.__setattr__(self, "c1", _frozen(c1))

    def at(self, t: float) -> np.ndarray:
        if self.c1 is None:
            return self.c0
        return self.c0 + self.c1 * t

    @classmethod
    def from_dict(cls, spec: dict, m: int) -> "CostSpec":
        kind = spec.get("kind", "Constant")
        params = spec.get("params", {})
        if kind == "Constant":
            return cls(m, params.get("matrix", params.get("value")))
        if kind == "AffineInTime":
            return cls(m, params["c0"], params["c1"])
        raise MalformedSpec(f"unknown cost kind {kind!r}")

    def to_dict(self) -> dict:
        if self.c1 is None:
            return {"kind": "Constant", "params": {"matrix": self.c0.tolist()}}
        return {"kind": "AffineInTime", "params": {"c0": self.c0.tolist(), "c1": self.c1.tolist()}}


@dataclass(frozen=True)
class Bounds:
    psi_bar: float
    g_bar: float
    c_bar: float


@dataclass(frozen=True)
class SwitchingProblem:
    """Full data of a switching problem with a mode-controlled diffusion.

    Diffusion is diagonal: ``sigma`` returns one volatility per state
    component, each driven by its own Brownian coordinate.
    """

    modes: ModeSet
    dim: int
    x0: np.ndarray
    i0: int
    T: float
    b: CoefficientSpec
    sigma: CoefficientSpec
    psi: CoefficientSpec
    g: CoefficientSpec
    c: CostSpec
    bounds: Bounds
    state_box: np.ndarray | None = None

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if x0.shape != (self.dim,):
            raise MalformedSpec(f"x0 must have {self.dim} entries")
        object.__setattr__(self, "x0", _frozen(x0))
        if not 0 <= self.i0 < self.m:
            raise MalformedSpec(f"initial regime {self.i0 + 1} outside 1..{self.m}")
        if not self.T > 0:
            raise MalformedSpec("horizon T must be positive")
        for name, coef, out in (("b", self.b, self.dim), ("sigma", self.sigma, self.dim),
                                ("psi", self.psi, 1), ("g", self.g, 1)):
            if coef.m != self.m or coef.d != self.dim or coef.out != out:
                raise MalformedSpec(f"coefficient {name} has wrong shape")
        if self.state_box is not None:
            box = np.asarray(self.state_box, dtype=float).reshape(self.dim, 2)
            if np.any(box[:, 0] > box[:, 1]):
                raise MalformedSpec("state box has lower > upper bound")
            object.__setattr__(self, "state_box", _frozen(box))

    @property
    def m(self) -> int:
        return self.modes.m

    @property
    def lam(self) -> np.ndarray:
        return self.modes.lam

    @property
    def markovian(self) -> bool:
        return all(c.markovian for c in (self.b, self.sigma, self.psi, self.g))

    @property
    def feature_map(self) -> str | None:
        names = {c.feature_map for c in (self.b, self.sigma, self.psi, self.g)} - {None}
        if len(names) > 1:
            raise MalformedSpec("at most one feature map per problem is supported")
        return names.pop() if names else None

    def cost(self, t: float) -> np.ndarray:
        return self.c.at(t)

    def replace(self, **changes) -> "SwitchingProblem":
        data = {f: getattr(self, f) for f in self.__dataclass_fields__}
        data.update(changes)
        return SwitchingProblem(**data)

    # -- serialization ------------------------------------------------------
    @classmethod
    def from_dict(cls, data: dict) -> "SwitchingProblem":
        if data.get("schema", SCHEMA) != SCHEMA:
            raise MalformedSpec(f"unsupported schema {data.get('schema')!r}")
        try:
            m = int(data["modes"])
            d = int(data["dim"])
            box = data.get("state_box")
            box = None if box is None else np.asarray(box, dtype=float).reshape(d, 2)
            bounds = data.get("bounds")
            if bounds is None:
                raise MalformedSpec("problem file needs bounds {psi_bar, g_bar, c_bar}")
            try:
                bnd = Bounds(float(bounds["psi_bar"]), float(bounds["g_bar"]), float(bounds["c_bar"]))
            except KeyError as exc:
                raise MalformedSpec(f"missing bound {exc.args[0]}") from exc
            zero_vec = {"kind": "Affine", "params": {"const": 0.0}}
            return cls(
                modes=ModeSet(m, data["lambda"]),
                dim=d,
                x0=data["x0"],
                i0=int(data["i0"]) - 1,
                T=float(data["T"]),
                b=CoefficientSpec.from_dict(data.get("b", zero_vec), m, d, d, box),
                sigma=CoefficientSpec.from_dict(data.get("sigma", zero_vec), m, d, d, box),
                psi=CoefficientSpec.from_dict(data.get("psi", zero_vec), m, d, 1, box),
                g=CoefficientSpec.from_dict(data.get("g", zero_vec), m, d, 1, box),
                c=CostSpec.from_dict(data["c"], m),
                bounds=bnd,
                state_box=box,
            )
        except KeyError as exc:
            raise MalformedSpec(f"problem file is missing field {exc.args[0]!r}") from exc

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "modes": self.m,
            "lambda": self.lam.tolist(),
            "dim": self.dim,
            "x0": self.x0.tolist(),
            "i0": self.i0 + 1,
            "T": self.T,
            "b": self.b.to_dict(),
            "sigma": self.sigma.to_dict(),
            "psi": self.psi.to_dict(),
            "g": self.g.to_dict(),
            "c": self.c.to_dict(),
            "bounds": {"psi_bar": self.bounds.psi_bar, "g_bar": self.bounds.g_bar,
                       "c_bar": self.bounds.c_bar},
            "state_box": None if self.state_box is None else self.state_box.tolist(),
        }

    @classmethod
    def load(cls, path) -> "SwitchingProblem":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# --------------------------------------------------------------------------
# drivers, constraints, oblique systems
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DriverSpec:
    """Driver f(t, i, x, y, z, u) = r_i(t, x) + beta_i y + <gamma_i, z> + sum_{j != i} w_ij u_j.

    ``i`` is the current regime I_t. The running term ``r`` may be any
    coefficient family (it carries the profit ψ for switching problems).
    ``gamma_bounds = (C2, C1)`` certifies the jump monotonicity condition:
    w_ij / lambda_j must lie in [C2, C1].
    """

    m: int
    d: int
    running: CoefficientSpec | None = None
    y_coef: np.ndarray | None = None
    z_coef: np.ndarray | None = None
    u_coef: np.ndarray | None = None
    lipschitz: float | None = None
    gamma_bounds: tuple[float, float] | None = None

    def __post_init__(self):
        y = np.zeros(self.m) if self.y_coef is None else np.broadcast_to(np.asarray(self.y_coef, float), (self.m,))
        z = np.zeros((self.m, self.d)) if self.z_coef is None else np.broadcast_to(
            np.asarray(self.z_coef, float).reshape(-1, self.d) if np.ndim(self.z_coef) else np.asarray(self.z_coef, float),
            (self.m, self.d))
        u = np.zeros((self.m, self.m)) if self.u_coef is None else np.broadcast_to(np.asarray(self.u_coef, float), (self.m, self.m)).copy()
        u = np.array(u)
        np.fill_diagonal(u, 0.0)
        object.__setattr__(self, "y_coef", _frozen(y))
        object.__setattr__(self, "z_coef", _frozen(z))
        object.__setattr__(self, "u_coef", _frozen(u))
        if self.running is not None and (self.running.m != self.m or self.running.out != 1):
            raise MalformedSpec("running term must be a scalar per-mode coefficient")
        if self.lipschitz is None:
            object.__setattr__(self, "lipschitz", self.computed_lipschitz())
        if self.gamma_bounds is not None:
            c2, c1 = self.gamma_bounds
            if not (c1 >= c2 > -1 + STRICT_MARGIN):
                raise MalformedSpec("gamma bounds need C1 >= C2 > -1")

    def computed_lipschitz(self) -> float:
        per_mode = np.sqrt(self.y_coef**2 + (self.z_coef**2).sum(1) + (self.u_coef**2).sum(1))
        return float(per_mode.max())

    @property
    def depends_on_solution(self) -> bool:
        return bool(np.any(self.y_coef) or np.any(self.z_coef) or np.any(self.u_coef))

    def running_term(self, t, i, x, features=None) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.running is None:
            return np.zeros(x.shape[0])
        return self.running.scalar(t, i, x, features)

    def evaluate(self, t, i, x, y, z, u, features=None) -> np.ndarray:
        """Vectorised driver value; ``u`` has shape (S, m), entry u[:, i] is ignored."""
        i = np.broadcast_to(np.asarray(i), np.shape(y))
        r = self.running_term(t, i, x, features)
        w = self.u_coef[i]
        return r + self.y_coef[i] * y + np.einsum("sd,sd->s", self.z_coef[i], np.atleast_2d(z)) + (w * u).sum(1)

    def shifted(self, delta: CoefficientSpec) -> "DriverSpec":
        """Driver with ``delta`` added to the running term (used by comparison tests)."""
        if self.running is None:
            running = delta
        else:
            running = _sum_coefficients(self.running, delta)
        return DriverSpec(self.m, self.d, running, self.y_coef, self.z_coef, self.u_coef,
                          None, self.gamma_bounds)


def _sum_coefficients(a: CoefficientSpec, b: CoefficientSpec) -> CoefficientSpec:
    if a.kind != "Affine" or b.kind != "Affine":
        raise MalformedSpec("only affine running terms can be added")
    pa, pb = a.blocks[0], b.blocks[0]
    params = {k: (pa[k] + pb[k]).tolist() for k in ("const", "linear", "abs")}
    return CoefficientSpec("Affine", a.m, a.d, 1, params, a.box)


@dataclass(frozen=True)
class ConstraintSpec:
    """Constraint h(t, i, y, z, v, j) = -v - c(t, i, j) for j in A_i, else 0.

    ``i`` is the pre-jump regime I_{t-}. With ``c`` a switching cost this is
    the switching constraint; with ``c = -cap`` it bounds the jump sizes
    (``v <= cap``). Non-increasing in ``v`` with slope -1.
    """

    costs: CostSpec
    allowed: np.ndarray | None = None

    def __post_init__(self):
        m = self.costs.m
        allowed = ~np.eye(m, dtype=bool) if self.allowed is None else np.asarray(self.allowed, bool).copy()
        np.fill_diagonal(allowed, False)
        object.__setattr__(self, "allowed", _frozen(allowed, bool))

    @property
    def m(self) -> int:
        return self.costs.m

    @classmethod
    def jump_bound(cls, caps) -> "ConstraintSpec":
        caps = np.asarray(caps, float)
        return cls(CostSpec(caps.shape[0], -caps))

    def evaluate(self, t, i, y, z, v, j) -> np.ndarray:
        c = self.costs.at(t)[i, j]
        h = -np.asarray(v, float) - c
        return np.where(self.allowed[i, j], h, 0.0)

    def negative_part(self, t, i, y, z, v, j) -> np.ndarray:
        return np.maximum(-self.evaluate(t, i, y, z, v, j), 0.0)

    def always_satisfied(self) -> bool:
        return not np.any(self.allowed)


@dataclass(frozen=True)
class ObliqueSystemSpec:
    """m coupled reflected equations with barriers h_ij(t, y) = y + c_ij(t).

    psi_i(t, y_1..y_m, z) = r_i(t, x) + sum_j B_ij y_j + <gamma_i, z>.
    """

    m: int
    d: int
    running: CoefficientSpec | None
    terminal: CoefficientSpec
    shifts: CostSpec
    coupling: np.ndarray | None = None
    z_coef: np.ndarray | None = None
    allowed: np.ndarray | None = None

    def __post_init__(self):
        B = np.zeros((self.m, self.m)) if self.coupling is None else np.asarray(self.coupling, float)
        Z = np.zeros((self.m, self.d)) if self.z_coef is None else np.broadcast_to(np.asarray(self.z_coef, float), (self.m, self.d))
        A = ~np.eye(self.m, dtype=bool) if self.allowed is None else np.asarray(self.allowed, bool).copy()
        np.fill_diagonal(A, False)
        object.__setattr__(self, "coupling", _frozen(B))
        object.__setattr__(self, "z_coef", _frozen(Z))
        object.__setattr__(self, "allowed", _frozen(A, bool))


def switching_to_constrained(p: SwitchingProblem):
    """Driver, constraint and terminal of the constrained BSDE representing ``p``.

    f(t, y, z, u) = psi(t, I_t, X_t); h(t, y, z, v, i) = -v - c(t, I_{t-}, i);
    terminal g(I_T, X_T).
    """
    driver = DriverSpec(p.m, p.dim, running=p.psi, lipschitz=0.0, gamma_bounds=(0.0, 0.0))
    return driver, ConstraintSpec(p.c), p.g


def switching_to_oblique(p: SwitchingProblem) -> ObliqueSystemSpec:
    return ObliqueSystemSpec(p.m, p.dim, p.psi, p.g, p.c)


def oblique_to_constrained(sys: ObliqueSystemSpec):
    """One-dimensional constrained form of an oblique system.

    f(t, y, z, u) = psi_I(t, (y + u_j 1_{I != j})_j, z) and
    h(t, y, z, v, j) = y - h_{I,j}(t, y + v) = -v - c_{I,j}(t).
    """
    B = sys.coupling
    y_coef = B.sum(1)
    u_coef = B.copy()
    np.fill_diagonal(u_coef, 0.0)
    driver = DriverSpec(sys.m, sys.d, sys.running, y_coef, sys.z_coef, u_coef)
    return driver, ConstraintSpec(sys.shifts, sys.allowed), sys.terminal


# --------------------------------------------------------------------------
# sampled assumption checks
# --------------------------------------------------------------------------

@dataclass
class ClauseResult:
    clause: str
    passed: bool
    detail: str = ""
    witness: dict | None = None

    def to_dict(self) -> dict:
        return {"clause": self.clause, "passed": self.passed, "detail": self.detail,
                "witness": self.witness}


@dataclass
class ValidationReport:
    clauses: list[ClauseResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.clauses)

    def failed(self) -> list[ClauseResult]:
        return [c for c in self.clauses if not c.passed]

    def __getitem__(self, clause: str) -> ClauseResult:
        for c in self.clauses:
            if c.clause == clause:
                return c
        raise KeyError(clause)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "clauses": [c.to_dict() for c in self.clauses]}


def _sample_states(box, d: int, n: int, seed: int) -> np.ndarray:
    if box is None:
        box = np.tile([-5.0, 5.0], (d, 1))
    u = qmc.Halton(d, seed=seed).random(n)
    return box[:, 0] + u * (box[:, 1] - box[:, 0])


def _sample_times(T: float, n: int, seed: int, grid_times=None) -> np.ndarray:
    base = np.linspace(0.0, T, 11) if grid_times is None else np.asarray(grid_times, float)
    extra = qmc.Halton(1, seed=seed + 1).random(n)[:, 0] * T
    return np.unique(np.concatenate([base, extra]))


def validate_problem(p: SwitchingProblem, n_samples: int = 10_000, seed: int = 0,
                     grid_times=None) -> ValidationReport:
    """Sampled check of the standing assumptions on a switching problem.

    Each clause is reported with a witnessing sample point on failure.
    Deterministic for a given ``seed``.
    """
    bnd = p.bounds
    for name, val in (("psi_bar", bnd.psi_bar), ("g_bar", bnd.g_bar)):
        if val is None or not np.isfinite(val) or val < 0:
            raise MalformedSpec(f"bound {name} must be a finite non-negative number")
    if bnd.c_bar is None or not np.isfinite(bnd.c_bar) or bnd.c_bar <= 0:
        raise MalformedSpec("bound c_bar must be positive")

    xs = _sample_states(p.state_box, p.dim, n_samples, seed)
    ts = _sample_times(p.T, max(n_samples // 100, 10), seed, grid_times)
    m = p.m
    out: list[ClauseResult] = []

    # (i) Lipschitz drift and volatility
    kb, ks = p.b.lipschitz(), p.sigma.lipschitz()
    out.append(ClauseResult("H3(i)", bool(np.isfinite(kb + ks)),
                            f"Lipschitz constants b: {kb:.6g}, sigma: {ks:.6g}"))

    # (ii) terminal structural condition g(i,x) >= g(j,x) + c(T,i,j)
    G = np.stack([p.g.scalar(p.T, i, xs) for i in range(m)])  # (m, S)
    cT = p.cost(p.T)
    res = ClauseResult("H3(ii)", True, "g(i,x) >= max_j g(j,x) + c(T,i,j)")
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            gap = G[i] - G[j] - cT[i, j]
            bad = np.flatnonzero(gap < -1e-12)
            if bad.size:
                s = int(bad[0])
                res = ClauseResult("H3(ii)", False, "terminal structural condition violated",
                                   {"x": xs[s].tolist(), "i": i + 1, "j": j + 1, "gap": float(gap[s])})
                break
        if not res.passed:
            break
    out.append(res)

    # (iii) boundedness of psi and g
    res = ClauseResult("H3(iii)", True, f"|psi| <= {bnd.psi_bar}, |g| <= {bnd.g_bar}")
    gmax = np.abs(G).max(axis=1)
    if np.any(gmax > bnd.g_bar + 1e-12):
        i = int(np.argmax(gmax))
        s = int(np.argmax(np.abs(G[i])))
        res = ClauseResult("H3(iii)", False, "terminal profit exceeds g_bar",
                           {"x": xs[s].tolist(), "i": i + 1, "value": float(G[i, s])})
    else:
        for t in ts:
            for i in range(m):
                v = np.abs(p.psi.scalar(t, i, xs)) if p.psi.markovian else np.abs(
                    p.psi.scalar(t, i, xs, xs))
                s = int(np.argmax(v))
                if v[s] > bnd.psi_bar + 1e-12:
                    res = ClauseResult("H3(iii)", False, "running profit exceeds psi_bar",
                                       {"t": float(t), "x": xs[s].tolist(), "i": i + 1,
                                        "value": float(v[s])})
                    break
            if not res.passed:
                break
    out.append(res)

    # (iv) cost upper bound and strict triangle condition
    bound_res = ClauseResult("H3(iv)", True, f"c(t,i,j) <= -{bnd.c_bar}")
    tri_res = ClauseResult("H3(iv)-triangle", True, "c(t,i,l) > c(t,i,j) + c(t,j,l)")
    for t in ts:
        C = p.cost(t)
        if bound_res.passed:
            for i in range(m):
                for j in range(m):
                    if i != j and C[i, j] > -bnd.c_bar + 1e-12:
                        bound_res = ClauseResult(
                            "H3(iv)", False, "cost exceeds -c_bar",
                            {"t": float(t), "i": i + 1, "j": j + 1, "c": float(C[i, j])})
                        break
                if not bound_res.passed:
                    break
        if tri_res.passed:
            for i in range(m):
                for j in range(m):
                    for l in range(m):
                        if j in (i, l):
                            continue
                        lhs = 0.0 if i == l else C[i, l]
                        if not lhs > C[i, j] + C[j, l] + STRICT_MARGIN:
                            tri_res = ClauseResult(
                                "H3(iv)-triangle", False, "triangle condition violated",
                                {"t": float(t), "i": i + 1, "j": j + 1, "l": l + 1})
                            break
                    if not tri_res.passed:
                        break
                if not tri_res.passed:
                    break
    out.extend([bound_res, tri_res])
    return ValidationReport(out)


def check_driver(driver: DriverSpec, lam, box=None, n_samples: int = 10_000,
                 seed: int = 0, T: float = 1.0) -> ValidationReport:
    """Sampled check of the Lipschitz bound and the jump monotonicity certificate."""
    rng = np.random.default_rng(seed)
    lam = np.asarray(lam, float)
    m, d = driver.m, driver.d
    xs = _sample_states(box, d, n_samples, seed)
    ts = rng.uniform(0, T, n_samples)
    i = rng.integers(0, m, n_samples)
    y, y2 = rng.normal(size=(2, n_samples)) * 5
    z, z2 = rng.normal(size=(2, n_samples, d)) * 5
    u, u2 = rng.normal(size=(2, n_samples, m)) * 5
    out = []
    f1 = np.array([driver.evaluate(t, ii, x[None], np.array([a]), zz[None], uu[None])[0]
                   for t, ii, x, a, zz, uu in zip(ts[:500], i[:500], xs[:500], y[:500], z[:500], u[:500])])
    f2 = np.array([driver.evaluate(t, ii, x[None], np.array([a]), zz[None], uu[None])[0]
                   for t, ii, x, a, zz, uu in zip(ts[:500], i[:500], xs[:500], y2[:500], z2[:500], u2[:500])])
    uu1 = u[:500].copy()
    uu2 = u2[:500].copy()
    uu1[np.arange(500), i[:500]] = 0.0
    uu2[np.arange(500), i[:500]] = 0.0
    dist = np.sqrt((y[:500] - y2[:500]) ** 2 + ((z[:500] - z2[:500]) ** 2).sum(1)
                   + ((uu1 - uu2) ** 2).sum(1))
    ratio = np.abs(f1 - f2) / np.maximum(dist, 1e-300)
    s = int(np.argmax(ratio))
    ok = bool(ratio[s] <= driver.lipschitz + 1e-9)
    out.append(ClauseResult("H0(i)", ok, f"sampled Lipschitz ratio {ratio[s]:.6g} vs k={driver.lipschitz:.6g}",
                            None if ok else {"sample": s, "ratio": float(ratio[s])}))
    if driver.gamma_bounds is not None:
        c2, c1 = driver.gamma_bounds
        # f(u) - f(u') = sum_j w_ij (u_j - u'_j): ratio over sum_j (u_j - u'_j) lambda_j
        W = driver.u_coef[i]
        du = u - u2
        du[np.arange(n_samples), i] = 0.0
        num = (W * du).sum(1)
        den = (du * lam).sum(1)
        keep = np.abs(den) > 1e-6
        # for affine drivers the exact certificate is gamma_j = w_ij / lambda_j
        g = driver.u_coef / lam
        offdiag = ~np.eye(m, dtype=bool)
        gmin = float(g[offdiag].min()) if m > 1 else 0.0
        gmax = float(g[offdiag].max()) if m > 1 else 0.0
        ok = gmin >= c2 - 1e-12 and gmax <= c1 + 1e-12
        detail = f"gamma range [{gmin:.6g}, {gmax:.6g}] vs [{c2}, {c1}]"
        if m > 1 and keep.any():
            ratios = num[keep] / den[keep]
            detail += f"; sampled difference quotient span [{ratios.min():.6g}, {ratios.max():.6g}]"
        out.append(ClauseResult("H0(iii)", bool(ok), detail))
    return ValidationReport(out)


def check_oblique(sys: ObliqueSystemSpec, box=None, T: float = 1.0, n_samples: int = 10_000,
                  seed: int = 0) -> ValidationReport:
    """Sampled check of the structural conditions on an oblique system."""
    m = sys.m
    xs = _sample_states(box, sys.d, n_samples, seed)
    ts = _sample_times(T, 20, seed)
    out = []
    XI = np.stack([sys.terminal.scalar(T, i, xs) for i in range(m)])
    cT = sys.shifts.at(T)
    res = ClauseResult("H2(i)", True, "xi_i >= h_ij(T, xi_j)")
    for i in range(m):
        for j in np.flatnonzero(sys.allowed[i]):
            gap = XI[i] - XI[j] - cT[i, j]
            if np.any(gap < -1e-12):
                s = int(np.argmin(gap))
                res = ClauseResult("H2(i)", False, "terminal outside the domain",
                                   {"x": xs[s].tolist(), "i": i + 1, "j": int(j) + 1})
                break
        if not res.passed:
            break
    out.append(res)
    B = sys.coupling
    offdiag = ~np.eye(m, dtype=bool)
    ok = bool(np.all(B[offdiag] >= 0))
    out.append(ClauseResult("H2(iii)", ok, "psi_i non-decreasing in y_j, j != i"))
    res = ClauseResult("H2(iv)", True, "h_ij(t,y) <= y and chain condition")
    for t in ts:
        C = sys.shifts.at(t)
        for i in range(m):
            for j in np.flatnonzero(sys.allowed[i]):
                if C[i, j] > 0:
                    res = ClauseResult("H2(iv)", False, "h_ij(t,y) > y",
                                       {"t": float(t), "i": i + 1, "j": int(j) + 1})
                for l in np.flatnonzero(sys.allowed[j]):
                    if l != i and not sys.allowed[i, l]:
                        res = ClauseResult("H2(iv)", False, "A_j not contained in A_i + {i}",
                                           {"i": i + 1, "j": int(j) + 1, "l": int(l) + 1})
                    lhs = 0.0 if l == i else C[i, l]
                    if res.passed and not lhs > C[i, j] + C[j, l] + STRICT_MARGIN:
                        res = ClauseResult("H2(iv)", False, "chain condition violated",
                                           {"t": float(t), "i": i + 1, "j": int(j) + 1, "l": int(l) + 1})
                if not res.passed:
                    break
            if not res.passed:
                break
        if not res.passed:
            break
    out.append(res)
    return ValidationReport(out)


def problem_from_arrays(*, lam: Sequence[float], x0, T: float, i0: int = 0,
                        b=0.0, sigma=0.0, psi=0.0, g=0.0, cost=-0.1,
                        bounds: tuple[float, float, float] | None = None,
                        state_box=None, b_linear=0.0, sigma_abs=0.0, sigma_linear=0.0,
                        psi_linear=0.0, g_linear=0.0) -> SwitchingProblem:
    """Build an affine problem from per-mode constants (convenience for tests and scripts)."""
    lam = np.atleast_1d(np.asarray(lam, float))
    m = lam.shape[0]
    x0 = np.atleast_1d(np.asarray(x0, float))
    d = x0.shape[0]
    box = None if state_box is None else np.asarray(state_box, float).reshape(d, 2)
    coef = lambda const, lin=0.0, ab=0.0, out=1: CoefficientSpec(
        "Affine", m, d, out, {"const": const, "linear": lin, "abs": ab}, box)
    psi_c = coef(psi, psi_linear)
    g_c = coef(g, g_linear)
    if bounds is None:
        xs = _sample_states(box, d, 2000, 0)
        psi_bar = max(float(np.abs(psi_c.scalar(0.0, i, xs)).max()) for i in range(m))
        g_bar = max(float(np.abs(g_c.scalar(T, i, xs)).max()) for i in range(m))
        costs = CostSpec(m, cost).c0
        c_bar = float(-costs[~np.eye(m, dtype=bool)].max()) if m > 1 else 1.0
        bounds = (psi_bar, g_bar, c_bar if c_bar > 0 else 1.0)
    return SwitchingProblem(
        modes=ModeSet(m, lam), dim=d, x0=x0, i0=i0, T=T,
        b=coef(b, b_linear, 0.0, d), sigma=coef(sigma, sigma_linear, sigma_abs, d),
        psi=psi_c, g=g_c, c=CostSpec(m, cost), bounds=Bounds(*bounds), state_box=box,
    )
