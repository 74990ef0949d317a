"""Constrained BSDEs with jumps, obliquely reflected systems and optimal switching.

Penalization, reflected and dynamic-programming solvers on a lattice or by
least-squares Monte Carlo, with the checks that tie them together.
"""

from __future__ import annotations

from .bsde import (BackwardSolution, PenalizationReport, check_comparison, penalization_ladder,
                   solve_bsde, solve_penalized)
from .engines import LatticeEngine, LsmcEngine
from .errors import (CBSDEError, DegenerateStratum, InvalidStrategy, IterationLimit, LadderExhausted,
                     MalformedSpec, NoConvergence, NonMarkovian, NonTerminating)
from .lattice import Lattice, snell_envelope, switching_value_dp
from .lsmc import BasisSpec, fit_conditional
from .model import (ConstraintSpec, CostSpec, DriverSpec, ObliqueSystemSpec, SwitchingProblem,
                    problem_from_arrays, switching_to_constrained, switching_to_oblique, validate_problem)
from .reflected import identify_constrained, solve_oblique_penalized, solve_oblique_picard
from .simulate import Strategy, Switch, TimeGrid, sample_paths, simulate_controlled
from .switching import (certify_optimality, evaluate_feedback, evaluate_strategy, extract_optimal_strategy,
                        strategy_from_U)
from .verify import (ConvexCone, check_multidim_comparison, check_viability, cone_distance,
                     monotone_limit_battery, project_cone)

__version__ = "0.1.0"
