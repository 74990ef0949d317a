"""Reference problem instances used by the tests, configs and examples."""

from __future__ import annotations

from .model import SwitchingProblem, problem_from_arrays


def deterministic_pair(cost: float = -0.1, i0: int = 0) -> SwitchingProblem:
    """Two modes, no diffusion, profits (0, 1), zero terminal payoff, T = 1.

    Starting in the first mode the optimum is to switch at once: value
    1 + cost when 1 + cost > 0, else 0 (no switch).
    """
    return problem_from_arrays(lam=[1.0, 1.0], x0=[0.0], T=1.0, i0=i0, psi=[0.0, 1.0], cost=cost)


def affine_pair(psi_linear=0.0) -> SwitchingProblem:
    """Two modes, drift (-0.2x, 0.3x), volatility 0.2(1 + |x|) on [-3, 3], profits (0, 0.5), cost -0.05.

    With ``psi_linear`` the profits become state dependent (clipped to the box).
    """
    return problem_from_arrays(lam=[1.0, 1.0], x0=[1.0], T=1.0, psi=[0.0, 0.5], psi_linear=psi_linear,
                               b_linear=[-0.2, 0.3], sigma=0.2, sigma_abs=0.2, cost=-0.05,
                               state_box=[[-3.0, 3.0]])


def single_mode(x0: float = 0.0, terminal: float = 1.0) -> SwitchingProblem:
    """One mode, no diffusion, zero profit, terminal payoff ``terminal``."""
    return problem_from_arrays(lam=[1.0], x0=[x0], T=1.0, g=terminal, cost=-1.0, bounds=(0.0, abs(terminal), 1.0))
