from __future__ import annotations

import warnings

import numpy as np
import pytest

from cbsde import BasisSpec, Lattice, TimeGrid, fit_conditional, problem_from_arrays, sample_paths, switching_value_dp
from cbsde.errors import DegenerateStratum, MalformedSpec
from cbsde.lsmc import jump_component


def _gauss_hermite_expectation(fn, mean, sd, n=80):
    """E[fn(mean + sd * Z)] for standard normal Z, vectorised over mean and sd."""
    z, w = np.polynomial.hermite_e.hermegauss(n)
    w = w / w.sum()
    return (fn(mean[:, None] + sd[:, None] * z[None, :]) * w[None, :]).sum(axis=1)


@pytest.mark.parametrize("basis", [BasisSpec(), BasisSpec("LocalPartitionPerMode", cells=6)])
def test_constant_reproduction(basis, affine):
    ps = sample_paths(affine, TimeGrid(1.0, 10), 2000, seed=0)
    op = fit_conditional(ps.X[:, 5], ps.I[:, 5], np.full(2000, 7.0), basis, 2)
    x = np.linspace(-2, 2, 11)[:, None]
    for i in range(2):
        assert np.allclose(op.predict(i, x), 7.0, atol=1e-10)


def test_identity_predictor_without_dynamics():
    p = problem_from_arrays(lam=[1.0], x0=[0.0], T=1.0, cost=-1.0)
    ps = sample_paths(p, TimeGrid(1.0, 4), 50, seed=0)
    x = np.linspace(-1, 1, 50)[:, None]  # spread the states by hand; X_{k+1} = X_k with no dynamics
    op = fit_conditional(x, np.zeros(50, int), x[:, 0], BasisSpec(degree=1), 1)
    assert np.allclose(op.predict(0, x), x[:, 0], atol=1e-10)
    op3 = fit_conditional(x, np.zeros(50, int), x[:, 0], BasisSpec(degree=3), 1)
    assert np.allclose(op3.predict(0, x), x[:, 0], atol=1e-6)
    assert len(ps) == 50


def test_regression_matches_conditional_expectation():
    # one mode, multiplicative noise, |x| payoff: E[g(X_T) | X_{T-dt}] by quadrature of the Euler step
    p = problem_from_arrays(lam=[1.0], x0=[0.5], T=1.0, b_linear=0.1, sigma=0.1, sigma_abs=0.3, g=0.0,
                            cost=-1.0, bounds=(0.0, 3.0, 1.0), state_box=[[-3, 3]])
    N = 10
    ps = sample_paths(p, TimeGrid(1.0, N), 100_000, seed=21)
    x = ps.X[:, N - 1, 0]
    resp = np.abs(ps.X[:, N, 0])
    op = fit_conditional(ps.X[:, N - 1], ps.I[:, N - 1], resp, BasisSpec(degree=3), 1)
    pred = op.predict(0, ps.X[:, N - 1])
    dt = 1.0 / N
    truth = _gauss_hermite_expectation(np.abs, x + 0.1 * x * dt, (0.1 + 0.3 * np.abs(x)) * np.sqrt(dt))
    err = np.sqrt(np.mean((pred - truth) ** 2)) / np.sqrt(np.mean(truth**2))
    assert err <= 0.01


def test_regression_matches_lattice_on_smooth_payoff():
    p = problem_from_arrays(lam=[1.0], x0=[0.0], T=1.0, b_linear=0.2, sigma=0.3, cost=-1.0,
                            state_box=[[-3, 3]])
    N = 10
    L = Lattice(p, TimeGrid(1.0, N))
    ps = sample_paths(p, L.grid, 100_000, seed=4)
    g = lambda x: x + 0.5 * x**2
    op = fit_conditional(ps.X[:, N - 1], ps.I[:, N - 1], g(ps.X[:, N, 0]), BasisSpec(degree=3), 1)
    nodes = L.nodes[:, 0]
    inner = np.abs(nodes) <= 1.0
    exact = L.expect_frozen(g(nodes), N - 1, 0)[inner]
    pred = op.predict(0, L.nodes[inner])
    err = np.sqrt(np.mean((pred - exact) ** 2)) / np.sqrt(np.mean(exact**2))
    assert err <= 0.01


def test_degenerate_stratum_falls_back_to_mean():
    x = np.linspace(0, 1, 20)[:, None]
    modes = np.zeros(20, int)
    modes[:2] = 1
    y = np.arange(20.0)
    with pytest.warns(DegenerateStratum):
        op = fit_conditional(x, modes, y, BasisSpec(degree=3), 2)
    assert 1 in op.degenerate
    assert np.allclose(op.predict(1, x), 0.5)


def test_empty_stratum_uses_pooled_fit():
    x = np.linspace(0, 1, 30)[:, None]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        op = fit_conditional(x, np.zeros(30, int), 2 * x[:, 0], BasisSpec(degree=1), 2)
    assert op.degenerate == [1]
    assert np.allclose(op.predict(1, x), 2 * x[:, 0], atol=1e-8)


def test_basis_validation():
    with pytest.raises(MalformedSpec):
        BasisSpec("Neural")
    with pytest.raises(MalformedSpec):
        BasisSpec(stratified=False)
    assert BasisSpec(degree=3).size(1) == 4
    assert BasisSpec(degree=2).size(2) == 6
    with pytest.raises(MalformedSpec):
        fit_conditional(np.zeros((5, 1)), np.zeros(5, int), np.zeros(5), BasisSpec("PathFeature"), 1)


def test_predictions_invariant_to_path_order(affine):
    ps = sample_paths(affine, TimeGrid(1.0, 10), 3000, seed=2)
    y = np.sin(ps.X[:, 6, 0])
    op = fit_conditional(ps.X[:, 5], ps.I[:, 5], y, BasisSpec(), 2)
    perm = np.random.default_rng(0).permutation(3000)
    op2 = fit_conditional(ps.X[perm, 5], ps.I[perm, 5], y[perm], BasisSpec(), 2)
    x = np.linspace(-2, 2, 9)[:, None]
    for i in range(2):
        assert np.allclose(op.predict(i, x), op2.predict(i, x), atol=1e-10)


def test_tower_property_on_linear_payoff():
    p = problem_from_arrays(lam=[1.0], x0=[0.0], T=1.0, b_linear=0.3, sigma=0.4, cost=-1.0)
    ps = sample_paths(p, TimeGrid(1.0, 10), 20_000, seed=8)
    basis = BasisSpec(degree=2)
    gT = 2.0 * ps.X[:, 10, 0] + 1.0
    step1 = fit_conditional(ps.X[:, 9], ps.I[:, 9], gT, basis, 1).predict(0, ps.X[:, 9])
    two = fit_conditional(ps.X[:, 8], ps.I[:, 8], step1, basis, 1).predict(0, ps.X[:, 8])
    direct = fit_conditional(ps.X[:, 8], ps.I[:, 8], gT, basis, 1).predict(0, ps.X[:, 8])
    assert np.sqrt(np.mean((two - direct) ** 2)) <= 1e-2


def test_jump_component_single_mode():
    U = jump_component(np.zeros(5, int), np.arange(5.0)[None, :])
    assert U.shape == (5, 1) and np.all(U == 0)


def test_jump_component_equal_values():
    v = np.tile(np.arange(4.0), (3, 1))
    U = jump_component(np.array([0, 1, 2, 0]), v)
    assert np.all(U == 0)


def test_jump_component_deterministic_pair(d1_lattice, d1):
    V = switching_value_dp(d1_lattice, d1)
    v0 = V.values[0][:, [d1_lattice.origin]]
    U = jump_component(np.array([0]), v0)
    assert U[0, 1] == pytest.approx(0.1, abs=1e-12)
    assert U[0, 0] == 0.0
