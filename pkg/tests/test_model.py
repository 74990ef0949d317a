from __future__ import annotations

import json

import numpy as np
import pytest

from cbsde.errors import MalformedSpec
from cbsde.instances import affine_pair, deterministic_pair
from cbsde.model import (Bounds, CoefficientSpec, CostSpec, DriverSpec, ModeSet, SwitchingProblem,
                         check_driver, check_oblique, oblique_to_constrained, problem_from_arrays,
                         switching_to_constrained, switching_to_oblique, validate_problem)


def test_modeset_requires_positive_rates():
    assert ModeSet(2, [1.0, 2.0]).total_rate == 3.0
    with pytest.raises(MalformedSpec):
        ModeSet(2, [1.0, 0.0])
    with pytest.raises(MalformedSpec):
        ModeSet(0, [])


def test_d1_passes_validation(d1):
    rep = validate_problem(d1)
    assert rep.passed
    assert [c.clause for c in rep.clauses] == ["H3(i)", "H3(ii)", "H3(iii)", "H3(iv)", "H3(iv)-triangle"]


def test_positive_cost_fails_upper_bound_with_witness():
    cost = np.array([[0.0, 0.05], [-0.1, 0.0]])
    p = problem_from_arrays(lam=[1, 1], x0=[0.0], T=1.0, psi=[0, 1], cost=cost, bounds=(1.0, 0.0, 0.1))
    rep = validate_problem(p)
    res = rep["H3(iv)"]
    assert not res.passed
    assert res.witness == {"t": 0.0, "i": 1, "j": 2, "c": 0.05}


def test_constant_costs_satisfy_strict_triangle(d1):
    # -0.1 > -0.2 for every chain i -> j -> l
    assert validate_problem(d1)["H3(iv)-triangle"].passed


def test_terminal_structural_condition_violation():
    p = problem_from_arrays(lam=[1, 1], x0=[0.0], T=1.0, g=[0.0, 1.0], cost=-0.1)
    res = validate_problem(p)["H3(ii)"]
    assert not res.passed and res.witness["i"] == 1 and res.witness["j"] == 2


def test_profit_bound_violation():
    p = problem_from_arrays(lam=[1, 1], x0=[0.0], T=1.0, psi=[0, 1], cost=-0.1, bounds=(0.5, 0.0, 0.1))
    assert not validate_problem(p)["H3(iii)"].passed


def test_missing_or_bad_bounds_raise():
    p = deterministic_pair()
    with pytest.raises(MalformedSpec):
        validate_problem(p.replace(bounds=Bounds(1.0, 0.0, 0.0)))
    data = p.to_dict()
    del data["bounds"]
    with pytest.raises(MalformedSpec):
        SwitchingProblem.from_dict(data)


def test_validation_is_deterministic(affine):
    a = validate_problem(affine, seed=3).to_dict()
    b = validate_problem(affine, seed=3).to_dict()
    assert a == b


def test_switching_map_constraint_and_driver(d1):
    driver, constraint, terminal = switching_to_constrained(d1)
    # h(v, i=2) = -v + 0.1 from mode 1 at any time
    v = np.array([-1.0, 0.0, 0.1, 2.0])
    for t in (0.0, 0.37, 1.0):
        assert np.allclose(constraint.evaluate(t, 0, None, None, v, 1), -v + 0.1)
    assert driver.lipschitz == 0.0
    assert not driver.depends_on_solution
    assert terminal.is_zero()


def test_zero_profit_gives_zero_driver():
    p = problem_from_arrays(lam=[1, 1], x0=[0.0], T=1.0, psi=0.0, cost=-0.1)
    driver, _, _ = switching_to_constrained(p)
    x = np.linspace(-1, 1, 5)[:, None]
    for i in range(2):
        assert np.all(driver.running_term(0.3, i, x) == 0.0)


def test_constraint_slope_is_minus_one(d1):
    _, constraint, _ = switching_to_constrained(d1)
    v = np.linspace(-3, 3, 61)
    h = constraint.evaluate(0.5, 1, None, None, v, 0)
    assert np.allclose(np.diff(h) / np.diff(v), -1.0)


def test_oblique_round_trip_matches_switching_map(d1):
    sys_ = switching_to_oblique(d1)
    drv_a, con_a, term_a = switching_to_constrained(d1)
    drv_b, con_b, term_b = oblique_to_constrained(sys_)
    for t in (0.0, 0.5, 1.0):
        assert np.array_equal(con_a.costs.at(t), con_b.costs.at(t))
    assert np.array_equal(drv_b.y_coef, np.zeros(2)) and np.array_equal(drv_b.u_coef, np.zeros((2, 2)))
    assert check_oblique(sys_).passed


def test_oblique_checks_flag_decreasing_coupling():
    p = deterministic_pair()
    sys_ = switching_to_oblique(p)
    bad = type(sys_)(sys_.m, sys_.d, sys_.running, sys_.terminal, sys_.shifts,
                     coupling=[[0.0, -0.5], [0.0, 0.0]])
    assert not check_oblique(bad)["H2(iii)"].passed


def test_problem_file_round_trip(tmp_path, affine):
    f = tmp_path / "p.json"
    affine.dump(f)
    q = SwitchingProblem.load(f)
    assert q.to_dict() == affine.to_dict()
    raw = json.loads(f.read_text())
    assert raw["schema"] == "cbsde/1" and raw["i0"] == 1


def test_unknown_schema_rejected(d1):
    data = d1.to_dict()
    data["schema"] = "other/2"
    with pytest.raises(MalformedSpec):
        SwitchingProblem.from_dict(data)


def test_affine_coefficients_clip_to_box(affine):
    x = np.array([[10.0], [-10.0], [1.0]])
    sig = affine.sigma.evaluate(0.0, 0, x)[:, 0]
    assert np.allclose(sig, [0.2 * 4, 0.2 * 4, 0.2 * 2])
    assert affine.b.lipschitz() == pytest.approx(0.3)


def test_piecewise_constant_in_time_coefficient():
    spec = {"kind": "PiecewiseConstantInTime",
            "params": {"breaks": [0.5], "pieces": [{"const": [1.0, 2.0]}, {"const": [3.0, 4.0]}]}}
    c = CoefficientSpec.from_dict(spec, 2, 1, 1)
    x = np.zeros((1, 1))
    assert c.scalar(0.2, 1, x)[0] == 2.0
    assert c.scalar(0.7, 0, x)[0] == 3.0


def test_path_feature_needs_declared_lipschitz():
    with pytest.raises(MalformedSpec):
        CoefficientSpec.from_dict({"kind": "PathFeature", "params": {"feature_map": "running_mean"}}, 1, 1, 1)


def test_cost_affine_in_time():
    c = CostSpec.from_dict({"kind": "AffineInTime", "params": {"c0": -0.2, "c1": 0.1}}, 2)
    assert c.at(1.0)[0, 1] == pytest.approx(-0.1)
    assert c.at(1.0)[0, 0] == 0.0


def test_driver_certificates():
    drv = DriverSpec(2, 1, y_coef=[-0.1, -0.1], u_coef=[[0, 0.5], [0.2, 0]], gamma_bounds=(0.0, 1.0))
    rep = check_driver(drv, [1.0, 1.0])
    assert rep.passed
    drv_bad = DriverSpec(2, 1, u_coef=[[0, 1.5], [0.2, 0]], gamma_bounds=(0.0, 1.0))
    assert not check_driver(drv_bad, [1.0, 1.0])["H0(iii)"].passed
    liar = DriverSpec(2, 1, y_coef=[2.0, 2.0], lipschitz=0.5)
    assert not check_driver(liar, [1.0, 1.0])["H0(i)"].passed
    with pytest.raises(MalformedSpec):
        DriverSpec(2, 1, gamma_bounds=(-1.0, 0.0))


def test_problems_are_immutable(d1):
    with pytest.raises(Exception):
        d1.x0[0] = 3.0
    with pytest.raises(Exception):
        d1.T = 2.0


def test_instances_have_expected_shapes():
    p = affine_pair()
    assert (p.m, p.dim) == (2, 1)
    assert np.allclose(p.state_box, [[-3, 3]])
