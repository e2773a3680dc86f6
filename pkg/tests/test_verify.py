import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import RANDOM, STATE, market
from mv_equilibrium import verify as V
from mv_equilibrium.bsde import solve_equilibrium, solve_script_p_system
from mv_equilibrium.equilibrium import Strategy, propagate_wealth, spike, strategy_values
from mv_equilibrium.lattice import AdaptedProcess, PathDependenceError
from mv_equilibrium.market import DEFAULT_TOLERANCES, Scenario, build_market

GAMMA1 = dict(gamma1=1.0, **RANDOM)
GAMMA2 = dict(gamma1=0.0, gamma2=0.5, **STATE)


def equilibrium(m):
    sol = solve_equilibrium(m)
    s = Strategy.operator(m.grid, sol.Theta, sol.Phi)
    return sol, s


def raw_equilibrium(m, s):
    return strategy_values(s, propagate_wealth(m, s))


# -- cost functional ----------------------------------------------------------


def test_cost_zero_strategy_no_aversion():
    m = market(N=5, mode="full_tree")
    assert np.all(V.cost_functional(m, Strategy.raw(m.grid, 0.0), 0) == 0.0)


@pytest.mark.parametrize("u", [-0.7, 0.0, 0.3, 2.0])
def test_cost_one_period(u):
    m = build_market(Scenario(T=0.5, N=1, mode="full_tree", r=0.02, b=0.06, sigma=0.2, gamma1=1.3, x0=2.0))
    dt = 0.5
    expected = u * u * 0.04 * dt - 1.3 * (2.0 * (1 + 0.02 * dt) + u * 0.04 * dt)
    s = Strategy.raw(m.grid, u)
    assert V.cost_functional(m, s, 0, node=0) == pytest.approx(expected, rel=1e-14, abs=1e-15)
    assert V.cost_functional(m, s, 0, x=2.0, method="moments")[0] == pytest.approx(expected, rel=1e-13)


def test_one_period_minimizer_is_equilibrium():
    m = build_market(Scenario(T=0.5, N=1, r=0.02, b=0.06, sigma=0.2, gamma1=1.3))
    sol = solve_equilibrium(m)
    assert sol.Phi[0][0] == pytest.approx(1.3 * 0.04 / (2 * 0.04), rel=1e-14)


@pytest.mark.parametrize("kw", [GAMMA1, GAMMA2])
def test_cost_routes_agree(kw):
    m = market(N=6, mode="full_tree", **kw)
    _, s = equilibrium(m)
    X = propagate_wealth(m, s).X
    for k in range(7):
        a = V.cost_functional(m, s, k)
        b = V.cost_functional(m, s, k, x=X, method="moments")
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-12)


# -- perturbation quotients ---------------------------------------------------


def test_null_spike():
    m = market(N=5, mode="full_tree", **GAMMA1)
    _, s = equilibrium(m)
    q = V.perturbation_quotient(m, s, V.PerturbationSpec(2, 0.0))
    assert np.abs(q).max() <= 1e-12  # rounding only: operator and raw propagations differ in the last bit


@pytest.mark.parametrize("mode", ["recombining", "full_tree"])
@pytest.mark.parametrize("kw", [GAMMA1, GAMMA2])
def test_equilibrium_quotients_nonnegative(mode, kw):
    m = market(N=6, mode=mode, **kw)
    _, s = equilibrium(m)
    for k in range(6):
        for v in V.V_GRID:
            x = None if mode == "full_tree" else 1.0
            assert np.all(V.perturbation_quotient(m, s, V.PerturbationSpec(k, v), x=x) >= -1e-8)


def test_non_equilibrium_has_negative_quotient():
    m = market(N=6, mode="full_tree", **GAMMA1)
    _, s = equilibrium(m)
    u = spike(raw_equilibrium(m, s), 2, 0.1)
    bumped = Strategy.raw(m.grid, u)
    q = np.array([V.perturbation_quotient(m, bumped, V.PerturbationSpec(2, v)) for v in V.V_GRID])
    assert q.min() < -1e-6


def test_multi_step_spike_needs_enumeration():
    m = market(N=6, **GAMMA1)
    _, s = equilibrium(m)
    with pytest.raises(ValueError):
        V.perturbation_quotient(m, s, V.PerturbationSpec(1, 0.5, steps=2), x=1.0)


def test_enumeration_needs_full_tree():
    m = market(N=4, **GAMMA1)
    _, s = equilibrium(m)
    with pytest.raises(PathDependenceError):
        V.cost_functional(m, s, 0, method="enumerate")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 5), st.floats(-3, 3), st.floats(-2, 2))
def test_quadratic_in_v_and_routes_agree(k, v, x0):
    m = build_market(Scenario(N=6, mode="full_tree", gamma1=1.0, x0=x0, **RANDOM))
    _, s = equilibrium(m)
    X = propagate_wealth(m, s).X
    q_enum = V.perturbation_quotient(m, s, V.PerturbationSpec(k, v))
    q_mom = V.perturbation_quotient(m, s, V.PerturbationSpec(k, v), x=X, method="moments")
    np.testing.assert_allclose(q_enum, q_mom, atol=1e-10 * (1 + v * v))
    fit = V.quotient_fit(m, s, k)
    np.testing.assert_allclose(q_enum, fit.A * v + fit.B * v * v, atol=1e-10 * (1 + v * v))


# -- first/second order -------------------------------------------------------


def test_fit_residual_is_rounding():
    m = market(N=6, mode="full_tree", **GAMMA1)
    s = Strategy.raw(m.grid, 0.3)
    for k in range(6):
        assert V.quotient_fit(m, s, k).fit_residual.max() <= 1e-11


def test_second_order_constant_closed_form():
    m = market(N=64, gamma1=1.0)
    _, s = equilibrium(m)
    t = m.grid.times()
    sp1 = solve_script_p_system(m, 0.0).SP1
    for k in (0, 31, 63):
        np.testing.assert_allclose(0.5 * 0.04 * sp1[k], 0.04 * np.exp(2 * 0.02 * (1 - t[k])), rtol=1e-3)
        measured, predicted = V.second_order_coefficient(m, s, k, x=1.0)
        assert np.all(measured > 0)
        np.testing.assert_allclose(measured, predicted, rtol=0.05)


@pytest.mark.parametrize("kw", [GAMMA1, GAMMA2])
def test_operator_residuals_vanish(kw):
    m = market(N=20, **kw)
    sol = solve_equilibrium(m)
    res = V.first_order_residuals(m, sol)
    assert res.max_g1 <= 1e-10 and res.max_g2 <= 1e-10
    if kw is GAMMA2:
        assert res.G2.max_abs() == 0.0 and sol.P4.max_abs() == 0.0 and sol.P5.max_abs() == 0.0


@pytest.mark.parametrize("kw", [GAMMA1, GAMMA2])
def test_theta_perturbation_sensitivity(kw):
    m = market(N=20, **kw)
    sol = solve_equilibrium(m)
    bumped = dataclasses.replace(sol, Theta=sol.Theta + 0.1)
    res = V.first_order_residuals(m, bumped)
    assert res.max_g1 >= m.delta * 0.1 * sol.P1.min() * 0.9


@pytest.mark.parametrize("kw", [GAMMA1, GAMMA2])
def test_raw_residual_matches_linear_coefficient(kw):
    m = market(N=6, mode="full_tree", **kw)
    _, s = equilibrium(m)
    u_star = raw_equilibrium(m, s)
    assert V.raw_strategy_residual(m, u_star).max_abs() <= 1e-9
    probe = Strategy.raw(m.grid, spike(u_star, 1, 0.25) * 1.1)
    res = V.raw_strategy_residual(m, probe)
    for k in range(6):
        np.testing.assert_allclose(res[k], V.quotient_fit(m, probe, k).A, atol=1e-9)


def test_zero_investment_not_equilibrium():
    m = market(N=6, mode="full_tree", gamma1=1.0)
    res = V.raw_strategy_residual(m, AdaptedProcess.zeros(m.grid, 6))
    assert res.min() < -1e-3  # investing more lowers the cost at every node


def test_certify_flags_perturbed_operator():
    m = market(N=16, **GAMMA1)
    sol = solve_equilibrium(m)
    assert V.certify(m, sol, DEFAULT_TOLERANCES).passed
    bad = V.certify(m, dataclasses.replace(sol, Theta=sol.Theta + 0.1), DEFAULT_TOLERANCES)
    checks = bad.checks()
    assert not checks["operator_residuals"] and not checks["first_order"]


# -- exact identities -------------------------------------------------------


@pytest.mark.parametrize("kw", [GAMMA1, GAMMA2])
@pytest.mark.parametrize("steps", [1, 2])
def test_expansion_identity(kw, steps):
    m = market(N=6, mode="full_tree", **kw)
    _, s = equilibrium(m)
    probe = Strategy.raw(m.grid, spike(raw_equilibrium(m, s), 0, 0.3))
    for strat in (s, probe):
        for k in range(6 - steps + 1):
            for v in (0.0, 1.0, -0.1):
                lhs, rhs = V.expansion_check(m, strat, V.PerturbationSpec(k, v, steps))
                assert np.all(np.abs(lhs - rhs) <= 1e-10 * (1 + np.abs(lhs)))
                if v == 0.0:
                    assert np.abs(lhs).max() <= 1e-14 and np.all(rhs == 0.0)


@pytest.mark.parametrize("kw", [GAMMA1, GAMMA2])
def test_representation_identities(kw):
    m = market(N=6, mode="full_tree", **kw)
    _, s = equilibrium(m)
    assert V.representation_check(m, s).max_deviation <= 1e-10
    probe = Strategy.raw(m.grid, AdaptedProcess.from_function(m.grid, lambda k, lv: 0.2 + 0.1 * lv - 0.05 * k, 6))
    assert V.representation_check(m, probe).max_deviation <= 1e-10


def test_representation_needs_full_tree():
    m = market(N=4, **GAMMA1)
    _, s = equilibrium(m)
    with pytest.raises(PathDependenceError):
        V.representation_check(m, s)


# -- uniqueness -------------------------------------------------------------


@pytest.mark.parametrize("kw", [GAMMA1, GAMMA2])
def test_diagnostics_vanish_at_equilibrium(kw):
    m = market(N=6, mode="full_tree", **kw)
    sol, s = equilibrium(m)
    d = V.uniqueness_diagnostics(m, raw_equilibrium(m, s), sol)
    assert max(d.sup_norms().values()) <= 1e-10


def test_diagnostics_detect_spike():
    m = market(N=6, mode="full_tree", **GAMMA1)
    sol, s = equilibrium(m)
    d = V.uniqueness_diagnostics(m, spike(raw_equilibrium(m, s), 3, 0.1), sol)
    assert d.Ybar.max_abs() > 1e-6


def test_diagnostics_trivial_zero_case():
    m = build_market(Scenario(N=5, mode="full_tree", x0=0.0, gamma1=0.0, r=0.02, b=0.06, sigma=0.2))
    sol = solve_equilibrium(m)
    assert sol.Phi.max_abs() == 0.0
    d = V.uniqueness_diagnostics(m, AdaptedProcess.zeros(m.grid, 5), sol)
    assert d.M1.max_abs() == 0.0 and d.M2.max_abs() == 0.0


@pytest.mark.parametrize("kw", [GAMMA1, GAMMA2])
def test_fixed_point(kw):
    m = market(N=7, mode="full_tree", **kw)
    sol, s = equilibrium(m)
    u_star = raw_equilibrium(m, s)
    same = V.fixed_point_refine(m, u_star, sol)
    assert same.iterations == 1 and same.history[0][1] <= 1e-12
    a = V.fixed_point_refine(m, 0.0, sol)
    b = V.fixed_point_refine(m, 2 * u_star, sol)
    assert a.converged and b.converged and a.iterations <= 50 and b.iterations <= 50
    assert (a.u - b.u).max_abs() <= 1e-8
    assert (a.u - u_star).max_abs() <= 1e-8


def test_fixed_point_reports_non_convergence():
    m = market(N=6, mode="full_tree", **GAMMA1)
    sol, _ = equilibrium(m)
    out = V.fixed_point_refine(m, 0.0, sol, max_iter=2)
    assert not out.converged and len(out.history) == 2 and out.history[-1][1] > 1e-8
