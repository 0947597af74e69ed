"""Merton solvers: closed form, dual quadrature, finite difference, operators."""

import numpy as np
import pytest

from multiscale_portfolio.merton import (
    apply_dk,
    merton_strategy,
    residual_of_pde,
    risk_tolerance,
    solve_merton,
)
from multiscale_portfolio.utility import make_utility

POWER_HALF = make_utility("power", gamma=0.5)
MIXTURE = make_utility("power_mixture", weights=(1.0, 1.0), exponents=(0.5, 0.25))


def closed_form_value(gamma, lam, tau, x):
    return x**gamma / gamma * np.exp(0.5 * lam**2 * gamma / (1.0 - gamma) * tau)


def test_closed_form_reference_point():
    sol = solve_merton(POWER_HALF, 1.0, 1.0, method="closed_form_power")
    assert sol.value(0.0, 1.0) == pytest.approx(2.0 * np.exp(0.5), rel=1e-14)


def test_zero_sharpe_returns_utility():
    for u in (POWER_HALF, MIXTURE):
        sol = solve_merton(u, 0.0, 1.0)
        xs = np.logspace(-2, 2, 21)
        for t in (0.0, 0.3, 1.0):
            assert np.array_equal(sol.value(t, xs), u.u(xs))


def test_terminal_condition_exact():
    for method in ("closed_form_power", "dual_quadrature"):
        sol = solve_merton(POWER_HALF, 0.7, 1.0, method=method)
        assert sol.value(1.0, 2.0) == POWER_HALF.u(2.0)


def test_risk_tolerance_power_constant_in_time():
    sol = solve_merton(POWER_HALF, 0.8, 1.0)
    for t in (0.0, 0.4, 1.0):
        assert risk_tolerance(sol, t, 3.0) == pytest.approx(6.0, rel=1e-12)


def test_risk_tolerance_terminal_matches_utility():
    sol = solve_merton(MIXTURE, 0.5, 1.0, method="dual_quadrature")
    assert sol.risk_tolerance(1.0, 1.0) == pytest.approx(1.6, rel=1e-12)


def test_merton_strategy_examples():
    sol = solve_merton(POWER_HALF, 1.0, 1.0)
    assert merton_strategy(sol, 0.2, 1.0, 0.5) == pytest.approx(4.0, rel=1e-12)
    zero = solve_merton(POWER_HALF, 0.0, 1.0)
    assert merton_strategy(zero, 0.2, 1.0, 0.5) == 0.0
    assert merton_strategy(sol, 0.2, 1e-12, 0.5) == pytest.approx(0.0, abs=1e-11)
    with pytest.raises(ValueError):
        merton_strategy(sol, 0.2, 1.0, 0.0)


def test_dual_matches_closed_form_power():
    xs = np.logspace(-1, 1, 25)
    worst = 0.0
    for gamma in (0.25, 0.5, 0.75):
        u = make_utility("power", gamma=gamma)
        for lam in (0.2, 1.0):
            dual = solve_merton(u, lam, 1.0, method="dual_quadrature")
            for tau in (0.1, 1.0):
                t = 1.0 - tau
                rel = np.max(np.abs(dual.value(t, xs) / closed_form_value(gamma, lam, tau, xs) - 1.0))
                worst = max(worst, rel)
    assert worst <= 1e-6


def test_dual_derivatives_match_closed_form():
    cf = solve_merton(POWER_HALF, 0.9, 1.0, method="closed_form_power")
    dq = solve_merton(POWER_HALF, 0.9, 1.0, method="dual_quadrature")
    xs = np.array([0.3, 1.0, 4.0])
    for k in range(5):
        assert np.allclose(dq.derivative(0.25, xs, k), cf.derivative(0.25, xs, k), rtol=1e-10)
    pd = dq.surface(0.25, xs, order=4)
    pc = cf.surface(0.25, xs, order=4)
    assert np.allclose(pd["r_x"], pc["r_x"], rtol=1e-10)
    assert np.max(np.abs(pd["r_xx"])) < 1e-10  # R linear in wealth for a power


def test_legendre_first_order_condition_round_trip():
    dq = solve_merton(MIXTURE, 0.5, 1.0, method="dual_quadrature")
    xs = np.logspace(-1, 1, 11)
    ystar = dq.surface(0.3, xs)["m_x"]
    # x must equal -Vt_y(t, y*) to relative 1e-8
    implied = -dq._dual.derivs(0.5, 0.7, ystar, order=1)[1]
    assert np.max(np.abs(implied - xs) / xs) <= 1e-8


def test_finite_difference_matches_dual_for_mixture():
    fd = solve_merton(MIXTURE, 0.5, 1.0, method="finite_difference")
    dq = solve_merton(MIXTURE, 0.5, 1.0, method="dual_quadrature")
    xs = np.logspace(np.log10(0.1), np.log10(10.0), 41)
    worst = 0.0
    for t in (0.0, 0.25, 0.5, 0.75):
        worst = max(worst, float(np.max(np.abs(fd.value(t, xs) / dq.value(t, xs) - 1.0))))
    assert worst <= 1e-3


def test_monotone_in_sharpe():
    xs = np.logspace(-1, 1, 11)
    vals = [solve_merton(POWER_HALF, lam, 1.0, method="dual_quadrature").value(0.2, xs)
            for lam in (0.2, 0.5, 1.0)]
    assert np.all(vals[0] <= vals[1] + 1e-12)
    assert np.all(vals[1] <= vals[2] + 1e-12)


def test_value_monotone_decreasing_in_time():
    sol = solve_merton(MIXTURE, 0.6, 1.0, method="dual_quadrature")
    ts = np.linspace(0.0, 1.0, 6)
    vals = np.array([sol.value(t, 1.5) for t in ts])
    assert np.all(np.diff(vals) < 0.0)


def test_monotone_concave_in_wealth():
    sol = solve_merton(MIXTURE, 0.5, 1.0, method="dual_quadrature")
    pack = sol.surface(0.3, np.logspace(-2, 2, 41))
    assert np.all(pack["m_x"] > 0.0)
    assert np.all(pack["m_xx"] < 0.0)


def test_apply_dk_power_identities():
    # for gamma = 1/2: D1 M = M, D1(D1 M) = M, D2 M = -M
    sol = solve_merton(POWER_HALF, 1.0, 1.0, method="closed_form_power")
    t, x = 0.25, 2.0
    m = sol.value(t, x)
    d1 = apply_dk(sol, 1, sol)
    assert d1(t, x) == pytest.approx(m, rel=1e-8)
    d1sq = apply_dk(sol, 1, lambda tt, xx: d1(tt, xx))
    assert d1sq(t, x) == pytest.approx(m, rel=1e-8)
    d2 = apply_dk(sol, 2, sol)
    assert d2(t, x) == pytest.approx(-m, rel=1e-8)


def test_apply_dk_constant_function_is_zero():
    sol = solve_merton(POWER_HALF, 1.0, 1.0)
    d1 = apply_dk(sol, 1, lambda t, x: 3.0)
    assert d1(0.3, 1.7) == pytest.approx(0.0, abs=1e-9)


def test_apply_dk_rejects_bad_order():
    sol = solve_merton(POWER_HALF, 1.0, 1.0)
    for k in (0, 5, -1):
        with pytest.raises(ValueError):
            apply_dk(sol, k, sol)


def test_residual_closed_form():
    sol = solve_merton(POWER_HALF, 1.0, 1.0, method="closed_form_power")
    for t, x in ((0.0, 0.5), (0.3, 1.0), (0.7, 5.0)):
        assert abs(residual_of_pde(sol, t, x)) / sol.value(t, x) <= 1e-9


def test_residual_dual_quadrature():
    sol = solve_merton(POWER_HALF, 1.0, 1.0, method="dual_quadrature")
    for t in (0.1, 0.5):
        for x in (0.3, 1.0, 3.0):
            assert abs(residual_of_pde(sol, t, x)) / sol.value(t, x) <= 1e-6


def test_residual_zero_sharpe():
    sol = solve_merton(POWER_HALF, 0.0, 1.0)
    assert abs(residual_of_pde(sol, 0.4, 1.0)) <= 1e-9


def test_solver_input_validation():
    with pytest.raises(ValueError):
        solve_merton(POWER_HALF, -0.5, 1.0)
    with pytest.raises(ValueError):
        solve_merton(POWER_HALF, 0.5, 0.0)
    with pytest.raises(ValueError):
        solve_merton(MIXTURE, 0.5, 1.0, method="closed_form_power")
    with pytest.raises(ValueError):
        solve_merton(POWER_HALF, 0.5, 1.0, method="nonsense")
    sol = solve_merton(POWER_HALF, 0.5, 1.0)
    with pytest.raises(ValueError):
        sol.value(0.0, -1.0)
    with pytest.raises(ValueError):
        sol.value(2.0, 1.0)


def test_finite_difference_power_cross_check():
    # independent discretization against the closed form, looser tolerance
    fd = solve_merton(POWER_HALF, 0.5, 1.0, method="finite_difference")
    cf = solve_merton(POWER_HALF, 0.5, 1.0, method="closed_form_power")
    xs = np.logspace(np.log10(0.1), np.log10(10.0), 21)
    worst = max(float(np.max(np.abs(fd.value(t, xs) / cf.value(t, xs) - 1.0)))
                for t in (0.0, 0.5))
    assert worst <= 5e-3
