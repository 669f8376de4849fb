"""
Tests for benchmarked risk-minimizing strategies.

Validates:
1. eta / nu formulas and their closed-form stylized variant
2. Bond volatility psi against a finite difference of the bond formula
3. Cost processes: self-financing case and the two-numeraire identity
4. Explicit asset hedge: replication error shrinks with the step size
5. Defaultable put hedge: finite-difference ratio, cost identity, product rule
6. Monte Carlo GKW regression: exact on linear claims, minimality on a quadratic claim,
   closed-form eta recovered, zero bond integrand for a claim on W_perp
"""

import numpy as np
import pytest

from sim.errors import DegenerateDriverError, NumericalError
from sim.hedging import (
    CostProcess,
    Strategy,
    conditional_risk,
    cost_process,
    defaultable_hedge,
    defaultable_put_hedge,
    eta_strategy,
    eta_strategy_stylized,
    gkw_regression,
    hedge_ratio_fd,
    minimality_check,
    numeraire_costs,
    nu_residual,
    psi_integrand_stylized,
    replication_convergence,
    split_hedgeable,
    stylized_asset_hedge,
)
from sim.models import StylizedMmmParams, orthogonal_drivers, simulate_primary_accounts, simulate_stylized_mmm
from sim.pricing import (
    DefaultModel,
    RecoveryFunction,
    attach_bond_channel,
    default_times,
    psi_process,
    zcb_benchmarked,
)
from sim.stochastic_core import TimeGrid, cumulate

PARAMS = StylizedMmmParams(alpha0=0.05, beta=0.05)


def _walk(n_paths, n_steps, m=1, dt=0.1, seed=0):
    """Independent Gaussian instrument increments and their running sums."""
    rng = np.random.default_rng(seed)
    dX = np.sqrt(dt) * rng.standard_normal((n_paths, n_steps, m))
    X = np.concatenate([np.zeros((n_paths, 1, m)), np.cumsum(dX, axis=1)], axis=1)
    return dX, X


# ==========================================
# STRATEGY FORMULAS
# ==========================================

def test_eta_and_nu_reference_values():
    assert eta_strategy(1.0, [0.2, 0.0], [0.1, 0.3], -0.5) == pytest.approx(0.2)
    assert nu_residual(1.0, [0.2, 0.0], [0.1, 0.3]) == pytest.approx(-0.3)
    with pytest.raises(DegenerateDriverError):
        eta_strategy(1.0, [0.2, 0.0], [0.1, 0.3], 0.0)
    with pytest.raises(DegenerateDriverError):
        nu_residual(1.0, [0.0, 0.0], [0.1, 0.3])


def test_degenerate_node_is_reported():
    psi = np.array([-0.5, 0.0, -0.4])
    with pytest.raises(DegenerateDriverError) as info:
        eta_strategy(np.ones(3), np.tile([0.2, 0.1], (3, 1)), [0.1, 0.3], psi)
    assert info.value.node == 1


def test_psi_matches_bond_sensitivity():
    """dP_hat = psi dW with dS_hat0 = -S_hat0 |theta| dW and |theta|^2 = alpha S_hat0."""
    t, T = 2.0, 10.0
    s = np.array([0.4, 1.0, 1.8])
    h = 1e-6
    slope = (zcb_benchmarked(t, s + h, PARAMS, T) - zcb_benchmarked(t, s - h, PARAMS, T)) / (2 * h)
    exposure = -s * np.sqrt(PARAMS.alpha(t) * s)
    np.testing.assert_allclose(psi_integrand_stylized(t, s, PARAMS, T), slope * exposure, rtol=1e-7)
    assert np.all(psi_integrand_stylized(t, s, PARAMS, T) < 0)
    with pytest.raises(ValueError):
        psi_integrand_stylized(T, 1.0, PARAMS, T)


def test_stylized_eta_agrees_with_generic_formula():
    grid = TimeGrid(0.0, 5.0, 10)
    paths = simulate_stylized_mmm(PARAMS, grid, 200, seed=7)
    t = grid.times[None, :-1]
    s0 = paths['s_hat_0'][:, :-1]
    theta = np.stack([paths['theta_1'][:, :-1], paths['theta_2'][:, :-1]], axis=-1)
    s_j = 1.3 * np.ones_like(s0)
    row = PARAMS.assets.vol_matrix[0]
    generic = eta_strategy(s_j, theta, row, psi_integrand_stylized(t, s0, PARAMS, 10.0))
    np.testing.assert_allclose(eta_strategy_stylized(s_j, theta, row, t, s0, PARAMS, 10.0), generic, rtol=1e-10)


# ==========================================
# COST PROCESSES
# ==========================================

def test_self_financing_strategy_has_constant_cost():
    dX, X = _walk(100, 8, m=2, seed=1)
    holdings = np.random.default_rng(2).normal(size=(100, 8, 2))
    strategy = Strategy(holdings, ('a', 'b'))
    value = 3.0 + cumulate(strategy.gains(dX))
    cost = cost_process(strategy, X, value)
    np.testing.assert_allclose(cost.cost, 3.0, atol=1e-12)
    assert cost.risk0 == pytest.approx(0.0, abs=1e-20)

    with pytest.raises(ValueError):
        cost_process(strategy, X[:, :-1], value)
    with pytest.raises(ValueError):
        Strategy(holdings, ('a',))


def test_numeraire_cost_identity():
    rng = np.random.default_rng(3)
    n, steps = 50, 6
    X = np.exp(0.2 * rng.standard_normal((n, steps + 1)))
    V = np.exp(0.3 * rng.standard_normal((n, steps + 1)))
    s0 = np.exp(0.1 * rng.standard_normal((n, steps + 1)))
    strategy = Strategy(rng.normal(size=(n, steps)), ('x',))
    c_hat, c_bar = numeraire_costs(strategy, X, V, s0)
    d_bar = c_bar.increments
    np.testing.assert_allclose(c_hat.increments, s0[:, :-1] * d_bar + d_bar * np.diff(s0, axis=1), atol=1e-12)

    with pytest.raises(ValueError):
        numeraire_costs(strategy, X, V, -s0)
    print("✓ Cost identity holds under both numeraires")


def test_conditional_risk_of_constant_cost_is_zero():
    cost = CostProcess.from_path(np.ones((40, 5)))
    fitted, stderr = conditional_risk(cost, np.linspace(0.0, 1.0, 40), 2, degree=2)
    np.testing.assert_allclose(fitted, 0.0, atol=1e-12)
    assert stderr == pytest.approx(0.0, abs=1e-12)


# ==========================================
# EXPLICIT ASSET HEDGE
# ==========================================

def test_asset_hedge_bookkeeping():
    grid = TimeGrid(0.0, 5.0, 64)
    hedge = stylized_asset_hedge(simulate_stylized_mmm(PARAMS, grid, 300, seed=21), PARAMS, asset_index=2)
    assert hedge.asset == 's_hat_2'
    assert hedge.h0 == pytest.approx(PARAMS.assets.s0[1])
    assert hedge.eta.shape == hedge.nu.shape == (300, 64)
    assert hedge.strategy.instruments == ('p_hat', 'W_perp')
    assert hedge.rms_error < 0.25 * PARAMS.assets.s0[1]
    with pytest.raises(ValueError):
        stylized_asset_hedge(simulate_stylized_mmm(PARAMS, grid, 10, seed=1), PARAMS, asset_index=3)


def test_replication_error_shrinks_with_step():
    table, slope = replication_convergence(PARAMS, [16, 64, 256], n_paths=400, seed=5, T=5.0)
    assert list(table.columns) == ['n_steps', 'dt', 'rms_error', 'rms_stderr']
    assert np.all(np.diff(table['rms_error']) < 0)
    assert slope > 0.25
    print(f"✓ Replication RMS slope {slope:.2f} in log dt")


# ==========================================
# DEFAULTABLE PUT
# ==========================================

def test_hedge_ratio_fd():
    p = np.array([0.5, 0.9])
    np.testing.assert_allclose(hedge_ratio_fd(lambda t, x: x ** 2, 0.0, p), 2 * p, rtol=1e-8)
    with pytest.raises(NumericalError):
        hedge_ratio_fd(lambda t, x: (np.asarray(x) > 1.0).astype(float), 0.0, 1.000001)
    with pytest.raises(NumericalError):
        hedge_ratio_fd(lambda t, x: x, 0.0, 0.0)


def test_defaultable_hedge_validation():
    assert defaultable_hedge(0.5, -1.2) == pytest.approx(-0.6)
    with pytest.raises(ValueError):
        defaultable_hedge(1.5, 1.0)
    with pytest.raises(NumericalError):
        defaultable_hedge(0.5, np.inf)


def test_defaultable_put_hedge_identities():
    grid = TimeGrid(0.0, 5.0, 5)
    paths = simulate_stylized_mmm(PARAMS, grid, 200, seed=13)
    model = DefaultModel(0.3, RecoveryFunction('constant', 0.4), 5.0)
    sample = default_times(model, grid, 200, seed=13)
    hedge = defaultable_put_hedge(paths, sample, psi_process(model, sample, grid), model, PARAMS, K=1.5)
    assert hedge.xi.shape == (200, 5)
    assert hedge.cost_identity_residual < 1e-10
    assert hedge.product_rule_residual < 1e-10
    np.testing.assert_allclose(hedge.value[:, -1], hedge.put[:, -1] * np.where(sample.tau < 5.0, 0.4, 1.0))


# ==========================================
# MONTE CARLO GKW
# ==========================================

def test_gkw_linear_claim_is_replicated():
    dX, X = _walk(2000, 6, m=2, seed=8)
    payoff = 1.0 + 0.3 * X[:, -1, 0] - 0.5 * X[:, -1, 1]
    result = gkw_regression(payoff, dX, X, degree=2, instruments=('a', 'b'))
    np.testing.assert_allclose(result.integrand.holdings[..., 0], 0.3, atol=1e-8)
    np.testing.assert_allclose(result.integrand.holdings[..., 1], -0.5, atol=1e-8)
    assert result.h0 == pytest.approx(1.0, abs=1e-8)
    assert result.identity_residual(payoff) < 1e-8
    assert np.max(np.abs(result.residual_terminal)) < 1e-8
    hedgeable, unhedgeable = split_hedgeable(result)
    np.testing.assert_allclose(hedgeable + unhedgeable, payoff, atol=1e-10)
    assert result.integrand.instruments == ('a', 'b')
    print("✓ GKW regression is exact on a linear claim")


def test_gkw_quadratic_claim_is_minimal():
    """H = X_T^2 has integrand 2 X_t and a residual orthogonal to the gains."""
    dX, X = _walk(20_000, 10, seed=9)
    payoff = X[:, -1, 0] ** 2
    result = gkw_regression(payoff, dX, X)
    stderr = payoff.std(ddof=1) / np.sqrt(payoff.size)
    assert abs(result.h0 - 1.0) < 4 * stderr + 0.01
    assert result.identity_residual(payoff) < 1e-8
    holdings = result.integrand.holdings[:, 1:, 0]
    assert np.mean(np.abs(holdings - 2.0 * X[:, 1:-1, 0])) < 0.15
    assert len(result.diagnostics['ranks']) == 10

    report = minimality_check(result, dX, X)
    assert report.passed
    assert list(report.to_frame().columns) == ['perturbation', 'risk_increase', 'stderr', 'passed']


def test_gkw_recovers_closed_form_eta():
    """Regression hedge of S_hat^1_T with the bond is within 5% of the closed-form eta."""
    T = 5.0
    paths = simulate_stylized_mmm(PARAMS, TimeGrid(0.0, T, 50), 50_000, seed=505)
    paths = attach_bond_channel(simulate_primary_accounts(paths, PARAMS), PARAMS, T)
    state = np.stack([paths['Z'], paths['s_hat_1']], axis=-1)
    result = gkw_regression(paths['s_hat_1'][:, -1], np.diff(paths['p_hat'], axis=1), state, degree=3,
                            instruments=['p_hat'])
    eta = stylized_asset_hedge(paths, PARAMS, 1, T).eta
    relative = np.sqrt(np.mean((result.integrand.holdings[:, :, 0] - eta) ** 2)) / np.sqrt(np.mean(eta ** 2))
    assert relative <= 0.05
    print(f"✓ Regression eta within {100 * relative:.1f}% (RMS) of the closed form")


def test_gkw_integrand_vanishes_for_orthogonal_claim():
    """A claim on W_perp alone has no bond component: the bond gains carry almost none of its variance."""
    T = 5.0
    paths = orthogonal_drivers(attach_bond_channel(simulate_stylized_mmm(PARAMS, TimeGrid(0.0, T, 20), 20_000,
                                                                         seed=606), PARAMS, T))
    w_perp = cumulate(paths['dW_perp'])
    payoff = w_perp[:, -1] ** 2
    dP = np.diff(paths['p_hat'], axis=1)
    result = gkw_regression(payoff, dP, np.stack([paths['Z'], w_perp], axis=-1), degree=3, instruments=['p_hat'])

    bond_gains = np.sum(result.integrand.holdings[:, :, 0] * dP, axis=1)
    assert bond_gains.var() < 0.01 * payoff.var()
    stderr = payoff.std(ddof=1) / np.sqrt(payoff.size)
    assert abs(result.h0 - T) < 4 * stderr + 0.05


def test_gkw_validation():
    dX, X = _walk(20, 3)
    with pytest.raises(ValueError):
        gkw_regression(np.ones(19), dX, X)
    with pytest.raises(ValueError):
        gkw_regression(np.ones(20), dX, X[:, :-1])
    with pytest.raises(ValueError):
        gkw_regression(np.full(20, np.nan), dX, X)
