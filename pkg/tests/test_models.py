"""
Tests for the minimal market model simulators.

Validates:
1. Parameter invariants and scaling dynamics
2. Market price of risk and its direction
3. Stylized model: exact BESQ paths, derived channels, W reconstruction
4. Random scaling model: Euler paths, degenerate and boundary cases
5. Benchmarked primary accounts (martingale at every step) and driver rotations
"""

import numpy as np
import pytest

from sim.errors import BoundaryHitError, DegenerateDriverError, SingularVolatilityError
from sim.models import (
    GammaDynamics,
    MmmRandomScalingParams,
    StylizedMmmParams,
    attach_asset_drivers,
    market_price_of_risk,
    orthogonal_drivers,
    simulate_primary_accounts,
    simulate_random_scaling_mmm,
    simulate_stylized_mmm,
    theta_direction,
)
from sim.stochastic_core import PathBundle, TimeGrid
from sim.verify import martingale_check

STYLIZED = StylizedMmmParams(alpha0=0.05, beta=0.05)


def test_gamma_dynamics():
    gamma = np.array([0.04, 0.09])
    constant = GammaDynamics()
    assert np.all(constant.drift(0.0, gamma) == 0) and np.all(constant.diffusion(0.0, gamma) == 0)
    cir = GammaDynamics('cir', kappa=0.5, theta=0.05, sigma=0.1)
    np.testing.assert_allclose(cir.drift(0.0, gamma), 0.5 * (0.05 - gamma))
    np.testing.assert_allclose(cir.diffusion(0.0, gamma), 0.1 * np.sqrt(gamma))
    linear = GammaDynamics('linear', kappa=0.5, theta=0.05, sigma=0.1)
    np.testing.assert_allclose(linear.diffusion(0.0, gamma), 0.1 * gamma)
    with pytest.raises(ValueError):
        GammaDynamics('quadratic')


def test_parameter_invariants():
    with pytest.raises(ValueError):
        StylizedMmmParams(alpha0=0.0, beta=0.05)
    with pytest.raises(ValueError):
        StylizedMmmParams(alpha0=0.05, beta=-0.1)
    with pytest.raises(ValueError):
        StylizedMmmParams(alpha0=0.05, beta=0.05, r=-0.01)
    with pytest.raises(ValueError):
        MmmRandomScalingParams(bessel_dim=2.0, z0=1.0, gamma0=0.05)
    with pytest.raises(ValueError):
        MmmRandomScalingParams(bessel_dim=4.0, z0=1.0, gamma0=0.05, rho=1.5)
    with pytest.raises(ValueError):
        MmmRandomScalingParams(bessel_dim=4.0, z0=0.0, gamma0=0.05)


def test_stylized_clock_and_f():
    assert STYLIZED.bessel_dim == 4.0
    assert STYLIZED.clock(0.0) == 0.0
    T = 10.0
    for t in (0.0, 3.0, 9.0):
        assert STYLIZED.f(t, T) == pytest.approx(1.0 / (2.0 * (STYLIZED.clock(T) - STYLIZED.clock(t))))
    assert STYLIZED.alpha(2.0) == pytest.approx(0.05 * np.exp(0.1))


def test_market_price_of_risk():
    np.testing.assert_allclose(market_price_of_risk([[0.2, 0.0], [0.1, 0.3]], [0.04, 0.05], 0.0), [0.2, 0.1])
    with pytest.raises(SingularVolatilityError):
        market_price_of_risk([[0.2, 0.4], [0.1, 0.2]], [0.04, 0.05], 0.0)
    direction = theta_direction(STYLIZED.assets, STYLIZED.r)
    assert np.linalg.norm(direction) == pytest.approx(1.0)


def test_stylized_paths():
    grid = TimeGrid(0.0, 10.0, 20)
    paths = simulate_stylized_mmm(STYLIZED, grid, 20000, seed=42)
    Z = paths['Z']
    assert Z.shape == (20000, 21)
    assert np.all(Z > 0)
    np.testing.assert_allclose(paths['s_hat_0'], 1.0 / Z)
    np.testing.assert_allclose(paths['discounted_np'], Z)
    np.testing.assert_allclose(paths['theta_abs'] ** 2, paths['alpha'] / Z, rtol=1e-12)

    # E[Z_T] = z0 + 4 s(T); Var = 8 s^2 + 4 z0 s
    s = STYLIZED.clock(10.0)
    stderr = np.sqrt((8 * s ** 2 + 4 * s) / Z.shape[0])
    assert abs(Z[:, -1].mean() - (1.0 + 4 * s)) < 4 * stderr

    # reconstructed W has N(0, dt) increments
    dW = paths['dW']
    assert abs(dW.mean()) < 4 * np.sqrt(grid.dt / dW.size)
    assert dW.var() == pytest.approx(grid.dt, rel=0.02)
    print("✓ Stylized paths match BESQ^4 moments")


def test_stylized_paths_are_reproducible():
    grid = TimeGrid(0.0, 5.0, 5)
    a = simulate_stylized_mmm(STYLIZED, grid, 50, seed=9)
    b = simulate_stylized_mmm(STYLIZED, grid, 50, seed=9)
    np.testing.assert_array_equal(a['Z'], b['Z'])
    # a path's draws do not depend on how many paths are simulated
    c = simulate_stylized_mmm(STYLIZED, grid, 10, seed=9)
    np.testing.assert_array_equal(a['Z'][:10], c['Z'])


def test_random_scaling_constant_gamma_mean():
    params = MmmRandomScalingParams(bessel_dim=4.0, z0=1.0, gamma0=0.05)
    grid = TimeGrid(0.0, 10.0, 100)
    paths = simulate_random_scaling_mmm(params, grid, 20000, seed=3)
    Z = paths['Z']
    assert np.all(paths['gamma'] == 0.05)
    # E[Z_T] = z0 + (delta/4) gamma T
    stderr = Z[:, -1].std(ddof=1) / np.sqrt(Z.shape[0])
    assert abs(Z[:, -1].mean() - 1.5) < 4 * stderr
    np.testing.assert_allclose(paths['s_hat_0'], 1.0 / Z)


def test_random_scaling_derived_channels():
    params = MmmRandomScalingParams(bessel_dim=5.0, z0=1.5, gamma0=0.04)
    paths = simulate_random_scaling_mmm(params, TimeGrid(0.0, 2.0, 10), 200, seed=4)
    Z, gamma = paths['Z'], paths['gamma']
    np.testing.assert_allclose(paths['discounted_np'], Z ** 1.5)
    np.testing.assert_allclose(paths['alpha'], 2.25 * gamma * Z ** 0.5)


def test_random_scaling_frozen_when_gamma_zero():
    params = MmmRandomScalingParams(bessel_dim=4.0, z0=1.0, gamma0=0.0)
    paths = simulate_random_scaling_mmm(params, TimeGrid(0.0, 1.0, 10), 20, seed=1)
    assert np.all(paths['Z'] == 1.0)


def test_random_scaling_boundary_hit():
    params = MmmRandomScalingParams(bessel_dim=2.1, z0=1.0, gamma0=10.0)
    with pytest.raises(BoundaryHitError):
        simulate_random_scaling_mmm(params, TimeGrid(0.0, 1.0, 1), 2000, seed=5)


def test_degenerate_market_price_of_risk():
    flat = StylizedMmmParams(alpha0=0.05, beta=0.05, asset_appreciation=(0.0, 0.0))
    with pytest.raises(DegenerateDriverError):
        simulate_stylized_mmm(flat, TimeGrid(0.0, 1.0, 2), 10, seed=1)


def test_primary_accounts_are_martingales():
    grid = TimeGrid(0.0, 5.0, 50)
    paths = simulate_primary_accounts(simulate_stylized_mmm(STYLIZED, grid, 20000, seed=8), STYLIZED)
    for j, name in enumerate(('s_hat_1', 's_hat_2')):
        values = paths[name]
        assert np.all(values > 0)
        np.testing.assert_allclose(values[:, 0], STYLIZED.assets.s0[j] * paths['s_hat_0'][:, 0])
        terminal = values[:, -1]
        stderr = terminal.std(ddof=1) / np.sqrt(terminal.size)
        assert abs(terminal.mean() - values[0, 0]) < 4 * stderr

    with pytest.raises(ValueError):
        simulate_primary_accounts(PathBundle(grid, {'Z': paths['Z']}), STYLIZED)


def test_primary_accounts_have_no_drift_at_any_step():
    grid = TimeGrid(0.0, 5.0, 50)
    paths = simulate_primary_accounts(simulate_stylized_mmm(STYLIZED, grid, 20000, seed=8), STYLIZED)
    for name in ('s_hat_1', 's_hat_2'):
        report = martingale_check(name, paths)
        assert report.mean_increment.shape == (grid.n_steps,)
        assert report.passed, (name, report.max_abs_z)
    print("✓ Benchmarked primary accounts: every step's mean increment within 4 SE of 0")


def test_driver_rotation_round_trip():
    grid = TimeGrid(0.0, 2.0, 8)
    paths = simulate_stylized_mmm(STYLIZED, grid, 100, seed=12)
    rotated = orthogonal_drivers(paths)
    np.testing.assert_allclose(rotated['dW'], paths['dW'], atol=1e-12)
    rebuilt = attach_asset_drivers(rotated, STYLIZED)
    np.testing.assert_allclose(rebuilt['dW1'], paths['dW1'], atol=1e-12)
    np.testing.assert_allclose(rebuilt['dW2'], paths['dW2'], atol=1e-12)
    # W and W_perp are uncorrelated
    corr = np.corrcoef(rotated['dW'].ravel(), rotated['dW_perp'].ravel())[0, 1]
    assert abs(corr) < 4 / np.sqrt(rotated['dW'].size)
