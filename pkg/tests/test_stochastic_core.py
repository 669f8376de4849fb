"""
Tests for the path-simulation kernel.

Validates:
1. Time grid construction and validation
2. Reproducible, independent random streams
3. Exact squared-Bessel steps (mean, law against a fine Euler scheme, input validation)
4. Euler steps with full truncation
5. PathBundle shape checks and block scheduling
"""

import numpy as np
import pytest
from scipy import stats

from sim.stochastic_core import (
    PathBundle,
    RngStream,
    TimeGrid,
    besq_exact_step,
    besq_transition,
    cumulate,
    euler_step_full_truncation,
    make_time_grid,
    path_blocks,
    run_blocks,
    sample_wiener_increments,
    truncated,
)


def _square_block(task):
    """Module-level worker so it can cross a process boundary."""
    start, stop = task
    return [k * k for k in range(start, stop)]


def test_time_grid():
    grid = make_time_grid(0.0, 1.0, 4)
    assert grid.dt == 0.25
    np.testing.assert_allclose(grid.times, [0.0, 0.25, 0.5, 0.75, 1.0])
    assert grid.times[-1] == 1.0

    with pytest.raises(ValueError):
        TimeGrid(1.0, 1.0, 4)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 1.0, 0)
    with pytest.raises(ValueError):
        TimeGrid(0.0, np.inf, 4)
    print("✓ Time grid validated")


def test_streams_are_reproducible_and_distinct():
    a = RngStream(42, 3).generator().standard_normal(5)
    b = RngStream(42, 3).generator().standard_normal(5)
    other_path = RngStream(42, 4).generator().standard_normal(5)
    other_channel = RngStream(42, 3).with_channel(1).generator().standard_normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, other_path)
    assert not np.allclose(a, other_channel)


def test_wiener_increments_have_variance_dt():
    grid = TimeGrid(0.0, 2.0, 4000)
    dW = sample_wiener_increments(grid, 2, RngStream(1, 0))
    assert dW.shape == (4000, 2)
    # sample variance of 4000 normals is within 10% with overwhelming probability
    np.testing.assert_allclose(dW.var(axis=0), grid.dt, rtol=0.1)

    with pytest.raises(ValueError):
        sample_wiener_increments(grid, 0, RngStream(1, 0))


def test_besq_transition_is_exact_at_zero_noise():
    z = np.array([2.0, 0.5])
    out = besq_transition(z, 4.0, 0.5, np.zeros(2), np.zeros(2))
    np.testing.assert_allclose(out, z)


def test_besq_exact_step_mean():
    """E[Z_{s+ds} | Z_s = z] = z + dim * ds."""
    draws = np.array([besq_exact_step(1.0, 4.0, 0.1, RngStream(7, k)) for k in range(4000)])
    assert np.all(draws > 0)
    # Var = 2 dim ds^2 + 4 z ds = 0.48, so 0.05 is about 4.5 standard errors
    assert abs(draws.mean() - 1.4) < 0.05
    assert besq_exact_step(1.0, 4.0, 0.1, RngStream(7, 0)) == draws[0]

    with pytest.raises(ValueError):
        besq_exact_step(1.0, 2.0, 0.1, RngStream(7, 0))
    with pytest.raises(ValueError):
        besq_exact_step(-1.0, 4.0, 0.1, RngStream(7, 0))
    with pytest.raises(ValueError):
        besq_exact_step(1.0, 4.0, 0.0, RngStream(7, 0))
    print("✓ Exact BESQ step mean matches z + dim ds")


def _fine_euler_besq(z0, dim, ds, n_paths, n_substeps, stream):
    """BESQ^dim over ds by full-truncation Euler: dZ = dim ds + 2 sqrt(Z) dW."""
    rng = stream.generator()
    h = ds / n_substeps
    z = np.full((n_paths, 1), z0)
    for _ in range(n_substeps):
        positive = truncated(z, [True])
        drift = np.full_like(z, dim)
        diffusion = 2.0 * np.sqrt(positive)[..., None]
        z = euler_step_full_truncation(z, drift, diffusion, np.sqrt(h) * rng.standard_normal((n_paths, 1)), h,
                                       nonnegative=[True])
    return z[:, 0]


def test_besq_transition_matches_fine_euler_law():
    """Exact transition and a 400-substep Euler scheme agree in law (two-sample KS at 10^5 draws)."""
    n, z0, dim, ds = 100_000, 1.0, 4.0, 0.1
    rng = RngStream(31, 0).generator()
    exact = besq_transition(np.full(n, z0), dim, ds, rng.standard_normal(n), rng.chisquare(dim - 1, n))
    fine = _fine_euler_besq(z0, dim, ds, n, 400, RngStream(31, 1))
    ks = stats.ks_2samp(exact, fine).statistic
    # 0.012 is about 2.7 / sqrt(n / 2)
    assert ks < 0.012

    # a single Euler step misses the skew of the law and is rejected
    coarse = _fine_euler_besq(z0, dim, ds, n, 1, RngStream(31, 2))
    assert stats.ks_2samp(exact, coarse).statistic > 0.02
    print(f"✓ KS(exact, fine Euler) = {ks:.4f} at 10^5 draws")


def test_euler_full_truncation_clips_nonnegative_components():
    state = np.array([[0.1, -1.0]])
    drift = np.array([[-1.0, -1.0]])
    diffusion = np.zeros((1, 2, 1))
    out = euler_step_full_truncation(state, drift, diffusion, np.zeros((1, 1)), 1.0, nonnegative=[True, False])
    np.testing.assert_allclose(out, [[0.0, -2.0]])
    np.testing.assert_allclose(truncated(np.array([-0.5, -0.5]), [True, False]), [0.0, -0.5])

    with pytest.raises(ValueError):
        euler_step_full_truncation(state, drift, diffusion, np.zeros((1, 1)), 0.0)
    with pytest.raises(ValueError):
        euler_step_full_truncation(state, drift[:, :1], diffusion, np.zeros((1, 1)), 1.0)


def test_euler_step_applies_diffusion():
    state = np.array([1.0])
    out = euler_step_full_truncation(state, np.array([0.5]), np.array([[2.0, 1.0]]), np.array([0.1, -0.3]), 0.2)
    assert out[0] == pytest.approx(1.0 + 0.1 + 0.2 - 0.3)


def test_path_bundle_checks_shapes():
    grid = TimeGrid(0.0, 1.0, 3)
    bundle = PathBundle(grid, {'Z': np.ones((5, 4))}, {'dW': np.zeros((5, 3))})
    assert bundle.n_paths == 5
    assert 'Z' in bundle and 'dW' in bundle
    with pytest.raises(KeyError):
        bundle['missing']
    with pytest.raises(ValueError):
        PathBundle(grid, {'Z': np.ones((5, 3))})
    with pytest.raises(ValueError):
        PathBundle(grid, {'Z': -np.ones((5, 4))})

    extended = bundle.with_channels({'X': np.zeros((5, 4))}, tag='test')
    assert 'X' in extended and 'X' not in bundle
    assert extended.meta['tag'] == 'test'

    summary = bundle.node_summary(['Z'])
    assert list(summary.columns) == ['t', 'quantity', 'estimate', 'stderr']
    assert (summary['estimate'] == 1.0).all() and (summary['stderr'] == 0.0).all()


def test_cumulate():
    out = cumulate(np.array([[1.0, 2.0, 3.0]]), start=1.0)
    np.testing.assert_allclose(out, [[1.0, 2.0, 4.0, 7.0]])


def test_blocks_preserve_order():
    blocks = path_blocks(10, block_size=4)
    assert [list(b) for b in blocks] == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9]]
    with pytest.raises(ValueError):
        path_blocks(0)

    tasks = [(b.start, b.stop) for b in blocks]
    assert sum(run_blocks(_square_block, tasks, n_workers=1), []) == [k * k for k in range(10)]
