"""
Bench Hedge - Minimal Market Models

Simulators for the minimal market model with random scaling (Euler, full
truncation) and the stylized minimal market model (exact squared-Bessel
steps in the clock s(t) = alpha0/(4 beta) (e^{beta t} - 1)), plus the
benchmarked primary security accounts and the (W, W_perp) driver pair.

Channel conventions (all on the PathBundle):
    Z, gamma, alpha        squared Bessel state, scaling, NP drift
    discounted_np          S_bar = Z^{(delta-2)/2}
    s_hat_0                benchmarked savings account 1 / S_bar
    theta_1, theta_2       market price of risk at each node
    theta_abs              |theta| = sqrt(alpha / S_bar)
    dW1, dW2 (increments)  asset drivers
    dW, dW_perp            rotated drivers (after orthogonal_drivers)
    s_hat_1, s_hat_2       benchmarked primary accounts
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

from sim.errors import BoundaryHitError, DegenerateDriverError, SingularVolatilityError
from sim.stochastic_core import (
    PathBundle,
    RngStream,
    TimeGrid,
    besq_transition,
    cumulate,
    euler_step_full_truncation,
    path_blocks,
    run_blocks,
    truncated,
)

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12

# Named defaults for the two-asset test configuration
DEFAULT_APPRECIATION = (0.07, 0.06)
DEFAULT_VOLS = ((0.2, 0.0), (0.1, 0.3))
DEFAULT_S0 = (1.0, 1.0)


@dataclass(frozen=True)
class GammaDynamics:
    """
    Coefficients a(t, gamma) and b(t, gamma) of the scaling process.

    kind:
        'constant'  a = 0, b = 0
        'cir'       a = kappa (theta - gamma), b = sigma sqrt(gamma)
        'linear'    a = kappa (theta - gamma), b = sigma gamma

    Instances are picklable, so bound methods can cross process boundaries.
    """
    kind: str = 'constant'
    kappa: float = 0.0
    theta: float = 0.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in ('constant', 'cir', 'linear'):
            raise ValueError(f"unknown gamma dynamics '{self.kind}'")

    def drift(self, t: float, gamma: np.ndarray) -> np.ndarray:
        if self.kind == 'constant':
            return np.zeros_like(gamma)
        return self.kappa * (self.theta - gamma)

    def diffusion(self, t: float, gamma: np.ndarray) -> np.ndarray:
        if self.kind == 'constant':
            return np.zeros_like(gamma)
        if self.kind == 'cir':
            return self.sigma * np.sqrt(np.maximum(gamma, 0.0))
        return self.sigma * gamma


@dataclass(frozen=True)
class AssetParams:
    """Constant appreciation a^j, volatility rows b^{j,k} and initial values S^j_0."""
    appreciation: Tuple[float, float] = DEFAULT_APPRECIATION
    vols: Tuple[Tuple[float, float], Tuple[float, float]] = DEFAULT_VOLS
    s0: Tuple[float, float] = DEFAULT_S0

    def __post_init__(self):
        if np.asarray(self.vols, dtype=float).shape != (2, 2):
            raise ValueError("asset_vols must be a 2x2 matrix")
        if len(self.appreciation) != 2 or len(self.s0) != 2:
            raise ValueError("asset_appreciation and s0_j need two entries")
        if any(s <= 0 for s in self.s0):
            raise ValueError(f"initial asset values must be positive, got {self.s0}")

    @property
    def vol_matrix(self) -> np.ndarray:
        return np.asarray(self.vols, dtype=float)


@dataclass(frozen=True)
class MmmRandomScalingParams:
    """Minimal market model with random scaling; delta is the Bessel dimension."""
    bessel_dim: float
    z0: float
    gamma0: float
    gamma_drift: Callable = field(default=GammaDynamics().drift)
    gamma_diffusion: Callable = field(default=GammaDynamics().diffusion)
    rho: float = 0.0
    r: float = 0.0
    asset_appreciation: Tuple[float, float] = DEFAULT_APPRECIATION
    asset_vols: Tuple[Tuple[float, float], Tuple[float, float]] = DEFAULT_VOLS
    s0_j: Tuple[float, float] = DEFAULT_S0

    def __post_init__(self):
        if not self.bessel_dim > 2:
            raise ValueError(f"bessel_dim must exceed 2, got {self.bessel_dim}")
        if not self.z0 > 0:
            raise ValueError(f"z0 must be positive, got {self.z0}")
        # gamma0 = 0 with constant dynamics is the degenerate (frozen Z) configuration
        if self.gamma0 < 0:
            raise ValueError(f"gamma0 must be >= 0, got {self.gamma0}")
        if abs(self.rho) > 1:
            raise ValueError(f"rho must lie in [-1, 1], got {self.rho}")
        if self.r < 0:
            raise ValueError(f"r must be nonnegative, got {self.r}")

    @property
    def assets(self) -> AssetParams:
        return AssetParams(tuple(self.asset_appreciation), tuple(map(tuple, self.asset_vols)), tuple(self.s0_j))


@dataclass(frozen=True)
class StylizedMmmParams:
    """Stylized MMM: delta = 4, alpha_t = alpha0 exp(beta t)."""
    alpha0: float
    beta: float
    r: float = 0.0
    z0: float = 1.0
    asset_appreciation: Optional[Tuple[float, float]] = None
    asset_vols: Optional[Tuple[Tuple[float, float], Tuple[float, float]]] = None
    s0_j: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if not self.alpha0 > 0:
            raise ValueError(f"alpha0 must be positive, got {self.alpha0}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.r < 0:
            raise ValueError(f"r must be nonnegative, got {self.r}")
        if not self.z0 > 0:
            raise ValueError(f"z0 must be positive, got {self.z0}")

    @property
    def bessel_dim(self) -> float:
        return 4.0

    @property
    def assets(self) -> AssetParams:
        return AssetParams(
            tuple(self.asset_appreciation or DEFAULT_APPRECIATION),
            tuple(map(tuple, self.asset_vols or DEFAULT_VOLS)),
            tuple(self.s0_j or DEFAULT_S0),
        )

    def alpha(self, t):
        return self.alpha0 * np.exp(self.beta * np.asarray(t, dtype=float))

    def clock(self, t):
        """s(t) = (1/4) int_0^t alpha_u du."""
        return self.alpha0 / (4.0 * self.beta) * np.expm1(self.beta * np.asarray(t, dtype=float))

    def f(self, t, T: float):
        """f(t) = 2 beta / (alpha0 (e^{beta T} - e^{beta t})) = 1 / (2 (s(T) - s(t)))."""
        t = np.asarray(t, dtype=float)
        with np.errstate(divide='ignore'):
            return 2.0 * self.beta / (self.alpha0 * (np.exp(self.beta * T) - np.exp(self.beta * t)))


@dataclass
class MarketPriceOfRisk:
    """theta per path and node, shape (n_paths, n_nodes, 2), and its norm."""
    theta: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return np.linalg.norm(self.theta, axis=-1)


def market_price_of_risk(vol_matrix, appreciation, r: float) -> np.ndarray:
    """
    Solve b theta = a - r 1.

    Raises:
        SingularVolatilityError: If b is singular or its condition number exceeds 1e12

    Example:
        >>> market_price_of_risk([[0.2, 0.0], [0.1, 0.3]], [0.04, 0.05], 0.0)
        array([0.2, 0.1])
    """
    b = np.asarray(vol_matrix, dtype=float)
    excess = np.asarray(appreciation, dtype=float) - r
    if b.shape != (2, 2) or excess.shape != (2,):
        raise ValueError(f"expected a 2x2 volatility matrix and a 2-vector, got {b.shape} and {excess.shape}")
    cond = np.linalg.cond(b)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise SingularVolatilityError(f"volatility matrix condition number {cond:.3e} exceeds {CONDITION_LIMIT:.0e}")
    return np.linalg.solve(b, excess)


def theta_direction(assets: AssetParams, r: float) -> np.ndarray:
    """Unit vector e = theta / |theta| implied by the asset coefficients."""
    theta = market_price_of_risk(assets.vol_matrix, assets.appreciation, r)
    norm = np.linalg.norm(theta)
    if norm == 0:
        raise DegenerateDriverError("asset appreciation equals r: market price of risk has no direction")
    return theta / norm


def _rotate_to_asset_drivers(dW: np.ndarray, dW_perp: np.ndarray, direction: np.ndarray):
    """dW1 = e1 dW + e2 dW_perp, dW2 = e2 dW - e1 dW_perp (inverse of orthogonal_drivers)."""
    e1, e2 = direction
    return e1 * dW + e2 * dW_perp, e2 * dW - e1 * dW_perp


def _theta_channels(alpha: np.ndarray, discounted_np: np.ndarray, direction: np.ndarray) -> dict:
    with np.errstate(divide='ignore', invalid='ignore'):
        total = np.sqrt(np.where(discounted_np > 0, alpha / discounted_np, 0.0))
    return {'theta_1': total * direction[0], 'theta_2': total * direction[1], 'theta_abs': total}


def _random_scaling_block(task: tuple) -> dict:
    """Top-level worker: simulate one block of random-scaling paths."""
    params, grid, seed, paths = task
    n, n_steps, dt = len(paths), grid.n_steps, grid.dt
    draws = np.stack([RngStream(seed, p).generator().standard_normal((n_steps, 3)) for p in paths])
    dW, dW_tilde, dW_perp = (np.sqrt(dt) * draws[:, :, k] for k in range(3))

    delta, rho = params.bessel_dim, params.rho
    state = np.empty((n, n_steps + 1, 2))
    state[:, 0] = (params.z0, params.gamma0)
    nonneg = (True, True)
    times = grid.times
    for i in range(n_steps):
        zt, gt = truncated(state[:, i], nonneg).T
        drift = np.stack([0.25 * delta * gt, params.gamma_drift(times[i], gt)], axis=-1)
        b = params.gamma_diffusion(times[i], gt)
        diffusion = np.zeros((n, 2, 2))
        diffusion[:, 0, 0] = np.sqrt(gt * zt)
        diffusion[:, 1, 0] = b * rho
        diffusion[:, 1, 1] = b * np.sqrt(1.0 - rho ** 2)
        state[:, i + 1] = euler_step_full_truncation(
            state[:, i], drift, diffusion, np.stack([dW[:, i], dW_tilde[:, i]], axis=-1), dt, nonneg
        )
        if np.any(state[:, i + 1, 0] <= 0):
            raise BoundaryHitError(f"Euler scheme drove Z to zero at node {i + 1}; refine the grid")
    return {'Z': state[:, :, 0], 'gamma': state[:, :, 1], 'dW': dW, 'dW_tilde': dW_tilde, 'dW_perp': dW_perp}


def simulate_random_scaling_mmm(
    params: MmmRandomScalingParams,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    n_workers: int = 1,
) -> PathBundle:
    """
    Simulate the MMM with random scaling.

    Z and gamma are stepped jointly by Euler with full truncation; S_bar,
    s_hat_0 and alpha are algebraic functions of (Z, gamma) at every node.

    Args:
        params: Model parameters
        grid: Time grid
        n_paths: Number of paths
        seed: Master seed; path p uses stream (seed, p)
        n_workers: Worker processes (results do not depend on it)

    Returns:
        PathBundle with Z, gamma, alpha, discounted_np, s_hat_0, theta, W,
        W_tilde channels and dW, dW_tilde, dW1, dW2 increments

    Raises:
        BoundaryHitError: If the scheme reaches Z = 0
    """
    tasks = [(params, grid, seed, block) for block in path_blocks(n_paths)]
    blocks = run_blocks(_random_scaling_block, tasks, n_workers)
    merged = {key: np.concatenate([b[key] for b in blocks]) for key in blocks[0]}

    delta = params.bessel_dim
    Z, gamma = merged['Z'], merged['gamma']
    alpha = (0.5 * delta - 1.0) ** 2 * gamma * Z ** (0.5 * (delta - 4.0))
    discounted_np = Z ** (0.5 * (delta - 2.0))
    s_hat_0 = 1.0 / discounted_np

    assets = params.assets
    direction = theta_direction(assets, params.r)
    dW1, dW2 = _rotate_to_asset_drivers(merged['dW'], merged['dW_perp'], direction)

    channels = {
        'Z': Z,
        'gamma': gamma,
        'alpha': alpha,
        'discounted_np': discounted_np,
        's_hat_0': s_hat_0,
        'W': cumulate(merged['dW']),
        'W_tilde': cumulate(merged['dW_tilde']),
        **_theta_channels(alpha, discounted_np, direction),
    }
    logger.info("simulated %d random-scaling MMM paths over %d steps", n_paths, grid.n_steps)
    return PathBundle(
        grid,
        channels,
        {'dW': merged['dW'], 'dW_tilde': merged['dW_tilde'], 'dW1': dW1, 'dW2': dW2},
        {'model': 'random_scaling', 'seed': seed, 'bessel_dim': delta, 'r': params.r,
         'vol_condition_number': float(np.linalg.cond(assets.vol_matrix))},
    )


def _stylized_block(task: tuple) -> dict:
    """Top-level worker: exact BESQ^4 paths for one block."""
    params, grid, seed, paths = task
    n_steps = grid.n_steps
    normals = np.empty((len(paths), n_steps))
    chi2_rest = np.empty((len(paths), n_steps))
    perp = np.empty((len(paths), n_steps))
    for row, p in enumerate(paths):
        rng = RngStream(seed, p).generator()
        normals[row] = rng.standard_normal(n_steps)
        chi2_rest[row] = rng.chisquare(3.0, n_steps)
        perp[row] = rng.standard_normal(n_steps)

    clock = params.clock(grid.times)
    ds = np.diff(clock)
    Z = np.empty((len(paths), n_steps + 1))
    Z[:, 0] = params.z0
    for i in range(n_steps):
        Z[:, i + 1] = besq_transition(Z[:, i], 4.0, ds[i], normals[:, i], chi2_rest[:, i])

    # exact conditional standardisation of the BESQ^4 increment
    dZ = np.diff(Z, axis=1)
    scale = np.sqrt(4.0 * ds * Z[:, :-1] + 8.0 * ds ** 2)
    dW = (dZ - 4.0 * ds) / scale * np.sqrt(grid.dt)
    return {'Z': Z, 'dW': dW, 'dW_perp': np.sqrt(grid.dt) * perp}


def simulate_stylized_mmm(
    params: StylizedMmmParams,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    n_workers: int = 1,
) -> PathBundle:
    """
    Simulate the stylized MMM with exact squared-Bessel transitions.

    Z is BESQ^4 in the clock s(t); S_bar = Z, s_hat_0 = 1 / Z, gamma = alpha.
    W is reconstructed from the Z increments, W_perp is an independent stream
    of the same path.

    Example:
        >>> params = StylizedMmmParams(alpha0=0.05, beta=0.05)
        >>> paths = simulate_stylized_mmm(params, TimeGrid(0.0, 10.0, 20), 1000, seed=42)
        >>> paths['Z'].shape
        (1000, 21)
    """
    tasks = [(params, grid, seed, block) for block in path_blocks(n_paths)]
    blocks = run_blocks(_stylized_block, tasks, n_workers)
    Z = np.concatenate([b['Z'] for b in blocks])
    dW = np.concatenate([b['dW'] for b in blocks])
    dW_perp = np.concatenate([b['dW_perp'] for b in blocks])

    alpha = np.broadcast_to(params.alpha(grid.times), Z.shape).copy()
    assets = params.assets
    direction = theta_direction(assets, params.r)
    dW1, dW2 = _rotate_to_asset_drivers(dW, dW_perp, direction)

    channels = {
        'Z': Z,
        'gamma': alpha.copy(),
        'alpha': alpha,
        'discounted_np': Z,
        's_hat_0': 1.0 / Z,
        'W': cumulate(dW),
        **_theta_channels(alpha, Z, direction),
    }
    logger.info("simulated %d stylized MMM paths over %d steps", n_paths, grid.n_steps)
    return PathBundle(
        grid,
        channels,
        {'dW': dW, 'dW1': dW1, 'dW2': dW2},
        {'model': 'stylized', 'seed': seed, 'bessel_dim': 4.0, 'r': params.r,
         'vol_condition_number': float(np.linalg.cond(assets.vol_matrix))},
    )


def simulate_primary_accounts(paths: PathBundle, params) -> PathBundle:
    """
    Add benchmarked primary accounts s_hat_1, s_hat_2.

    dS_hat^j = S_hat^j (b^j - theta) . dW_vec, integrated by the log-Euler
    scheme with coefficients at the left node, so each step is an exact
    conditional martingale step and values stay positive.

    Args:
        paths: Bundle with theta_1, theta_2 channels and dW1, dW2 increments
        params: Any parameter object exposing .assets and .r

    Raises:
        ValueError: If required channels are missing
    """
    for name in ('theta_1', 'theta_2', 'dW1', 'dW2', 's_hat_0'):
        if name not in paths:
            raise ValueError(f"simulate_primary_accounts needs channel '{name}'")
    assets = params.assets
    b = assets.vol_matrix
    dt = paths.grid.dt
    theta = np.stack([paths['theta_1'][:, :-1], paths['theta_2'][:, :-1]], axis=-1)
    dW_vec = np.stack([paths['dW1'], paths['dW2']], axis=-1)

    out = {}
    for j in range(2):
        v = b[j][None, None, :] - theta
        log_step = np.einsum('pik,pik->pi', v, dW_vec) - 0.5 * np.einsum('pik,pik->pi', v, v) * dt
        start = assets.s0[j] * np.exp(-params.r * paths.grid.t0) * paths['s_hat_0'][:, 0]
        out[f's_hat_{j + 1}'] = start[:, None] * np.exp(cumulate(log_step))
    return paths.with_channels(out)


def orthogonal_drivers(paths: PathBundle) -> PathBundle:
    """
    Rotate (dW1, dW2) into (dW, dW_perp) using theta at the left node of each step.

    dW = (theta_1 dW1 + theta_2 dW2) / |theta|
    dW_perp = (theta_2 dW1 - theta_1 dW2) / |theta|

    Raises:
        DegenerateDriverError: If |theta| = 0 at a node that starts a step
    """
    theta_1 = paths['theta_1'][:, :-1]
    theta_2 = paths['theta_2'][:, :-1]
    total = np.hypot(theta_1, theta_2)
    zero = total == 0
    if np.any(zero):
        node = int(np.argwhere(zero)[0][1])
        raise DegenerateDriverError(f"|theta| = 0 at node {node}: W and W_perp are undefined there", node=node)
    e1, e2 = theta_1 / total, theta_2 / total
    det = -(e1 ** 2 + e2 ** 2)
    if np.max(np.abs(np.abs(det) - 1.0)) > 1e-12:
        raise DegenerateDriverError("rotation is not orthonormal")
    dW1, dW2 = paths['dW1'], paths['dW2']
    dW = e1 * dW1 + e2 * dW2
    dW_perp = e2 * dW1 - e1 * dW2
    return paths.with_channels(
        {'W': cumulate(dW), 'W_perp': cumulate(dW_perp)},
        {'dW': dW, 'dW_perp': dW_perp},
    )


def attach_asset_drivers(paths: PathBundle, params) -> PathBundle:
    """
    Build (dW1, dW2) from (dW, dW_perp) for the fixed theta direction of params.

    Inverse of orthogonal_drivers when theta keeps its direction along the path.
    """
    for name in ('dW', 'dW_perp'):
        if name not in paths:
            raise ValueError(f"attach_asset_drivers needs increment '{name}'")
    direction = theta_direction(params.assets, params.r)
    dW1, dW2 = _rotate_to_asset_drivers(paths['dW'], paths['dW_perp'], direction)
    return paths.with_channels(increments={'dW1': dW1, 'dW2': dW2})
