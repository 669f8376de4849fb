"""
Bench Hedge - Benchmarked Risk-Minimizing Strategies

Explicit strategies in the minimal market model (eta on the bond, nu on the
unhedgeable driver W_perp), the defaultable-put strategy, cost processes
under both numeraires, and the least-squares Monte Carlo GKW decomposition
used when no closed form exists.

Every strategy is evaluated at the left node of each step, so holdings for
step i only see node values up to index i.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from sim.errors import DegenerateDriverError, NumericalError
from sim.models import StylizedMmmParams, orthogonal_drivers, simulate_primary_accounts, simulate_stylized_mmm
from sim.pricing import (
    RIDGE,
    DefaultModel,
    DefaultSample,
    PsiPath,
    attach_bond_channel,
    least_squares,
    polynomial_basis,
    put_price,
    put_price_from_bond,
    zcb_benchmarked,
)
from sim.stochastic_core import PathBundle, TimeGrid, cumulate

logger = logging.getLogger(__name__)

RICHARDSON_TOLERANCE = 1e-6
EIGEN_FLOOR = 1e-10
N_PERTURBATIONS = 20


# ==========================================
# CONTAINERS
# ==========================================

def _stack_instruments(values) -> np.ndarray:
    """(n_paths, n, m) view of one or several instrument channels."""
    values = np.asarray(values)
    return values[..., None] if values.ndim == 2 else values


@dataclass
class Strategy:
    """
    Predictable holdings, shape (n_paths, n_steps, n_instruments).

    holdings[:, i] is the position carried over step i, computed from node i.
    """
    holdings: np.ndarray
    instruments: Tuple[str, ...]

    def __post_init__(self):
        self.holdings = _stack_instruments(self.holdings)
        self.instruments = tuple(self.instruments)
        if self.holdings.ndim != 3:
            raise ValueError(f"holdings must be (n_paths, n_steps, n_instruments), got {self.holdings.shape}")
        if self.holdings.shape[-1] != len(self.instruments):
            raise ValueError(f"{self.holdings.shape[-1]} holding columns for instruments {self.instruments}")

    @property
    def n_steps(self) -> int:
        return self.holdings.shape[1]

    def gains(self, increments) -> np.ndarray:
        """Per-step trading gains sum_j holdings_j * dX_j, (n_paths, n_steps)."""
        increments = _stack_instruments(increments)
        if increments.shape != self.holdings.shape:
            raise ValueError(f"increments {increments.shape} do not match holdings {self.holdings.shape}")
        return (self.holdings * increments).sum(axis=-1)


@dataclass
class CostProcess:
    """C_hat_t per path and node, and the empirical risk R_hat_0 = E[(C_T - C_0)^2]."""
    cost: np.ndarray
    risk0: float
    risk0_stderr: float

    @classmethod
    def from_path(cls, cost: np.ndarray) -> 'CostProcess':
        remaining = (cost[:, -1] - cost[:, 0]) ** 2
        n = remaining.size
        stderr = float(remaining.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        return cls(cost, float(remaining.mean()), stderr)

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.cost, axis=1)

    def drift_zscores(self) -> np.ndarray:
        """Cross-path mean increment over its standard error, per step (0 where the increment is constant)."""
        inc = self.increments
        mean = inc.mean(axis=0)
        stderr = inc.std(axis=0, ddof=1) / np.sqrt(inc.shape[0])
        with np.errstate(divide='ignore', invalid='ignore'):
            return np.where(stderr > 0, mean / stderr, 0.0)


@dataclass
class DecompositionResult:
    """
    H_hat = h0 + sum integrand . dX + residual_terminal, path by path.

    residual_path holds L_t with L_0 = 0 and L_T = residual_terminal; gains is
    the per-path stochastic integral so the hedgeable part can be split off.
    """
    h0: float
    integrand: Strategy
    residual_terminal: np.ndarray
    residual_path: np.ndarray
    gains: np.ndarray
    value_path: Optional[np.ndarray] = None
    diagnostics: Dict[str, object] = field(default_factory=dict)

    def identity_residual(self, payoff) -> float:
        """Max |H - h0 - gains - L_T| over paths."""
        gap = np.asarray(payoff) - self.h0 - self.gains - self.residual_terminal
        return float(np.max(np.abs(gap)))


def split_hedgeable(decomposition: DecompositionResult) -> Tuple[np.ndarray, np.ndarray]:
    """
    Hedgeable part h0 + int xi dX and unhedgeable part L_T, per path.

    Example:
        >>> hedgeable, unhedgeable = split_hedgeable(result)
        >>> # hedgeable + unhedgeable reproduces the payoff
    """
    hedgeable = decomposition.h0 + decomposition.gains
    return hedgeable, np.asarray(decomposition.residual_terminal)


def cost_process(strategy: Strategy, instruments, value_path) -> CostProcess:
    """
    C_hat_t = V_hat_t - sum_{k<t} holdings_k . (X_hat_{k+1} - X_hat_k).

    Args:
        strategy: Holdings, one entry per step
        instruments: (n_paths, n_steps + 1[, m]) benchmarked instrument paths
        value_path: (n_paths, n_steps + 1) benchmarked value of the position

    Raises:
        ValueError: On misaligned shapes (holdings must have exactly one entry per step)
    """
    X = _stack_instruments(instruments)
    V = np.asarray(value_path, dtype=float)
    n_paths, n_steps, m = strategy.holdings.shape
    if X.shape != (n_paths, n_steps + 1, m):
        raise ValueError(f"instrument paths {X.shape} do not fit holdings {strategy.holdings.shape}: "
                         f"holdings need one entry per step, evaluated at the left node")
    if V.shape != (n_paths, n_steps + 1):
        raise ValueError(f"value path has shape {V.shape}, expected {(n_paths, n_steps + 1)}")
    return CostProcess.from_path(V - cumulate(strategy.gains(np.diff(X, axis=1))))


def numeraire_costs(strategy: Strategy, instruments_hat, value_hat, s_hat_0) -> Tuple[CostProcess, CostProcess]:
    """
    Cost of one strategy under the numeraire portfolio (C_hat) and the savings account (C_bar).

    The numeraire-portfolio position is the balance V_hat_i - holdings . X_hat_i
    at the left node, so the strategy is the same in both units and
    dC_hat = S_hat0_i dC_bar + dC_bar dS_hat0 holds step by step.
    """
    X = _stack_instruments(instruments_hat).astype(float)
    V = np.asarray(value_hat, dtype=float)
    s0 = np.asarray(s_hat_0, dtype=float)
    if s0.shape != V.shape:
        raise ValueError(f"s_hat_0 path {s0.shape} does not match value path {V.shape}")
    if np.any(s0 <= 0):
        raise ValueError("s_hat_0 must be positive along every path")
    c_hat = cost_process(strategy, X, V)

    balance = V[:, :-1] - (strategy.holdings * X[:, :-1]).sum(axis=-1)
    X_bar = X / s0[..., None]
    gains_bar = strategy.gains(np.diff(X_bar, axis=1)) + balance * np.diff(1.0 / s0, axis=1)
    c_bar = CostProcess.from_path(V / s0 - cumulate(gains_bar))
    return c_hat, c_bar


def conditional_risk(cost: CostProcess, state, t_index: int, degree: int = 3) -> Tuple[np.ndarray, float]:
    """
    R_hat_t = E[(C_T - C_t)^2 | F_t] by regression on the state at t_index.

    Descriptive only; returns the fitted values and the regression standard error.
    """
    remaining = (cost.cost[:, -1] - cost.cost[:, t_index]) ** 2
    basis = polynomial_basis(state, degree)
    coef, _, _ = least_squares(basis, remaining)
    fitted = basis @ coef
    n = remaining.size
    return fitted, float((remaining - fitted).std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0


# ==========================================
# EXPLICIT STRATEGIES
# ==========================================

def _first_node(mask: np.ndarray) -> int:
    hit = np.argwhere(np.atleast_1d(mask))[0]
    return int(hit[-1])


def psi_integrand_stylized(t, s_hat_0, params: StylizedMmmParams, T: float):
    """
    Bond volatility psi_t in dP_hat(t,T) = psi_t dW_t under the stylized MMM.

        psi = -P_hat S_hat0 (1 - x / (e^x - 1)) sqrt(alpha_t / S_hat0),  x = f(t) / S_hat0

    Args:
        t: Time(s) before maturity
        s_hat_0: Benchmarked savings account at t (> 0)
        params: Stylized model parameters
        T: Bond maturity

    Raises:
        ValueError: If t >= T or s_hat_0 <= 0
    """
    t = np.asarray(t, dtype=float)
    s = np.asarray(s_hat_0, dtype=float)
    if np.any(t >= T):
        raise ValueError(f"psi is defined before maturity T={T}")
    if np.any(s <= 0):
        raise ValueError("s_hat_0 must be positive")
    x = params.f(t, T) / s
    with np.errstate(over='ignore'):
        ratio = x / np.expm1(x)
    value = -zcb_benchmarked(t, s, params, T) * s * (1.0 - ratio) * np.sqrt(params.alpha(t) / s)
    return float(value) if value.ndim == 0 else value


def _theta_norm(theta: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(theta, axis=-1)
    if np.any(norm == 0):
        node = _first_node(norm == 0)
        raise DegenerateDriverError(f"|theta| = 0 at node {node}", node=node)
    return norm


def eta_strategy(s_hat_j, theta, vol_row, psi):
    """
    Units of the bond held against asset j.

        eta = (S_hat^j / psi) (theta . b^j / |theta| - |theta|)

    Args:
        s_hat_j: Benchmarked asset value(s)
        theta: Market price of risk, last axis of length 2
        vol_row: Volatility row (b^{j,1}, b^{j,2})
        psi: Bond volatility at the same node(s)

    Raises:
        DegenerateDriverError: If psi or |theta| vanishes; the node is the last-axis index

    Example:
        >>> round(eta_strategy(1.0, [0.2, 0.0], [0.1, 0.3], -0.5), 12)
        0.2
    """
    theta = np.asarray(theta, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if np.any(psi == 0):
        node = _first_node(psi == 0)
        raise DegenerateDriverError(f"psi = 0 at node {node}: bond carries no W exposure", node=node)
    norm = _theta_norm(theta)
    projected = theta @ np.asarray(vol_row, dtype=float) / norm
    value = np.asarray(s_hat_j, dtype=float) / psi * (projected - norm)
    return float(value) if value.ndim == 0 else value


def nu_residual(s_hat_j, theta, vol_row):
    """
    Exposure of asset j to the unhedgeable driver W_perp.

        nu = (S_hat^j / |theta|) (theta_2 b^{j,1} - theta_1 b^{j,2})

    Example:
        >>> round(nu_residual(1.0, [0.2, 0.0], [0.1, 0.3]), 12)
        -0.3
    """
    theta = np.asarray(theta, dtype=float)
    b = np.asarray(vol_row, dtype=float)
    norm = _theta_norm(theta)
    value = np.asarray(s_hat_j, dtype=float) / norm * (theta[..., 1] * b[0] - theta[..., 0] * b[1])
    return float(value) if value.ndim == 0 else value


def eta_strategy_stylized(s_hat_j, theta, vol_row, t, s_hat_0, params: StylizedMmmParams, T: float):
    """
    eta with psi substituted in closed form:

        eta = S_hat^j (|theta|^2 - theta . b^j) / (alpha_t P_hat(t,T) S_hat0 (1 - x / (e^x - 1)))
    """
    theta = np.asarray(theta, dtype=float)
    t = np.asarray(t, dtype=float)
    s = np.asarray(s_hat_0, dtype=float)
    if np.any(t >= T):
        raise ValueError(f"eta is defined before maturity T={T}")
    x = params.f(t, T) / s
    with np.errstate(over='ignore'):
        bracket = s * (1.0 - x / np.expm1(x))
    denominator = params.alpha(t) * zcb_benchmarked(t, s, params, T) * bracket
    if np.any(denominator == 0):
        node = _first_node(denominator == 0)
        raise DegenerateDriverError(f"psi = 0 at node {node}", node=node)
    excess = np.sum(theta * theta, axis=-1) - theta @ np.asarray(vol_row, dtype=float)
    value = np.asarray(s_hat_j, dtype=float) * excess / denominator
    return float(value) if value.ndim == 0 else value


@dataclass
class AssetHedge:
    """Risk-minimizing hedge of one benchmarked primary account along simulated paths."""
    asset: str
    eta: np.ndarray
    nu: np.ndarray
    psi: np.ndarray
    h0: float
    replication: np.ndarray
    replication_error: np.ndarray
    strategy: Strategy
    cost_hat: CostProcess
    cost_bar: CostProcess

    @property
    def rms_error(self) -> float:
        return float(np.sqrt(np.mean(self.replication_error ** 2)))


def stylized_asset_hedge(paths: PathBundle, params: StylizedMmmParams, asset_index: int = 1,
                         T: Optional[float] = None) -> AssetHedge:
    """
    Hedge S_hat^j with the bond P_hat(., T), leaving nu dW_perp unhedged.

    Missing ingredients (primary accounts, W_perp, bond channel) are added to
    a copy of the bundle. Replication is h0 + sum eta dP_hat + sum nu dW_perp;
    costs are S_hat^j - sum eta dP_hat under both numeraires.
    """
    if asset_index not in (1, 2):
        raise ValueError(f"asset_index must be 1 or 2, got {asset_index}")
    T = paths.grid.T if T is None else T
    asset = f's_hat_{asset_index}'
    if asset not in paths:
        paths = simulate_primary_accounts(paths, params)
    if 'dW_perp' not in paths:
        paths = orthogonal_drivers(paths)
    if 'p_hat' not in paths or paths.meta.get('bond_maturity') != T:
        paths = attach_bond_channel(paths, params, T)

    t_left = paths.grid.times[None, :-1]
    s_j = paths[asset]
    theta = np.stack([paths['theta_1'][:, :-1], paths['theta_2'][:, :-1]], axis=-1)
    vol_row = params.assets.vol_matrix[asset_index - 1]

    psi = psi_integrand_stylized(t_left, paths['s_hat_0'][:, :-1], params, T)
    eta = eta_strategy(s_j[:, :-1], theta, vol_row, psi)
    nu = nu_residual(s_j[:, :-1], theta, vol_row)

    p_hat = paths['p_hat']
    h0 = float(s_j[:, 0].mean())
    strategy = Strategy(np.stack([eta, nu], axis=-1), ('p_hat', 'W_perp'))
    replication = h0 + cumulate(strategy.gains(np.stack([np.diff(p_hat, axis=1), paths['dW_perp']], axis=-1)))
    error = replication[:, -1] - s_j[:, -1]

    cost_hat, cost_bar = numeraire_costs(Strategy(eta, ('p_hat',)), p_hat, s_j, paths['s_hat_0'])
    logger.info("hedged %s on %d paths: replication RMS %.3e", asset, paths.n_paths, np.sqrt(np.mean(error ** 2)))
    return AssetHedge(asset, eta, nu, psi, h0, replication, error, strategy, cost_hat, cost_bar)


def replication_convergence(params: StylizedMmmParams, n_steps_list: Sequence[int], n_paths: int, seed: int,
                            T: float, asset_index: int = 1, n_workers: int = 1) -> Tuple[pd.DataFrame, float]:
    """
    Replication RMS error of the explicit hedge against dt, and the fitted log-log slope.

    Returns:
        (table with n_steps, dt, rms_error, rms_stderr; slope of log rms on log dt)
    """
    rows = []
    for n_steps in n_steps_list:
        grid = TimeGrid(0.0, T, int(n_steps))
        paths = simulate_stylized_mmm(params, grid, n_paths, seed, n_workers)
        hedge = stylized_asset_hedge(paths, params, asset_index, T)
        squared = hedge.replication_error ** 2
        rms = float(np.sqrt(squared.mean()))
        # delta method for sqrt of a mean
        stderr = float(squared.std(ddof=1) / np.sqrt(n_paths) / (2 * rms)) if rms > 0 else 0.0
        rows.append({'n_steps': int(n_steps), 'dt': grid.dt, 'rms_error': rms, 'rms_stderr': stderr})
        print(f"  ✓ n_steps={n_steps:5d}  dt={grid.dt:.4g}  RMS={rms:.4e}")
    table = pd.DataFrame(rows)
    slope = float(np.polyfit(np.log(table['dt']), np.log(table['rms_error']), 1)[0])
    return table, slope


# ==========================================
# DEFAULTABLE PUT
# ==========================================

def hedge_ratio_fd(price_fn: Callable, t: float, p_hat, rel_step: float = 1e-5):
    """
    Central finite difference of price_fn(t, p_hat) in the bond price.

    The derivative is taken with steps h and h/2; the two must agree within
    1e-6 relative to max(|ratio|, 1), otherwise the price is not smooth enough
    at that point.

    Raises:
        NumericalError: If the step underflows or the Richardson check fails
    """
    p = np.asarray(p_hat, dtype=float)
    step = rel_step * np.abs(p)
    if not rel_step > 0 or np.any(step < np.finfo(float).tiny) or np.any(p - step == p):
        raise NumericalError(f"finite-difference step underflows at P_hat={p} (rel_step={rel_step})")
    coarse = (np.asarray(price_fn(t, p + step)) - np.asarray(price_fn(t, p - step))) / (2.0 * step)
    fine = (np.asarray(price_fn(t, p + 0.5 * step)) - np.asarray(price_fn(t, p - 0.5 * step))) / step
    gap = np.abs(coarse - fine)
    if np.any(gap > RICHARDSON_TOLERANCE * np.maximum(np.abs(fine), 1.0)):
        raise NumericalError(f"hedge ratio unstable under step halving at t={t} (max gap {gap.max():.3e})")
    return float(fine) if fine.ndim == 0 else fine


def defaultable_hedge(psi_left_limit, hedge_ratio):
    """
    xi^{H,0}_t = Psi_{t-} * dp_hat/dP_hat; no position in the other primary accounts.

    Raises:
        ValueError: If Psi leaves [0, 1]
        NumericalError: If the hedge ratio is not finite
    """
    psi = np.asarray(psi_left_limit, dtype=float)
    ratio = np.asarray(hedge_ratio, dtype=float)
    if np.any(psi < 0) or np.any(psi > 1 + 1e-12):
        raise ValueError("Psi must lie in [0, 1]")
    if not np.all(np.isfinite(ratio)):
        raise NumericalError("hedge ratio is not bounded")
    value = psi * ratio
    return float(value) if value.ndim == 0 else value


@dataclass
class DefaultableHedge:
    """Bond hedge of the defaultable put and its cost bookkeeping."""
    xi: np.ndarray
    hedge_ratio: np.ndarray
    put: np.ndarray
    value: np.ndarray
    cost: CostProcess
    cost_identity_residual: float
    product_rule_residual: float


def defaultable_put_hedge(paths: PathBundle, default: DefaultSample, psi: PsiPath, model: DefaultModel,
                          params: StylizedMmmParams, K: float) -> DefaultableHedge:
    """
    Hedge U_hat = p_hat * Psi with the bond maturing with the put.

    Checks, path by path, that the cost equals
        U_hat_0 + sum p_hat_{k+1} dPsi + sum Psi_k (dp_hat - ratio_k dP_hat)
    and that dU_hat = p_hat_k dPsi + Psi_k dp_hat + dp_hat dPsi.
    """
    grid = paths.grid
    T = model.T
    if abs(grid.T - T) > 1e-12:
        raise ValueError(f"grid end {grid.T} differs from put maturity {T}")
    if 'p_hat' not in paths or paths.meta.get('bond_maturity') != T:
        paths = attach_bond_channel(paths, params, T)
    if psi.values.shape != (paths.n_paths, grid.n_steps + 1):
        raise ValueError(f"Psi path {psi.values.shape} does not match the bundle")
    times = grid.times
    s_hat_0 = paths['s_hat_0']
    p_hat = paths['p_hat']

    put = np.empty_like(s_hat_0)
    for i in range(grid.n_steps):
        put[:, i] = put_price(times[i], K, s_hat_0[:, i], params, T)
    put[:, -1] = np.maximum(K * np.exp(-params.r * T) * s_hat_0[:, -1] - 1.0, 0.0)

    def price_fn(t, bond):
        return put_price_from_bond(t, K, bond, params, T)

    ratio = np.column_stack([hedge_ratio_fd(price_fn, times[i], p_hat[:, i]) for i in range(grid.n_steps)])
    xi = defaultable_hedge(psi.left_limit(), ratio)
    value = put * psi.values
    cost = cost_process(Strategy(xi, ('p_hat',)), p_hat, value)

    d_psi = np.diff(psi.values, axis=1)
    d_put = np.diff(put, axis=1)
    d_bond = np.diff(p_hat, axis=1)
    psi_left = psi.left_limit()
    via_jumps = value[:, :1] + cumulate(put[:, 1:] * d_psi + psi_left * (d_put - ratio * d_bond))
    identity = float(np.max(np.abs(cost.cost - via_jumps)))
    product = np.diff(value, axis=1) - (put[:, :-1] * d_psi + psi_left * d_put + d_put * d_psi)
    logger.info("defaultable put hedge: %d defaults, cost identity %.2e", int((default.tau < T).sum()), identity)
    return DefaultableHedge(xi, ratio, put, value, cost, identity, float(np.max(np.abs(product))))


# ==========================================
# MONTE CARLO GKW DECOMPOSITION
# ==========================================

def _solve_covariance(cov_xx: np.ndarray, cov_xv: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-path least-norm solve of cov_xx xi = cov_xv; returns xi and a flag for non-positive directions."""
    sym = 0.5 * (cov_xx + np.swapaxes(cov_xx, -1, -2))
    w, q = np.linalg.eigh(sym)
    scale = np.max(np.abs(w), axis=-1, keepdims=True)
    keep = w > EIGEN_FLOOR * np.maximum(scale, np.finfo(float).tiny)
    inv_w = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    coords = np.einsum('pji,pj->pi', q, cov_xv) * inv_w
    return np.einsum('pij,pj->pi', q, coords), ~keep.all(axis=-1)


def gkw_regression(payoff, instrument_increments, state, degree: int = 3, ridge: float = RIDGE,
                   instruments: Optional[Sequence[str]] = None) -> DecompositionResult:
    """
    GKW / Foellmer-Schweizer decomposition of a benchmarked payoff by regression.

    Backward from V_N = payoff: at each step the conditional mean of V_{i+1}
    and dX_i, then the conditional covariances of their centred values, are
    regressed on polynomials of the state at node i;
        xi_i = Cov(dX)^{-1} Cov(dX, V_{i+1}),  V_i = E[V_{i+1}] - xi_i . E[dX_i].
    Paths where the fitted covariance is not positive definite use the
    pooled (unconditional) moments of that step.

    Args:
        payoff: (n_paths,) benchmarked payoff
        instrument_increments: (n_paths, n_steps[, m]) benchmarked instrument increments
        state: (n_paths, n_steps + 1[, k]) regression state per node
        degree: Polynomial degree of the basis (default 3)
        ridge: Relative ridge used when the design is rank deficient

    Returns:
        DecompositionResult with the value path and per-step diagnostics
    """
    payoff = np.asarray(payoff, dtype=float)
    dX = _stack_instruments(np.asarray(instrument_increments, dtype=float))
    state = np.asarray(state, dtype=float)
    if state.ndim == 2:
        state = state[..., None]
    n, n_steps, m = dX.shape
    if payoff.shape != (n,):
        raise ValueError(f"payoff has shape {payoff.shape}, expected ({n},)")
    if state.shape[:2] != (n, n_steps + 1):
        raise ValueError(f"state has shape {state.shape}, expected ({n}, {n_steps + 1}, k)")
    if not np.all(np.isfinite(payoff)):
        raise ValueError("payoff must be finite on every path")
    instruments = tuple(instruments or (f'X{j + 1}' for j in range(m)))

    value = np.empty((n, n_steps + 1))
    value[:, -1] = payoff
    holdings = np.zeros((n, n_steps, m))
    ranks, ridged, pooled = [], [], []
    for i in range(n_steps - 1, -1, -1):
        basis = polynomial_basis(state[:, i], degree)
        dx = dX[:, i]
        coef, rank, used = least_squares(basis, np.column_stack([value[:, i + 1], dx]), ridge)
        first = basis @ coef
        v_c = value[:, i + 1] - first[:, 0]
        dx_mean = first[:, 1:]
        dx_c = dx - dx_mean

        products = np.column_stack([v_c[:, None] * dx_c, (dx_c[:, :, None] * dx_c[:, None, :]).reshape(n, m * m)])
        coef2, rank2, used2 = least_squares(basis, products, ridge)
        second = basis @ coef2
        xi, bad = _solve_covariance(second[:, m:].reshape(n, m, m), second[:, :m])
        if np.any(bad):
            pooled_xi, _ = _solve_covariance(products[:, m:].mean(axis=0).reshape(1, m, m),
                                             products[:, :m].mean(axis=0)[None, :])
            xi[bad] = pooled_xi[0]
        holdings[:, i] = xi
        value[:, i] = first[:, 0] - (xi * dx_mean).sum(axis=1)
        ranks.append(min(rank, rank2))
        ridged.append(bool(used or used2))
        pooled.append(int(bad.sum()))
        logger.debug("step %d: basis rank %d, %d paths on pooled moments", i, min(rank, rank2), int(bad.sum()))

    strategy = Strategy(holdings, instruments)
    step_gains = strategy.gains(dX)
    h0 = float(value[:, 0].mean())
    residual_path = value - h0 - cumulate(step_gains)
    if any(ridged):
        logger.warning("ridge fallback used at %d of %d steps", sum(ridged), n_steps)
    return DecompositionResult(
        h0=h0,
        integrand=strategy,
        residual_terminal=residual_path[:, -1].copy(),
        residual_path=residual_path,
        gains=step_gains.sum(axis=1),
        value_path=value,
        diagnostics={'ranks': ranks[::-1], 'ridge_used': ridged[::-1], 'pooled_paths': pooled[::-1],
                     'degree': int(degree), 'ridge': ridge},
    )


@dataclass
class MinimalityReport:
    """Change in empirical R_hat_0 under each bounded predictable perturbation."""
    increases: np.ndarray
    stderrs: np.ndarray

    @property
    def passed(self) -> bool:
        return bool(np.all(self.increases > -self.stderrs))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'perturbation': np.arange(self.increases.size), 'risk_increase': self.increases,
                             'stderr': self.stderrs, 'passed': self.increases > -self.stderrs})


def minimality_check(result: DecompositionResult, instrument_increments, state=None,
                     n_perturbations: int = N_PERTURBATIONS, seed: int = 0) -> MinimalityReport:
    """
    Perturb the integrand by phi_i = sin(w . state_i + c) and measure the change in R_hat_0.

    phi is bounded and uses node-i information only. Each perturbation's gains
    are scaled to the spread of the residual, so the quadratic term dominates
    sampling noise when the residual is orthogonal to them. Without a state,
    the running instrument levels serve as features.
    """
    dX = _stack_instruments(np.asarray(instrument_increments, dtype=float))
    n, n_steps, m = dX.shape
    if state is None:
        features = np.concatenate([np.zeros((n, 1, m)), np.cumsum(dX, axis=1)], axis=1)
    else:
        features = np.asarray(state, dtype=float)
        features = features[..., None] if features.ndim == 2 else features
    spread = features.std(axis=0, keepdims=True)
    features = (features - features.mean(axis=0, keepdims=True)) / np.where(spread > 0, spread, 1.0)
    features = features[:, :-1]

    residual = np.asarray(result.residual_terminal, dtype=float)
    target = residual.std() if residual.std() > 0 else 1.0
    rng = np.random.default_rng(seed)
    increases, stderrs = [], []
    for _ in range(n_perturbations):
        weights = rng.standard_normal((features.shape[-1], m))
        phase = rng.uniform(-np.pi, np.pi, m)
        phi = np.sin(features @ weights + phase)
        gains = (phi * dX).sum(axis=(1, 2))
        gains *= target / gains.std() if gains.std() > 0 else 0.0
        change = (residual - gains) ** 2 - residual ** 2
        increases.append(change.mean())
        stderrs.append(change.std(ddof=1) / np.sqrt(n))
    report = MinimalityReport(np.array(increases), np.array(stderrs))
    logger.info("minimality check: %d/%d perturbations increase risk", int((report.increases > 0).sum()),
                n_perturbations)
    return report
