"""
Bench Hedge - Real-World Pricing

Closed-form benchmarked prices in the stylized MMM (zero-coupon bond, index
put, defaultable put), Monte Carlo real-world pricing with least-squares
regression for conditional expectations, and the constant-intensity default
model with its martingale Psi.

All prices are benchmarked, i.e. expressed in units of the numeraire
portfolio: P_hat(t,T) = E[1 / S^{delta*}_T | F_t].
"""

import itertools
import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import optimize, stats

from sim.distributions import ncx2_cdf_many
from sim.errors import NumericalError
from sim.models import StylizedMmmParams
from sim.stochastic_core import PathBundle, RngStream, TimeGrid

logger = logging.getLogger(__name__)

RIDGE = 1e-8
KURTOSIS_WARNING = 50.0
BOND_INVERSION_TOL = 1e-12
BOND_INVERSION_MAXITER = 100
PUT_ROUNDOFF = 1e-12


# ==========================================
# ZERO-COUPON BOND
# ==========================================

@dataclass(frozen=True)
class BondQuote:
    """Benchmarked zero-coupon bond price and the f(t) it was computed from."""
    t: float
    T: float
    p_hat: float
    f_t: float


def _check_before_maturity(t, T):
    if np.any(np.asarray(t) >= T):
        raise ValueError(f"valuation time must precede maturity T={T}")


def zcb_benchmarked(t, s_hat_0, params: StylizedMmmParams, T: float):
    """
    Vectorized P_hat(t,T) = e^{-rT} (1 - exp(-f(t) / S_hat0_t)) S_hat0_t.

    At t = T the value is the benchmarked unit payoff e^{-rT} S_hat0_T.
    """
    s_hat_0 = np.asarray(s_hat_0, dtype=float)
    f_t = params.f(t, T)
    with np.errstate(over='ignore', divide='ignore', invalid='ignore'):
        survival = -np.expm1(-f_t / s_hat_0)
    survival = np.where(np.isinf(f_t), 1.0, survival)
    return np.exp(-params.r * T) * survival * s_hat_0


def zcb_price(t: float, s_hat_0: float, params: StylizedMmmParams, T: float) -> BondQuote:
    """
    Benchmarked zero-coupon bond in the stylized MMM.

    Args:
        t: Valuation time (< T)
        s_hat_0: Benchmarked savings account at t
        params: Stylized model parameters
        T: Maturity

    Returns:
        BondQuote with p_hat and f(t)

    Example:
        >>> q = zcb_price(0.0, 1.0, StylizedMmmParams(0.05, 0.05), 10.0)
        >>> round(q.p_hat, 4)
        0.9542
    """
    _check_before_maturity(t, T)
    if not s_hat_0 > 0:
        raise ValueError(f"s_hat_0 must be positive, got {s_hat_0}")
    return BondQuote(float(t), float(T), float(zcb_benchmarked(t, s_hat_0, params, T)), float(params.f(t, T)))


def bond_curve(params: StylizedMmmParams, maturities: Sequence[float], s_hat_0: Optional[float] = None,
               t: float = 0.0) -> pd.DataFrame:
    """P_hat(t,T) over a maturity lattice; s_hat_0 defaults to 1 / z0."""
    s_hat_0 = 1.0 / params.z0 if s_hat_0 is None else s_hat_0
    quotes = [zcb_price(t, s_hat_0, params, T) for T in maturities]
    return pd.DataFrame([{'t': q.t, 'T': q.T, 'p_hat': q.p_hat, 'f_t': q.f_t} for q in quotes])


def attach_bond_channel(paths: PathBundle, params: StylizedMmmParams, T: float) -> PathBundle:
    """Add channel 'p_hat' = P_hat(t_i, T) along every path (grid must end at or before T)."""
    if paths.grid.T > T:
        raise ValueError(f"bond maturity {T} precedes the grid end {paths.grid.T}")
    p_hat = zcb_benchmarked(paths.grid.times[None, :], paths['s_hat_0'], params, T)
    return paths.with_channels({'p_hat': p_hat}, bond_maturity=T)


def state_from_bond(t: float, p_hat, params: StylizedMmmParams, T: float):
    """
    Invert the bond formula: the S_hat0_t that prices the bond at p_hat.

    P_hat is increasing and concave in S_hat0 with range (0, f(t) e^{-rT}), so
    Newton started left of the root (at p_hat e^{rT}) converges monotonically.
    The iteration runs on S_hat0 over a per-element scale near the root, so
    the step tolerance is relative. Works elementwise on arrays.

    Raises:
        NumericalError: If any element fails to converge (prices within
            round-off of the cap f(t) e^{-rT} are ill-conditioned)
    """
    _check_before_maturity(t, T)
    p_arr = np.asarray(p_hat, dtype=float)
    discount = np.exp(-params.r * T)
    f_t = float(params.f(t, T))
    if np.any(p_arr <= 0) or np.any(p_arr >= f_t * discount):
        raise ValueError(f"bond price must lie in (0, {f_t * discount:.6g}) at t={t}")
    target = p_arr.ravel()
    start = target / discount
    # within a factor ~2 of the root; the second branch inverts P_hat ~ e^{-rT} (f - f^2 / 2 S_hat0)
    scale = np.where(start > 0.5 * f_t, f_t ** 2 / (2.0 * (f_t - start)), start)
    guess = start / scale

    def excess(q):
        return zcb_benchmarked(t, q * scale, params, T) - target

    def slope(q):
        x = f_t / (q * scale)
        return scale * discount * (-np.expm1(-x) - x * np.exp(-x))

    with warnings.catch_warnings():
        warnings.simplefilter('ignore', RuntimeWarning)
        try:
            result = optimize.newton(excess, guess if guess.size > 1 else float(guess[0]), fprime=slope,
                                     tol=BOND_INVERSION_TOL, maxiter=BOND_INVERSION_MAXITER,
                                     full_output=True, disp=False)
        except RuntimeError as exc:
            raise NumericalError(f"bond inversion failed at t={t}: {exc}") from exc
    if start.size > 1:
        ratio, converged = result.root, np.asarray(result.converged)
    else:
        ratio, converged = np.atleast_1d(result[0]), np.array([result[1].converged])
    if not converged.all():
        raise NumericalError(
            f"bond inversion did not converge for {int(np.sum(~converged))} of {converged.size} price(s) at t={t}"
        )
    root = (np.asarray(ratio, dtype=float) * scale).reshape(p_arr.shape)
    return float(root) if np.ndim(p_hat) == 0 else root


# ==========================================
# INDEX PUT
# ==========================================

@dataclass(frozen=True)
class PutClosedFormTerms:
    """d1 = 2 f(t) K e^{-rT}, l2 = 2 f(t) / S_hat0_t (non-centrality of Z_T / ds)."""
    d1: np.ndarray
    l2: np.ndarray
    K: float
    T: float


def put_terms(t: float, K: float, s_hat_0, params: StylizedMmmParams, T: float) -> PutClosedFormTerms:
    _check_before_maturity(t, T)
    if not np.isfinite(K) or K < 0:
        raise ValueError(f"strike must be finite and >= 0 (bounded payoff), got {K}")
    f_t = params.f(t, T)
    s_hat_0 = np.asarray(s_hat_0, dtype=float)
    return PutClosedFormTerms(
        d1=2.0 * f_t * K * np.exp(-params.r * T) * np.ones_like(s_hat_0),
        l2=2.0 * f_t / s_hat_0,
        K=float(K),
        T=float(T),
    )


def put_price(t: float, K: float, s_hat_0, params: StylizedMmmParams, T: float):
    """
    Benchmarked put on the numeraire portfolio, payoff (K / S^{delta*}_T - 1)^+.

        p_hat = K e^{-rT} S_hat0_t (Z^2(d1; 0, l2) - e^{-l2/2}) - Z^2(d1; 4, l2)

    Args:
        t: Valuation time (< T)
        K: Strike (>= 0)
        s_hat_0: Benchmarked savings account at t (scalar or array)
        params: Stylized model parameters
        T: Maturity

    Returns:
        Benchmarked put value(s), nonnegative and at most K P_hat(t,T)

    Raises:
        NumericalError: If the formula is negative by more than round-off
    """
    terms = put_terms(t, K, s_hat_0, params, T)
    if K == 0:
        return 0.0 if np.ndim(s_hat_0) == 0 else np.zeros(np.shape(s_hat_0))
    s_hat_0 = np.asarray(s_hat_0, dtype=float)
    k_disc = K * np.exp(-params.r * T)
    bessel0 = ncx2_cdf_many(terms.d1, 0.0, terms.l2) - np.exp(-0.5 * terms.l2)
    bessel4 = ncx2_cdf_many(terms.d1, 4.0, terms.l2)
    value = k_disc * s_hat_0 * bessel0 - bessel4
    # only round-off may be clipped
    floor = -PUT_ROUNDOFF * np.maximum(k_disc * s_hat_0, 1.0)
    if np.any(value < floor):
        raise NumericalError(f"put price {float(np.min(value)):.3e} is negative beyond round-off (K={K}, t={t})")
    value = np.maximum(value, 0.0)
    return float(value) if value.ndim == 0 else value


def put_price_from_bond(t: float, K: float, p_hat, params: StylizedMmmParams, T: float):
    """Put price as a function of the bond price P_hat(t,T) (the hedge instrument)."""
    return put_price(t, K, state_from_bond(t, p_hat, params, T), params, T)


# ==========================================
# MONTE CARLO AND REGRESSION
# ==========================================

@dataclass
class PriceEstimate:
    """Monte Carlo price; estimate is per path when conditioning on t > 0."""
    estimate: object
    stderr: float
    n_paths: int
    t_index: int
    kurtosis: float
    heavy_tailed: bool = False


def polynomial_basis(state: np.ndarray, degree: int) -> np.ndarray:
    """
    Monomials of total degree <= degree in the standardised state columns.

    Constant columns are dropped before expansion, so a deterministic state
    reduces to the intercept alone.
    """
    state = np.asarray(state, dtype=float)
    if state.ndim == 1:
        state = state[:, None]
    spread = state.std(axis=0)
    keep = spread > 0
    scaled = (state[:, keep] - state[:, keep].mean(axis=0)) / spread[keep]
    columns = [np.ones(state.shape[0])]
    for d in range(1, int(degree) + 1):
        for combo in itertools.combinations_with_replacement(range(scaled.shape[1]), d):
            columns.append(np.prod(scaled[:, combo], axis=1))
    return np.column_stack(columns)


def least_squares(basis: np.ndarray, target: np.ndarray, ridge: float = RIDGE) -> Tuple[np.ndarray, int, bool]:
    """
    Regression coefficients; rank-deficient designs fall back to ridge.

    Returns:
        (coefficients, rank, ridge_used)
    """
    rank = int(np.linalg.matrix_rank(basis))
    if rank < basis.shape[1]:
        gram = basis.T @ basis
        coef = np.linalg.solve(gram + ridge * np.trace(gram) / basis.shape[1] * np.eye(basis.shape[1]),
                               basis.T @ target)
        logger.warning("rank-deficient regression (rank %d of %d), ridge %.0e used", rank, basis.shape[1], ridge)
        return coef, rank, True
    return np.linalg.lstsq(basis, target, rcond=None)[0], rank, False


def real_world_price_mc(
    payoff: Callable[[PathBundle], np.ndarray],
    paths: PathBundle,
    t_index: int = 0,
    state_channels: Sequence[str] = ('Z', 'gamma'),
    degree: int = 3,
) -> PriceEstimate:
    """
    Real-world price E[H_hat | F_t] by Monte Carlo.

    At t_index = 0 a plain mean; later nodes regress the benchmarked payoff on
    polynomials of the state channels at that node.

    Args:
        payoff: Function of the bundle returning benchmarked payoffs per path
        paths: Simulated paths
        t_index: Grid node of the valuation time
        state_channels: Regression state for t_index > 0
        degree: Polynomial degree (default 3)

    Returns:
        PriceEstimate (per-path fitted values when t_index > 0)
    """
    if not 0 <= t_index <= paths.grid.n_steps:
        raise ValueError(f"t_index {t_index} outside grid nodes 0..{paths.grid.n_steps}")
    values = np.asarray(payoff(paths), dtype=float)
    if values.shape != (paths.n_paths,):
        raise ValueError(f"payoff must return one value per path, got shape {values.shape}")
    n = values.size
    kurt = float(stats.kurtosis(values)) if np.ptp(values) > 0 else 0.0
    heavy = kurt > KURTOSIS_WARNING
    if heavy:
        logger.warning("payoff sample kurtosis %.1f: square-integrability is doubtful", kurt)

    if t_index == 0:
        stderr = float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        return PriceEstimate(float(values.mean()), stderr, n, 0, kurt, heavy)

    state = np.column_stack([paths[name][:, t_index] for name in state_channels])
    basis = polynomial_basis(state, degree)
    coef, _, _ = least_squares(basis, values)
    fitted = basis @ coef
    stderr = float((values - fitted).std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return PriceEstimate(fitted, stderr, n, t_index, kurt, heavy)


# ==========================================
# DEFAULT MODEL
# ==========================================

@dataclass(frozen=True)
class RecoveryFunction:
    """h(s) = a + b s on [0, T] ('constant' has b = 0)."""
    kind: str = 'constant'
    a: float = 1.0
    b: float = 0.0

    def __post_init__(self):
        if self.kind not in ('constant', 'linear'):
            raise ValueError(f"unknown recovery function '{self.kind}'")
        if self.kind == 'constant' and self.b != 0:
            raise ValueError("constant recovery takes no slope")

    def __call__(self, s):
        return self.a + self.b * np.asarray(s, dtype=float)


@dataclass(frozen=True)
class DefaultModel:
    """Constant intensity lambda, recovery h(tau ^ T), maturity T."""
    intensity: float
    recovery: RecoveryFunction
    T: float

    def __post_init__(self):
        if not np.isfinite(self.intensity) or self.intensity < 0:
            raise ValueError(f"default intensity must be finite and >= 0, got {self.intensity}")
        ends = self.recovery(np.array([0.0, self.T]))
        if np.any(ends < 0) or np.any(ends > 1):
            raise ValueError(f"recovery must lie in [0, 1] on [0, {self.T}], got endpoint values {ends}")

    def default_cdf(self, t):
        """F_t = 1 - e^{-lambda t} (always < 1 for finite t)."""
        return -np.expm1(-self.intensity * np.asarray(t, dtype=float))

    def pre_default_value(self, t):
        """
        phi(t) = E[1 + (h(tau ^ T) - 1) D_T | tau > t]
               = e^{-lambda (T-t)} + int_t^T h(s) lambda e^{-lambda (s-t)} ds.
        """
        lam, a, b = self.intensity, self.recovery.a, self.recovery.b
        horizon = self.T - np.asarray(t, dtype=float)
        if a == 1 and b == 0:
            return np.ones_like(horizon)
        survival = np.exp(-lam * horizon)
        if lam == 0:
            return survival
        defaulted = -np.expm1(-lam * horizon)
        slope_part = b * (defaulted / lam - horizon * survival)
        return survival + (a + b * np.asarray(t, dtype=float)) * defaulted + slope_part

    def compensator_integral(self, u):
        """G(u) = int_0^u lambda (h(s) - phi(s)) ds in closed form."""
        lam, a, b = self.intensity, self.recovery.a, self.recovery.b
        u = np.asarray(u, dtype=float)
        if lam == 0:
            return np.zeros_like(u)
        c = 1.0 - a - b * self.T - b / lam
        return -b * u - c * (np.exp(-lam * (self.T - u)) - np.exp(-lam * self.T))


@dataclass
class DefaultSample:
    """Exact default times and the grid indicator D_t = 1{tau <= t}."""
    tau: np.ndarray
    indicator: np.ndarray


DEFAULT_STREAM_CHANNEL = 1


def default_times(model: DefaultModel, grid: TimeGrid, n_paths: int, seed: int) -> DefaultSample:
    """
    Draw tau ~ Exp(lambda) for each path from a stream channel separate from all Wiener draws.

    Example:
        >>> sample = default_times(DefaultModel(0.0, RecoveryFunction()), TimeGrid(0, 1, 4), 10, 1)
        >>> int(sample.indicator.sum())
        0
    """
    if model.intensity == 0:
        tau = np.full(n_paths, np.inf)
    else:
        tau = np.array([RngStream(seed, p, DEFAULT_STREAM_CHANNEL).generator().exponential(1.0 / model.intensity)
                        for p in range(n_paths)])
    indicator = (tau[:, None] <= grid.times[None, :]).astype(float)
    return DefaultSample(tau, indicator)


def compensated_default(default: DefaultSample, grid: TimeGrid, model: DefaultModel) -> np.ndarray:
    """Q_t = D_t - lambda (tau ^ t) on the grid."""
    stopped = np.minimum(default.tau[:, None], grid.times[None, :])
    return default.indicator - model.intensity * stopped


@dataclass
class PsiPath:
    """Psi_t per path and node, the same from its martingale representation, and the jump node."""
    values: np.ndarray
    representation: np.ndarray
    jump_index: np.ndarray

    def left_limit(self) -> np.ndarray:
        """Psi at the left node of each step, (n_paths, n_steps)."""
        return self.values[:, :-1]


def psi_process(model: DefaultModel, default: DefaultSample, grid: TimeGrid) -> PsiPath:
    """
    Psi_t = E[1 + (h(tau ^ T) - 1) D_T | F_t] along every path.

    Closed form: h(tau) after default, phi(t) before. The representation
    Psi_0 + int (h - phi) dQ is evaluated from the jump of D and the closed-form
    compensator integral and returned alongside for the identity check.

    Raises:
        ValueError: If the grid does not end at the model maturity
    """
    if abs(grid.T - model.T) > 1e-12:
        raise ValueError(f"grid end {grid.T} differs from claim maturity {model.T}")
    times = grid.times[None, :]
    tau = default.tau[:, None]
    defaulted = default.indicator.astype(bool) & (tau < model.T)

    phi_nodes = model.pre_default_value(times)
    with np.errstate(invalid='ignore'):
        h_tau = np.where(np.isfinite(tau), model.recovery(np.minimum(tau, model.T)), 0.0)
    values = np.where(defaulted, h_tau, phi_nodes)

    stopped = np.minimum(tau, times)
    phi_tau = np.where(np.isfinite(tau), model.pre_default_value(np.minimum(tau, model.T)), 0.0)
    jump = np.where(defaulted, h_tau - phi_tau, 0.0)
    representation = model.pre_default_value(0.0) + jump - model.compensator_integral(stopped)

    hit = defaulted.any(axis=1)
    jump_index = np.where(hit, defaulted.argmax(axis=1), -1)
    return PsiPath(np.broadcast_to(values, default.indicator.shape).copy(), representation, jump_index)


def defaultable_put_price(t: float, K: float, s_hat_0, params: StylizedMmmParams, T: float, psi_t):
    """U_hat_H(t) = p_hat_{T,K}(t) * Psi_t."""
    value = np.asarray(put_price(t, K, s_hat_0, params, T)) * np.asarray(psi_t, dtype=float)
    return float(value) if value.ndim == 0 else value


def defaultable_put_payoff(paths: PathBundle, default: DefaultSample, model: DefaultModel, K: float,
                           params: StylizedMmmParams) -> np.ndarray:
    """Benchmarked payoff (K e^{-rT} S_hat0_T - 1)^+ (1 + (h(tau ^ T) - 1) D_T) per path."""
    put = np.maximum(K * np.exp(-params.r * paths.grid.T) * paths['s_hat_0'][:, -1] - 1.0, 0.0)
    tau = default.tau
    with np.errstate(invalid='ignore'):
        recovery = np.where(np.isfinite(tau), model.recovery(np.minimum(tau, model.T)), 1.0)
    defaulted = tau < model.T
    return put * np.where(defaulted, recovery, 1.0)
