"""
Bench Hedge - Verification

Statistical checks of the structural results on simulated paths: benchmarked
nonnegative portfolios are supermartingales, the benchmarked savings account
and the candidate density are strict local martingales, costs change
numeraire by the product rule, and orthogonality of the cost survives the
change of numeraire.

Thresholds are fixed: 4 standard errors for drift and orthogonality tests,
3 for quantitative matches against closed forms.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np

from sim.models import StylizedMmmParams
from sim.stochastic_core import PathBundle

logger = logging.getLogger(__name__)

DRIFT_THRESHOLD = 4.0
MATCH_THRESHOLD = 3.0


@dataclass
class VerificationReport:
    """One line of the verify task output."""
    test: str
    statistic: float
    threshold: float
    passed: bool
    detail: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DriftReport:
    """
    Per-step mean increment and its standard error.

    One-sided reports only count positive drift against the verdict.
    """
    name: str
    mean_increment: np.ndarray
    stderr: np.ndarray
    one_sided: bool
    threshold: float = DRIFT_THRESHOLD

    @property
    def zscores(self) -> np.ndarray:
        with np.errstate(divide='ignore', invalid='ignore'):
            z = np.where(self.stderr > 0, self.mean_increment / self.stderr, 0.0)
        # exactly constant but drifting increments are infinitely significant
        return np.where((self.stderr == 0) & (self.mean_increment != 0), np.sign(self.mean_increment) * np.inf, z)

    @property
    def max_abs_z(self) -> float:
        z = self.zscores
        if self.one_sided:
            z = np.maximum(z, 0.0)
        return float(np.max(np.abs(z))) if z.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_abs_z <= self.threshold

    @property
    def cumulative_drift(self) -> float:
        return float(self.mean_increment.sum())

    def to_record(self) -> VerificationReport:
        kind = 'supermartingale' if self.one_sided else 'martingale'
        return VerificationReport(f"{kind}:{self.name}", self.max_abs_z, self.threshold, self.passed,
                                  {'cumulative_drift': self.cumulative_drift,
                                   'steps': int(self.mean_increment.size)})


def _channel(channel: Union[str, np.ndarray], paths: Optional[PathBundle]) -> tuple:
    if isinstance(channel, str):
        if paths is None:
            raise ValueError(f"channel '{channel}' given by name but no paths supplied")
        return channel, np.asarray(paths[channel], dtype=float)
    return 'channel', np.asarray(channel, dtype=float)


def _increment_stats(values: np.ndarray) -> tuple:
    inc = np.diff(values, axis=1)
    n = inc.shape[0]
    stderr = inc.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(inc.shape[1])
    return inc.mean(axis=0), stderr


def supermartingale_check(channel: Union[str, np.ndarray], paths: Optional[PathBundle] = None) -> DriftReport:
    """
    One-sided test that mean increments are <= 0 at every step, within 4 SE.

    Args:
        channel: Channel name in paths, or an (n_paths, n_nodes) array
        paths: Bundle holding the channel

    Raises:
        ValueError: If the channel takes negative values

    Example:
        >>> report = supermartingale_check('s_hat_0', paths)
        >>> report.passed, report.cumulative_drift < 0
        (True, True)
    """
    name, values = _channel(channel, paths)
    if np.any(values < 0):
        raise ValueError(f"supermartingale check needs a nonnegative channel, '{name}' goes negative")
    mean, stderr = _increment_stats(values)
    report = DriftReport(name, mean, stderr, one_sided=True)
    logger.info("supermartingale check %s: max z %.2f", name, report.max_abs_z)
    return report


def martingale_check(channel: Union[str, np.ndarray], paths: Optional[PathBundle] = None) -> DriftReport:
    """Two-sided test that mean increments are 0 at every step, within 4 SE."""
    name, values = _channel(channel, paths)
    mean, stderr = _increment_stats(values)
    report = DriftReport(name, mean, stderr, one_sided=False)
    logger.info("martingale check %s: max |z| %.2f", name, report.max_abs_z)
    return report


@dataclass
class StrictLocalMartingaleReport:
    """E[Lambda_T] estimate against 1 - exp(-f(0) Z_0)."""
    estimate: float
    stderr: float
    theory: Optional[float]
    gap: float

    @property
    def zscore(self) -> float:
        if self.theory is None or self.stderr == 0:
            return 0.0
        return (self.estimate - self.theory) / self.stderr

    @property
    def passed(self) -> bool:
        return abs(self.zscore) <= MATCH_THRESHOLD

    def to_record(self) -> VerificationReport:
        return VerificationReport('strict_local_martingale', abs(self.zscore), MATCH_THRESHOLD, self.passed,
                                  {'estimate': self.estimate, 'stderr': self.stderr, 'theory': self.theory,
                                   'gap': self.gap})


def strict_local_martingale_check(paths: PathBundle, params) -> StrictLocalMartingaleReport:
    """
    Monte Carlo E[Lambda_T] for Lambda_t = (Z_t / Z_0)^{1 - delta/2}.

    For the stylized model (delta = 4) the closed form is 1 - exp(-f(0) Z_0),
    strictly below 1; other models report the estimate and gap only.

    Raises:
        ValueError: If params carry a non-zero correlation rho
    """
    if getattr(params, 'rho', 0.0) != 0:
        raise ValueError(f"strict local martingale check assumes rho = 0, got {params.rho}")
    delta = params.bessel_dim
    Z = paths['Z']
    ratio = (Z[:, -1] / Z[:, 0]) ** (1.0 - 0.5 * delta)
    n = ratio.size
    estimate = float(ratio.mean())
    stderr = float(ratio.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    theory = None
    if isinstance(params, StylizedMmmParams):
        theory = float(-np.expm1(-params.f(paths.grid.t0, paths.grid.T) * params.z0))
    report = StrictLocalMartingaleReport(estimate, stderr, theory, 1.0 - estimate)
    logger.info("E[Lambda_T] = %.5f +- %.5f (closed form %s)", estimate, stderr, theory)
    return report


def cost_numeraire_relation(c_bar, s_hat_0, c_hat) -> float:
    """
    Max residual of dC_hat = S_hat0_{i} dC_bar + dC_bar dS_hat0 over steps and paths.

    The initial values must also satisfy C_hat_0 = S_hat0_0 C_bar_0.
    """
    c_bar = np.asarray(c_bar, dtype=float)
    s0 = np.asarray(s_hat_0, dtype=float)
    c_hat = np.asarray(c_hat, dtype=float)
    if not c_bar.shape == s0.shape == c_hat.shape or c_bar.ndim != 2:
        raise ValueError(f"misaligned paths: C_bar {c_bar.shape}, S_hat0 {s0.shape}, C_hat {c_hat.shape}")
    d_bar = np.diff(c_bar, axis=1)
    step = np.diff(c_hat, axis=1) - (s0[:, :-1] * d_bar + d_bar * np.diff(s0, axis=1))
    start = c_hat[:, 0] - s0[:, 0] * c_bar[:, 0]
    return float(max(np.max(np.abs(step), initial=0.0), np.max(np.abs(start))))


def _covariation_z(cost: np.ndarray, martingale: np.ndarray) -> tuple:
    """Mean over paths of sum_i dC_i dM_i and its z-score (0 when exactly zero)."""
    dC = np.diff(cost, axis=1)
    dM = np.diff(martingale, axis=1)
    # strip the per-step cross-path drift so only the martingale part enters
    dM = dM - dM.mean(axis=0, keepdims=True)
    covariation = (dC * dM).sum(axis=1)
    mean = float(covariation.mean())
    stderr = float(covariation.std(ddof=1) / np.sqrt(covariation.size)) if covariation.size > 1 else 0.0
    if stderr == 0:
        return mean, 0.0 if mean == 0 else np.inf
    return mean, mean / stderr


@dataclass
class OrthogonalityReport:
    """Covariations of C_bar with X_bar and of C_hat with X_hat."""
    covariation_bar: float
    z_bar: float
    covariation_hat: float
    z_hat: float

    @property
    def applicable(self) -> bool:
        """Whether C_bar is orthogonal to X_bar, the hypothesis being carried over."""
        return abs(self.z_bar) <= DRIFT_THRESHOLD

    @property
    def passed(self) -> bool:
        return self.applicable and abs(self.z_hat) <= DRIFT_THRESHOLD

    def to_record(self) -> VerificationReport:
        return VerificationReport('orthogonality_preservation', max(abs(self.z_bar), abs(self.z_hat)),
                                  DRIFT_THRESHOLD, self.passed,
                                  {'z_bar': self.z_bar, 'z_hat': self.z_hat, 'applicable': self.applicable})


def orthogonality_preservation(c_bar, c_hat, instrument_hat, s_hat_0) -> OrthogonalityReport:
    """
    Test [C_bar, X_bar] = 0 and [C_hat, X_hat] = 0 for one instrument path.

    X_bar = X_hat / S_hat0 is the instrument in savings-account units.
    """
    c_bar = np.asarray(c_bar, dtype=float)
    c_hat = np.asarray(c_hat, dtype=float)
    x_hat = np.asarray(instrument_hat, dtype=float)
    s0 = np.asarray(s_hat_0, dtype=float)
    if not c_bar.shape == c_hat.shape == x_hat.shape == s0.shape:
        raise ValueError("cost, instrument and s_hat_0 paths must share one shape")
    cov_bar, z_bar = _covariation_z(c_bar, x_hat / s0)
    cov_hat, z_hat = _covariation_z(c_hat, x_hat)
    report = OrthogonalityReport(cov_bar, float(z_bar), cov_hat, float(z_hat))
    logger.info("orthogonality: z_bar %.2f, z_hat %.2f", report.z_bar, report.z_hat)
    return report


@dataclass
class NpDynamicsReport:
    """Drift and variance of the discounted numeraire portfolio against alpha."""
    drift: DriftReport
    variance: DriftReport

    @property
    def passed(self) -> bool:
        return self.drift.passed and self.variance.passed

    def to_records(self) -> List[VerificationReport]:
        return [self.drift.to_record(), self.variance.to_record()]


def np_drift_check(paths: PathBundle) -> NpDynamicsReport:
    """
    Check dS_bar = alpha dt + sqrt(S_bar alpha) dW step by step.

    The drift residual dS_bar - alpha_i dt and the variance residual
    (dS_bar - alpha_i dt)^2 - S_bar_i alpha_i dt must both average to zero
    within 4 SE at every step.
    """
    s_bar = paths['discounted_np']
    alpha = paths['alpha'][:, :-1]
    dt = paths.grid.dt
    surprise = np.diff(s_bar, axis=1) - alpha * dt
    excess_var = surprise ** 2 - s_bar[:, :-1] * alpha * dt
    n = surprise.shape[0]

    def report(name, values):
        return DriftReport(name, values.mean(axis=0), values.std(axis=0, ddof=1) / np.sqrt(n), one_sided=False)

    return NpDynamicsReport(report('np_drift', surprise), report('np_variance', excess_var))
