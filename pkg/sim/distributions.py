"""
Bench Hedge - Non-central Chi-square Kernel

Distribution function and exact sampling of the non-central chi-square law,
including the zero-degrees-of-freedom case whose atom at zero the put formula
subtracts explicitly.

The distribution function is the Poisson mixture

    P(Y <= x) = sum_j Poisson(j; l/2) * chi2_cdf(x; nu + 2j)

where the j = 0 term is a unit step at 0 when nu = 0.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import special, stats

from sim.errors import SeriesTruncationError

logger = logging.getLogger(__name__)

WEIGHT_TOLERANCE = 1e-14
MAX_TERMS = 1_000_000
CHUNK_CELLS = 2_000_000

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class NcChiSqParams:
    """Degrees of freedom (nu) and non-centrality (l)."""
    dof: float
    noncentrality: float

    def __post_init__(self):
        if not np.isfinite(self.dof) or self.dof < 0:
            raise ValueError(f"dof must be finite and >= 0, got {self.dof}")
        if not np.isfinite(self.noncentrality) or self.noncentrality < 0:
            raise ValueError(f"noncentrality must be finite and >= 0, got {self.noncentrality}")

    @property
    def atom(self) -> float:
        """Mass at zero: exp(-l/2) when dof = 0, else 0."""
        return float(np.exp(-0.5 * self.noncentrality)) if self.dof == 0 else 0.0


def _poisson_windows(means: np.ndarray, weight_tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-mean index ranges [lo, hi] holding all but weight_tol of the Poisson mass."""
    means = np.asarray(means, dtype=float)
    safe = np.where(means > 0, means, 1.0)
    lo = np.where(means > 50, stats.poisson.ppf(weight_tol / 2, safe), 0.0)
    hi = stats.poisson.isf(weight_tol / 2, safe) + 1
    lo = np.where(means > 0, np.maximum(lo, 0), 0).astype(np.int64)
    hi = np.where(means > 0, hi, 0).astype(np.int64)
    spans = hi - lo + 1
    if np.any(spans > MAX_TERMS):
        worst = int(np.argmax(spans))
        raise SeriesTruncationError(
            f"Poisson mixture needs {spans[worst]} terms (cap {MAX_TERMS}) for noncentrality {2 * means[worst]}"
        )
    return lo, hi


def _poisson_window(mean: float, weight_tol: float) -> tuple[int, int]:
    """Smallest index range holding all but weight_tol of the Poisson mass."""
    lo, hi = _poisson_windows(np.array([mean]), weight_tol)
    return int(lo[0]), int(hi[0])


def mixture_terms(x: float, params: NcChiSqParams, weight_tol: float = WEIGHT_TOLERANCE):
    """
    Individual terms of the Poisson-mixture series at a single point.

    Returns:
        (j, weights, central_cdfs): index array, Poisson weights, central
        chi-square distribution values with nu + 2j degrees of freedom.
    """
    j_lo, j_hi = _poisson_window(0.5 * params.noncentrality, weight_tol)
    j = np.arange(j_lo, j_hi + 1)
    weights = stats.poisson.pmf(j, 0.5 * params.noncentrality) if params.noncentrality > 0 else (j == 0).astype(float)
    dof = params.dof + 2.0 * j
    central = np.empty_like(weights)
    positive = dof > 0
    central[positive] = stats.chi2.cdf(x, dof[positive])
    # nu + 2j = 0 only for j = 0, nu = 0: the unit step at the origin
    central[~positive] = 1.0 if x >= 0 else 0.0
    return j, weights, central


def _mixture_chunk(xs: np.ndarray, means: np.ndarray, dof: float, j_lo: int, j_hi: int) -> np.ndarray:
    """
    Mixture sums for points sharing one index window [j_lo, j_hi].

    Central terms are summed downward from the top of the window with
    P(s, y) = P(s + 1, y) + y^s e^-y / Gamma(s + 1); one incomplete gamma
    call per point.
    """
    y = 0.5 * xs[:, None]
    j = np.arange(j_lo, j_hi + 1, dtype=float)[None, :]
    positive = means[:, None] > 0
    log_means = np.log(np.where(positive, means[:, None], 1.0))
    weights = np.where(positive, np.exp(j * log_means - means[:, None] - special.gammaln(j + 1)),
                       (j == 0).astype(float))

    shape = 0.5 * dof + j
    top = shape[0, -1]
    # shape 0 is the unit step at the origin (nu = 0, j = 0)
    central_top = special.gammainc(top, y[:, 0]) if top > 0 else np.ones(len(xs))
    below = shape[:, :-1]
    steps = np.exp(below * np.log(np.where(y > 0, y, 1.0)) - y - special.gammaln(below + 1))
    steps = np.where(y > 0, steps, (below == 0).astype(float))
    tails = np.cumsum(steps[:, ::-1], axis=1)[:, ::-1]
    central = np.concatenate([central_top[:, None] + tails, central_top[:, None]], axis=1)
    return np.minimum(np.sum(weights * central, axis=1), 1.0)


def ncx2_cdf_many(x: ArrayLike, dof: float, noncentrality: ArrayLike,
                  weight_tol: float = WEIGHT_TOLERANCE) -> np.ndarray:
    """
    Vectorized Z^2(x; nu, l) over broadcast arrays of x and l with a common nu.

    Every point keeps its own Poisson window. Points are sorted by l and
    evaluated in chunks whose shared window times chunk length stays under
    CHUNK_CELLS, so widely spread l (S_hat0 near maturity) never builds one
    window covering the whole batch.
    """
    if not np.isfinite(dof) or dof < 0:
        raise ValueError(f"dof must be finite and >= 0, got {dof}")
    x_arr, l_arr = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(noncentrality, dtype=float))
    if np.any(l_arr < 0) or not np.all(np.isfinite(l_arr)):
        raise ValueError("noncentrality must be finite and >= 0")
    x_flat, l_flat = x_arr.ravel(), l_arr.ravel()
    out = np.zeros_like(x_flat)
    support = np.flatnonzero(x_flat >= 0)
    if support.size == 0:
        return out.reshape(x_arr.shape)

    order = support[np.argsort(l_flat[support], kind='stable')]
    means = 0.5 * l_flat[order]
    lo, hi = _poisson_windows(means, weight_tol)
    start, n_chunks, max_terms = 0, 0, 0
    while start < order.size:
        # windows grow with the mean, so [lo[start], hi[stop - 1]] covers the chunk
        stop = start + 1
        while stop < order.size and (hi[stop] - lo[start] + 1) * (stop - start + 1) <= CHUNK_CELLS:
            stop += 1
        idx = order[start:stop]
        out[idx] = _mixture_chunk(x_flat[idx], means[start:stop], dof, int(lo[start]), int(hi[stop - 1]))
        max_terms = max(max_terms, int(hi[stop - 1] - lo[start] + 1))
        n_chunks += 1
        start = stop
    logger.debug("ncx2 mixture: %d points in %d chunk(s), at most %d terms (nu=%s)",
                 order.size, n_chunks, max_terms, dof)
    return out.reshape(x_arr.shape)


def ncx2_cdf(x: ArrayLike, params: NcChiSqParams, weight_tol: float = WEIGHT_TOLERANCE) -> ArrayLike:
    """
    Non-central chi-square distribution function Z^2(x; nu, l).

    For nu = 0 the value at x = 0 is the atom exp(-l/2).

    Args:
        x: Evaluation point(s); negative values give 0
        params: Degrees of freedom and non-centrality
        weight_tol: Discarded Poisson mass (default 1e-14)

    Returns:
        Probability P(Y <= x), same shape as x

    Raises:
        SeriesTruncationError: If more than 10^6 mixture terms are needed

    Example:
        >>> ncx2_cdf(0.0, NcChiSqParams(0.0, 2.0))  # exp(-1)
        0.36787944117144233
    """
    values = ncx2_cdf_many(x, params.dof, params.noncentrality, weight_tol)
    return float(values) if np.ndim(x) == 0 else values


def ncx2_draws(params: NcChiSqParams, rng: np.random.Generator, size: Optional[int] = None) -> ArrayLike:
    """
    Exact draws from a numpy Generator.

    dof > 1 uses (N + sqrt(l))^2 + chi2(dof - 1); 0 < dof <= 1 uses numpy's
    non-central sampler; dof = 0 uses the Poisson mixture chi2(2P), P ~ Poisson(l/2),
    which puts mass exp(-l/2) at 0.
    """
    if params.dof == 0 and params.noncentrality == 0:
        raise ValueError("dof and noncentrality cannot both be zero (degenerate law)")
    if params.dof > 1:
        shift = np.sqrt(params.noncentrality)
        normal = rng.standard_normal(size)
        return (normal + shift) ** 2 + rng.chisquare(params.dof - 1, size)
    if params.dof > 0:
        return rng.noncentral_chisquare(params.dof, params.noncentrality, size) if params.noncentrality > 0 \
            else rng.chisquare(params.dof, size)
    counts = rng.poisson(0.5 * params.noncentrality, size)
    return np.where(counts > 0, rng.gamma(np.maximum(counts, 1), 2.0), 0.0)


def ncx2_sample(params: NcChiSqParams, stream, size: Optional[int] = None) -> ArrayLike:
    """
    Exact non-central chi-square draw(s) from a reproducible stream.

    Args:
        params: Law parameters; dof = 0 requires noncentrality > 0
        stream: RngStream (sim.stochastic_core)
        size: Number of draws (None for a single float)

    Example:
        >>> from sim.stochastic_core import RngStream
        >>> y = ncx2_sample(NcChiSqParams(4.0, 3.0), RngStream(42, 0), size=1000)
        >>> y.shape
        (1000,)
    """
    draws = ncx2_draws(params, stream.generator(), size)
    return float(draws) if size is None else draws
