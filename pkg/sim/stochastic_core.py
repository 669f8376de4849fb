"""
Bench Hedge - Stochastic Core

Time grids, reproducible per-path random streams, Wiener increments, exact
squared-Bessel transitions, the full-truncation Euler step, and the
PathBundle container every simulator returns.

Every path p draws from its own counter-based stream keyed by
(master_seed, p, channel), so a path is bitwise identical whether it is
simulated alone, in a block, or in a worker process.
"""

import logging
import multiprocessing as mp
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

# Paths are simulated in fixed-size blocks; the block size never affects results
BLOCK_SIZE = 4096

NONNEGATIVE_CHANNELS = frozenset({'Z', 'gamma', 'alpha', 'discounted_np', 's_hat_0'})


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_i = t0 + i * (T - t0) / n_steps."""
    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not (np.isfinite(self.t0) and np.isfinite(self.T)):
            raise ValueError(f"grid endpoints must be finite, got t0={self.t0}, T={self.T}")
        if not self.t0 < self.T:
            raise ValueError(f"grid requires t0 < T, got t0={self.t0}, T={self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        times = self.t0 + self.dt * np.arange(self.n_steps + 1)
        times[-1] = self.T
        return times


def make_time_grid(t0: float, T: float, n_steps: int) -> TimeGrid:
    """
    Build a uniform time grid.

    Example:
        >>> make_time_grid(0.0, 1.0, 4).times
        array([0.  , 0.25, 0.5 , 0.75, 1.  ])
    """
    return TimeGrid(float(t0), float(T), int(n_steps))


@dataclass(frozen=True)
class RngStream:
    """
    Counter-based random stream for one path.

    The Philox key is derived from (master_seed, stream_id, channel) through a
    SeedSequence spawn key, so no two (stream_id, channel) pairs share a sequence.
    """
    master_seed: int
    stream_id: int
    channel: int = 0

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(int(self.master_seed), spawn_key=(int(self.stream_id), int(self.channel)))
        return np.random.Generator(np.random.Philox(seq))

    def with_channel(self, channel: int) -> 'RngStream':
        return RngStream(self.master_seed, self.stream_id, channel)


def sample_wiener_increments(grid: TimeGrid, dims: int, stream: RngStream) -> np.ndarray:
    """
    I.i.d. N(0, dt) increments, shape (n_steps, dims).

    Args:
        grid: Time grid
        dims: Number of independent Wiener components (>= 1)
        stream: Stream for this path

    Returns:
        Increment array; identical for identical (master_seed, stream_id, channel)
    """
    if int(dims) != dims or dims < 1:
        raise ValueError(f"dims must be a positive integer, got {dims}")
    return np.sqrt(grid.dt) * stream.generator().standard_normal((grid.n_steps, int(dims)))


def besq_transition(z: np.ndarray, dim: float, clock_increment, normal: np.ndarray, chi2_rest: np.ndarray) -> np.ndarray:
    """
    Exact BESQ^dim transition from pre-drawn state-independent inputs.

    Z_{s+ds} / ds is non-central chi-square(dim, z/ds); for dim > 1 that law is
    (N + sqrt(z/ds))^2 + chi2(dim - 1), so normal ~ N(0,1) and
    chi2_rest ~ chi2(dim - 1) can be drawn before the state is known.
    """
    z = np.maximum(z, 0.0)
    return clock_increment * ((normal + np.sqrt(z / clock_increment)) ** 2 + chi2_rest)


def besq_exact_step(z: float, dim: float, clock_increment: float, stream: RngStream) -> float:
    """
    One exact step of a squared Bessel process of dimension dim > 2.

    Args:
        z: Current value (>= 0)
        dim: Bessel dimension (> 2)
        clock_increment: BESQ clock increment ds (> 0)
        stream: Stream supplying the draw

    Returns:
        Draw of Z_{s+ds} given Z_s = z

    Example:
        >>> besq_exact_step(1.0, 4.0, 0.1, RngStream(7, 0)) > 0
        True
    """
    if dim <= 2:
        raise ValueError(f"Bessel dimension must exceed 2, got {dim}")
    if z < 0:
        raise ValueError(f"BESQ state must be >= 0, got {z}")
    if not clock_increment > 0:
        raise ValueError(f"clock increment must be > 0, got {clock_increment}")
    rng = stream.generator()
    normal = rng.standard_normal()
    chi2_rest = rng.chisquare(dim - 1)
    return float(besq_transition(np.float64(z), dim, clock_increment, normal, chi2_rest))


def euler_step_full_truncation(
    state: np.ndarray,
    drift: np.ndarray,
    diffusion: np.ndarray,
    dW: np.ndarray,
    dt: float,
    nonnegative: Optional[Sequence[bool]] = None,
) -> np.ndarray:
    """
    Euler step state + drift*dt + diffusion @ dW with full truncation.

    Coefficients must already be evaluated at the truncated state
    max(component, 0) for every nonnegative component (see truncated());
    after the step those components are clipped at 0.

    Args:
        state: (..., d) current state
        drift: (..., d) evaluated drift
        diffusion: (..., d, m) evaluated diffusion
        dW: (..., m) Wiener increments
        dt: Step size (> 0)
        nonnegative: Per-component flags (default: none)

    Returns:
        New state, same shape as state
    """
    state = np.asarray(state, dtype=float)
    drift = np.asarray(drift, dtype=float)
    diffusion = np.asarray(diffusion, dtype=float)
    dW = np.asarray(dW, dtype=float)
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    if drift.shape != state.shape:
        raise ValueError(f"drift shape {drift.shape} does not match state shape {state.shape}")
    if diffusion.shape[:-1] != state.shape or diffusion.shape[-1] != dW.shape[-1] or dW.shape[:-1] != state.shape[:-1]:
        raise ValueError(
            f"diffusion shape {diffusion.shape} inconsistent with state {state.shape} and dW {dW.shape}"
        )
    new_state = state + drift * dt + np.einsum('...dm,...m->...d', diffusion, dW)
    if nonnegative is not None:
        mask = np.asarray(nonnegative, dtype=bool)
        if mask.shape != state.shape[-1:]:
            raise ValueError(f"nonnegative flags need {state.shape[-1]} entries, got {mask.shape}")
        new_state = np.where(mask, np.maximum(new_state, 0.0), new_state)
    return new_state


def truncated(state: np.ndarray, nonnegative: Sequence[bool]) -> np.ndarray:
    """State with nonnegative components replaced by max(component, 0)."""
    mask = np.asarray(nonnegative, dtype=bool)
    return np.where(mask, np.maximum(state, 0.0), state)


@dataclass
class PathBundle:
    """
    Per-path arrays over a time grid.

    channels: name -> (n_paths, n_steps + 1) node values
    increments: name -> (n_paths, n_steps) step increments
    meta: diagnostics recorded by the simulator (condition numbers etc.)
    """
    grid: TimeGrid
    channels: Dict[str, np.ndarray] = field(default_factory=dict)
    increments: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        for name, values in self.channels.items():
            self._check_channel(name, values)
        for name, values in self.increments.items():
            if values.shape != (self.n_paths, self.grid.n_steps):
                raise ValueError(f"increment '{name}' has shape {values.shape}, "
                                 f"expected {(self.n_paths, self.grid.n_steps)}")

    @property
    def n_paths(self) -> int:
        for values in self.channels.values():
            return values.shape[0]
        for values in self.increments.values():
            return values.shape[0]
        return 0

    def _check_channel(self, name: str, values: np.ndarray):
        expected = (values.shape[0], self.grid.n_steps + 1)
        if values.ndim != 2 or values.shape != expected:
            raise ValueError(f"channel '{name}' has shape {values.shape}, expected (n_paths, {self.grid.n_steps + 1})")
        if self.channels and values.shape[0] != self.n_paths:
            raise ValueError(f"channel '{name}' has {values.shape[0]} paths, bundle has {self.n_paths}")
        if name in NONNEGATIVE_CHANNELS and np.any(values < 0):
            raise ValueError(f"channel '{name}' must be nonnegative")

    def __getitem__(self, name: str) -> np.ndarray:
        if name in self.channels:
            return self.channels[name]
        if name in self.increments:
            return self.increments[name]
        raise KeyError(f"PathBundle has no channel '{name}' (channels: {sorted(self.channels)}, "
                       f"increments: {sorted(self.increments)})")

    def __contains__(self, name: str) -> bool:
        return name in self.channels or name in self.increments

    def with_channels(self, channels: Optional[Dict[str, np.ndarray]] = None,
                      increments: Optional[Dict[str, np.ndarray]] = None,
                      **meta) -> 'PathBundle':
        """New bundle with extra channels; the original is left untouched."""
        merged = PathBundle(self.grid, dict(self.channels), dict(self.increments), {**self.meta, **meta})
        for name, values in (channels or {}).items():
            merged._check_channel(name, values)
            merged.channels[name] = values
        for name, values in (increments or {}).items():
            if values.shape != (merged.n_paths, self.grid.n_steps):
                raise ValueError(f"increment '{name}' has shape {values.shape}")
            merged.increments[name] = values
        return merged

    def node_summary(self, names: Optional[Iterable[str]] = None) -> pd.DataFrame:
        """Cross-path mean and standard error per node, long format."""
        rows = []
        times = self.grid.times
        for name in (names or sorted(self.channels)):
            values = self.channels[name]
            mean = values.mean(axis=0)
            stderr = values.std(axis=0, ddof=1) / np.sqrt(values.shape[0]) if values.shape[0] > 1 \
                else np.zeros_like(mean)
            rows.append(pd.DataFrame({'t': times, 'quantity': name, 'estimate': mean, 'stderr': stderr}))
        return pd.concat(rows, ignore_index=True)


def cumulate(increments: np.ndarray, start: float = 0.0) -> np.ndarray:
    """Node values from increments: start followed by running sums, (n_paths, n_steps + 1)."""
    out = np.empty((increments.shape[0], increments.shape[1] + 1))
    out[:, 0] = start
    np.cumsum(increments, axis=1, out=out[:, 1:])
    out[:, 1:] += start
    return out


def path_blocks(n_paths: int, block_size: int = BLOCK_SIZE) -> List[range]:
    """Fixed partition of path indices into contiguous blocks."""
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    return [range(start, min(start + block_size, n_paths)) for start in range(0, n_paths, block_size)]


def run_blocks(worker: Callable, tasks: List[tuple], n_workers: int = 1) -> list:
    """
    Map a top-level worker over block tasks, in order.

    Uses a spawn-context pool when n_workers > 1; results are returned in task
    order so concatenation is independent of the worker count.
    """
    if n_workers <= 1 or len(tasks) <= 1:
        return [worker(task) for task in tasks]
    mp_ctx = mp.get_context("spawn")
    with mp_ctx.Pool(processes=min(n_workers, len(tasks))) as pool:
        results = pool.map(worker, tasks)
    logger.debug("ran %d blocks on %d workers", len(tasks), n_workers)
    return results
