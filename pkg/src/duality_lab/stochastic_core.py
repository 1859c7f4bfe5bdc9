"""Seeded randomness, Poisson clocks, correlated Gaussians and small statistics helpers.

Every simulator in the package draws from an :class:`RngStream`.  A stream is
addressed by ``(master_seed, key)`` and is backed by the counter-based Philox
bit generator, so any stream can be recreated independently of how many other
streams exist or in which order they were consumed.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats


class ParameterError(ValueError):
    """Invalid numeric parameter (rate, horizon, correlation, ...)."""


class RangeError(ValueError):
    """Requested time lies outside the simulated window."""


class SizeError(ValueError):
    """Problem size exceeds a hard cap (state space, particle count)."""


class DomainError(ValueError):
    """Parameter outside the domain on which a formula is defined."""


class PreconditionError(ValueError):
    """Input violates a structural precondition of an operation."""


MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    """Independently addressable random stream.

    ``key`` is the stream id path: ``RngStream(seed, 3).child(7)`` has key
    ``(3, 7)``.  Identical ``(master_seed, key)`` pairs give bit-identical draws.
    """

    master_seed: int
    stream_id: int | tuple[int, ...] = 0

    @property
    def key(self) -> tuple[int, ...]:
        if isinstance(self.stream_id, tuple):
            return tuple(int(k) & MASK64 for k in self.stream_id)
        return (int(self.stream_id) & MASK64,)

    def child(self, index: int) -> "RngStream":
        return RngStream(self.master_seed, self.key + (int(index) & MASK64,))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(int(self.master_seed) & MASK64, spawn_key=self.key)
        return np.random.Generator(np.random.Philox(seq))


def as_generator(rng: RngStream | np.random.Generator | int | None) -> np.random.Generator:
    """Accept a stream, a ready generator or a plain seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if rng is None:
        return RngStream(0).generator()
    return RngStream(int(rng)).generator()


# ---------------------------------------------------------------------------
# Poisson clocks


@dataclass(frozen=True)
class PoissonEvents:
    rate: float
    horizon: float
    times: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.times)


def sample_poisson_events(rate: float, horizon: float, rng) -> PoissonEvents:
    """Event times of a homogeneous Poisson process on ``[0, horizon]``.

    Built from cumulative exponential gaps.  A zero-length window is allowed
    and yields no events.
    """
    if not rate > 0:
        raise ParameterError(f"rate must be positive, got {rate!r}")
    if not horizon >= 0:
        raise ParameterError(f"horizon must be nonnegative, got {horizon!r}")
    gen = as_generator(rng)
    if horizon == 0:
        return PoissonEvents(rate, horizon, np.empty(0))
    chunk = max(16, int(rate * horizon + 6 * math.sqrt(rate * horizon) + 8))
    pieces = []
    t = 0.0
    while True:
        gaps = gen.exponential(1.0 / rate, size=chunk)
        times = t + np.cumsum(gaps)
        inside = times[times <= horizon]
        pieces.append(inside)
        if len(inside) < chunk:
            break
        t = times[-1]
    return PoissonEvents(rate, horizon, np.concatenate(pieces))


# ---------------------------------------------------------------------------
# Gaussians


def gaussian_pair(rho: float, rng, size=None) -> tuple[np.ndarray, np.ndarray]:
    """Standard normal pair with correlation ``rho``.

    ``xi2 = rho * xi1 + sqrt(1 - rho**2) * xi_perp``; for ``|rho| = 1`` the
    second component is exactly ``rho * xi1``.
    """
    if not -1.0 <= rho <= 1.0:
        raise ParameterError(f"correlation must lie in [-1, 1], got {rho!r}")
    gen = as_generator(rng)
    xi1 = gen.standard_normal(size)
    if abs(rho) == 1.0:
        return xi1, rho * xi1
    xi_perp = gen.standard_normal(size)
    return xi1, rho * xi1 + math.sqrt(1.0 - rho * rho) * xi_perp


def bridge_crossing_prob(a, b, dt, diffusivity):
    """Probability that a Brownian bridge from ``a`` to ``b`` over ``dt`` touches 0.

    ``diffusivity`` is the variance rate of the bridging motion; the gap
    between two independent standard Brownian motions has diffusivity 2.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a <= 0) or np.any(b <= 0):
        raise ParameterError("gap endpoints must be positive")
    if not dt > 0 or not diffusivity > 0:
        raise ParameterError("dt and diffusivity must be positive")
    p = np.exp(-2.0 * a * b / (diffusivity * dt))
    return float(p) if p.ndim == 0 else p


def crossing_prob_unchecked(a: np.ndarray, b: np.ndarray, dt: float, diffusivity: float) -> np.ndarray:
    # Gaps that changed sign (or touch zero) have crossed with certainty.
    out = np.ones(np.broadcast(a, b).shape)
    pos = (a > 0) & (b > 0)
    out[pos] = np.exp(-2.0 * (a * b)[pos] / (diffusivity * dt))
    return out


# ---------------------------------------------------------------------------
# Estimates


Z95 = 1.959963984540054


@dataclass(frozen=True)
class Estimate:
    """Monte Carlo mean with its standard error."""

    value: float
    stderr: float
    n: int

    @property
    def ci95(self) -> tuple[float, float]:
        return (self.value - Z95 * self.stderr, self.value + Z95 * self.stderr)

    def overlaps(self, other: "Estimate") -> bool:
        lo1, hi1 = self.ci95
        lo2, hi2 = other.ci95
        return lo1 <= hi2 and lo2 <= hi1

    def zscore(self, target: float) -> float:
        if self.stderr == 0:
            return 0.0 if self.value == target else math.inf
        return abs(self.value - target) / self.stderr

    def within(self, target: float, k: float = 3.0) -> bool:
        return abs(self.value - target) <= k * self.stderr + 1e-12


def estimate(samples) -> Estimate:
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n == 0:
        raise ParameterError("no samples")
    sd = float(np.std(x, ddof=1)) if n > 1 else 0.0
    return Estimate(float(np.mean(x)), sd / math.sqrt(n), n)


def difference_z(a: Estimate, b: Estimate) -> float:
    se = math.hypot(a.stderr, b.stderr)
    if se == 0:
        return 0.0 if a.value == b.value else math.inf
    return abs(a.value - b.value) / se


def mann_kendall(y: Sequence[float]) -> tuple[float, float]:
    """Mann-Kendall trend statistic ``(tau, two-sided p)`` against index order."""
    y = np.asarray(y, dtype=float)
    res = stats.kendalltau(np.arange(len(y)), y)
    return float(res.statistic), float(res.pvalue)


# ---------------------------------------------------------------------------
# Replicate scheduling

DEFAULT_BLOCK = 2000
_block_cap: int | None = None


class block_cap:
    """Context manager capping every block size (used to force several blocks in small runs)."""

    def __init__(self, cap: int):
        self.cap = int(cap)

    def __enter__(self):
        global _block_cap
        self.prev, _block_cap = _block_cap, self.cap
        return self

    def __exit__(self, *exc):
        global _block_cap
        _block_cap = self.prev
        return False


def worker_count(default: int = 1) -> int:
    env = os.environ.get("DUALITY_LAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return default


def run_blocks(
    kernel: Callable[[int, np.random.Generator], np.ndarray],
    n_replicates: int,
    rng: RngStream,
    block_size: int = DEFAULT_BLOCK,
    workers: int | None = None,
) -> np.ndarray:
    """Run ``kernel(n, gen)`` over fixed replicate blocks and stack the results.

    Block ``k`` always receives the stream ``rng.child(k)``, and outputs are
    concatenated in block order, so the result does not depend on the number
    of workers.
    """
    if n_replicates <= 0:
        raise ParameterError("n_replicates must be positive")
    if _block_cap is not None:
        block_size = min(block_size, _block_cap)
    sizes = [block_size] * (n_replicates // block_size)
    if n_replicates % block_size:
        sizes.append(n_replicates % block_size)
    workers = worker_count() if workers is None else max(1, workers)

    def job(k: int) -> np.ndarray:
        return np.asarray(kernel(sizes[k], rng.child(k).generator()))

    if workers == 1 or len(sizes) == 1:
        parts = [job(k) for k in range(len(sizes))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, range(len(sizes))))
    return np.concatenate(parts, axis=0)


@dataclass(frozen=True)
class TwoSided:
    """Both sides of a duality identity, each estimated independently."""

    lhs: Estimate
    rhs: Estimate
    reference: float | None = None

    @property
    def overlapping(self) -> bool:
        return self.lhs.overlaps(self.rhs)

    @property
    def z(self) -> float:
        return difference_z(self.lhs, self.rhs)
