"""Discrete voter model on a cycle via the Harris graphical construction.

A single :class:`ArrowLog` drives the forward voter dynamics, the backward
coalescing dual and the interface (annihilating walk) dynamics, so the
pathwise identities between them can be asserted replicate by replicate.
Monte Carlo estimates use :class:`ArrowBatch`, the same construction padded
into ``(replicates, arrows)`` arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy import sparse, stats
from scipy.linalg import expm

from .stochastic_core import (
    Estimate,
    ParameterError,
    RangeError,
    RngStream,
    SizeError,
    TwoSided,
    as_generator,
    estimate,
    run_blocks,
    sample_poisson_events,
)

ARROW_RATE = 0.5  # per directed edge, 1/(2d) with d = 1
ORACLE_MAX_L = 12


@dataclass(frozen=True)
class SpinField:
    spins: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.spins, dtype=np.int8).copy()
        if s.ndim != 1:
            raise ParameterError("spins must be one-dimensional")
        if not np.all((s == 0) | (s == 1)):
            raise ParameterError("spins must be 0/1 valued")
        s.setflags(write=False)
        object.__setattr__(self, "spins", s)

    @property
    def L(self) -> int:
        return len(self.spins)

    @classmethod
    def constant(cls, L: int, value: int) -> "SpinField":
        return cls(np.full(L, value))

    @classmethod
    def block(cls, L: int, ones: Iterable[int]) -> "SpinField":
        s = np.zeros(L, dtype=np.int8)
        s[list(ones)] = 1
        return cls(s)

    @classmethod
    def heaviside(cls, L: int) -> "SpinField":
        return cls.block(L, range(L // 2))

    @classmethod
    def alternating(cls, L: int) -> "SpinField":
        return cls(np.arange(L) % 2 == 0)


@dataclass(frozen=True)
class ArrowLog:
    """Time-sorted arrows ``(time, src, dst)``: at ``time`` site ``dst`` copies ``src``."""

    L: int
    horizon: float
    times: np.ndarray = field(repr=False)
    src: np.ndarray = field(repr=False)
    dst: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.times)

    def as_batch(self) -> "ArrowBatch":
        return ArrowBatch(self.L, self.horizon, self.times[None, :], self.src[None, :], self.dst[None, :])


@dataclass(frozen=True)
class ArrowBatch:
    """Independent arrow logs stacked row-wise; padding arrows have time ``inf``."""

    L: int
    horizon: float
    times: np.ndarray = field(repr=False)
    src: np.ndarray = field(repr=False)
    dst: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.times.shape[0]

    def log(self, r: int) -> ArrowLog:
        keep = np.isfinite(self.times[r])
        return ArrowLog(self.L, self.horizon, self.times[r, keep], self.src[r, keep], self.dst[r, keep])


def _edge_endpoints(L: int, edge: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Directed edge 2x is x -> x+1, edge 2x+1 is x -> x-1.
    src = edge // 2
    step = np.where(edge % 2 == 0, 1, -1)
    return src, (src + step) % L


def _check_L(L: int) -> None:
    if L < 3:
        raise ParameterError(f"cycle needs at least 3 sites, got L={L}")


def build_graphical(L: int, horizon: float, rng) -> ArrowLog:
    """One rate-1/2 Poisson stream per directed edge, merged in time order."""
    _check_L(L)
    gen = as_generator(rng)
    times, edges = [], []
    if horizon > 0:
        for e in range(2 * L):
            ev = sample_poisson_events(ARROW_RATE, horizon, gen)
            times.append(ev.times)
            edges.append(np.full(len(ev), e))
    if not times:
        empty = np.empty(0)
        return ArrowLog(L, horizon, empty, empty.astype(np.int64), empty.astype(np.int64))
    t = np.concatenate(times)
    e = np.concatenate(edges)
    order = np.argsort(t, kind="stable")
    src, dst = _edge_endpoints(L, e[order])
    return ArrowLog(L, horizon, t[order], src, dst)


def build_graphical_batch(L: int, horizon: float, n: int, rng) -> ArrowBatch:
    """``n`` independent graphical constructions as padded arrays.

    Per-edge counts are Poisson(horizon/2); given the counts, event times are
    iid uniform, which is the same law as per-edge exponential gaps.
    """
    _check_L(L)
    gen = as_generator(rng)
    counts = gen.poisson(ARROW_RATE * horizon, size=(n, 2 * L))
    per_rep = counts.sum(axis=1)
    kmax = int(per_rep.max()) if n else 0
    times = np.full((n, kmax), np.inf)
    src = np.zeros((n, kmax), dtype=np.int64)
    dst = np.zeros((n, kmax), dtype=np.int64)
    total = int(per_rep.sum())
    if total:
        rep = np.repeat(np.arange(n), per_rep)
        edge = np.repeat(np.tile(np.arange(2 * L), n), counts.ravel())
        t = gen.uniform(0.0, horizon, size=total)
        order = np.lexsort((t, rep))
        rep, edge, t = rep[order], edge[order], t[order]
        start = np.concatenate(([0], np.cumsum(per_rep)[:-1]))
        col = np.arange(total) - start[rep]
        s, d = _edge_endpoints(L, edge)
        times[rep, col] = t
        src[rep, col] = s
        dst[rep, col] = d
    return ArrowBatch(L, horizon, times, src, dst)


def _check_time(t: float, horizon: float) -> None:
    if t > horizon:
        raise RangeError(f"t={t} exceeds the log horizon {horizon}")
    if t < 0:
        raise RangeError("t must be nonnegative")


def evolve_voter_batch(eta0: SpinField, batch: ArrowBatch, t: float) -> np.ndarray:
    """Spins at time ``t`` for every log in the batch, shape ``(n, L)``."""
    _check_time(t, batch.horizon)
    spins = np.tile(eta0.spins, (batch.n, 1))
    for k in range(batch.times.shape[1]):
        rows = np.nonzero(batch.times[:, k] <= t)[0]
        if rows.size == 0:
            continue
        spins[rows, batch.dst[rows, k]] = spins[rows, batch.src[rows, k]]
    return spins


def evolve_voter(eta0: SpinField, log: ArrowLog, t: float) -> SpinField:
    """Apply arrows with time ``<= t`` in order; each copies ``src`` onto ``dst``."""
    return SpinField(evolve_voter_batch(eta0, log.as_batch(), t)[0])


def trace_dual_batch(batch: ArrowBatch, t: float, sites) -> np.ndarray:
    sites = np.asarray(sorted(set(int(x) for x in sites)), dtype=np.int64)
    if sites.size == 0:
        raise ParameterError("dual needs at least one starting site")
    _check_time(t, batch.horizon)
    pos = np.tile(sites % batch.L, (batch.n, 1))
    for k in range(batch.times.shape[1] - 1, -1, -1):
        active = batch.times[:, k] <= t
        if not active.any():
            continue
        hit = active[:, None] & (pos == batch.dst[:, k][:, None])
        pos = np.where(hit, batch.src[:, k][:, None], pos)
    return pos


def trace_dual(log: ArrowLog, t: float, sites) -> np.ndarray:
    """Ancestor at time 0 of each site in ``sorted(sites)``, read backwards through ``log``.

    Walkers that land on the same ancestor have coalesced; the set-valued
    dual is ``np.unique`` of the result.  ``eta_t(x) == eta_0(ancestor(x))``
    holds pathwise when the forward dynamics use the same log.
    """
    return trace_dual_batch(log.as_batch(), t, sites)[0]


def interface_of(eta: SpinField | np.ndarray) -> np.ndarray:
    """Sorted edges ``x`` with ``eta(x) != eta(x+1)`` (indices mod L)."""
    s = eta.spins if isinstance(eta, SpinField) else np.asarray(eta)
    return np.nonzero(s != np.roll(s, -1))[0]


def _occupancy(L: int, sites) -> np.ndarray:
    occ = np.zeros(L, dtype=bool)
    occ[np.asarray(list(sites), dtype=np.int64) % L] = True
    return occ


def evolve_interface_batch(I0, batch: ArrowBatch, t: float) -> np.ndarray:
    """Interface occupancy ``(n, L)`` after driving particles with the arrows.

    An arrow ``x -> x+1`` moves a particle on edge ``x`` to edge ``x+1``; an
    arrow ``x+1 -> x`` moves a particle on edge ``x`` to edge ``x-1``.  A
    particle landing on an occupied edge annihilates with its occupant.
    """
    _check_time(t, batch.horizon)
    L = batch.L
    occ = np.tile(_occupancy(L, I0), (batch.n, 1))
    rows_all = np.arange(batch.n)
    for k in range(batch.times.shape[1]):
        active = batch.times[:, k] <= t
        if not active.any():
            continue
        s, d = batch.src[:, k], batch.dst[:, k]
        right = d == (s + 1) % L
        old = np.where(right, s, d)
        new = np.where(right, d, (d - 1) % L)
        move = active & occ[rows_all, old]
        r = rows_all[move]
        occ[r, old[move]] = False
        occ[r, new[move]] ^= True
    return occ


def evolve_interface_walks(I0, log: ArrowLog, t: float) -> np.ndarray:
    """Interface particles driven by ``log``; returns the sorted surviving edges."""
    return np.nonzero(evolve_interface_batch(I0, log.as_batch(), t)[0])[0]


# ---------------------------------------------------------------------------
# Independent dual simulations (not driven by arrow logs)


def coalescing_walks(L: int, sites, t: float, n: int, gen: np.random.Generator) -> np.ndarray:
    """Positions ``(n, m)`` at time ``t`` of coalescing rate-1 walks on the cycle.

    Each cluster jumps at rate 1 to a uniform neighbour; walkers sharing a
    site move together from then on.
    """
    start = np.asarray(sorted(set(int(x) % L for x in sites)), dtype=np.int64)
    m = start.size
    pos = np.tile(start, (n, 1))
    label = np.tile(np.arange(m), (n, 1))
    counts = gen.poisson(m * t, size=n)
    kmax = int(counts.max()) if n else 0
    pick = gen.integers(0, m, size=(n, kmax))
    step = gen.choice(np.array([-1, 1]), size=(n, kmax))
    rows = np.arange(n)
    for k in range(kmax):
        active = k < counts
        i = pick[:, k]
        leader = active & (label[rows, i] == i)
        moving = leader[:, None] & (label == i[:, None])
        pos = np.where(moving, (pos + step[:, k][:, None]) % L, pos)
        for a in range(m):
            for b in range(a + 1, m):
                merge = (label[:, b] == b) & (label[:, a] == a) & (pos[:, a] == pos[:, b])
                if merge.any():
                    label = np.where(merge[:, None] & (label == b), a, label)
    return pos


def annihilating_walks(L: int, I0, t: float, n: int, gen: np.random.Generator) -> np.ndarray:
    """Occupancy ``(n, L)`` of annihilating rate-1 walks on the edges of the cycle.

    Uniformized: every edge slot carries a rate-1 clock; a ring on an
    occupied slot moves that particle one step left or right.
    """
    occ = np.tile(_occupancy(L, I0), (n, 1))
    counts = gen.poisson(L * t, size=n)
    kmax = int(counts.max()) if n else 0
    slot = gen.integers(0, L, size=(n, kmax))
    step = gen.choice(np.array([-1, 1]), size=(n, kmax))
    rows = np.arange(n)
    for k in range(kmax):
        s = slot[:, k]
        move = (k < counts) & occ[rows, s]
        r = rows[move]
        new = (s[move] + step[move, k]) % L
        occ[r, s[move]] = False
        occ[r, new] ^= True
    return occ


def cyclic_interval(x: int, y: int, L: int) -> np.ndarray:
    """Edges ``x, x+1, ..., y-1`` walking clockwise (mod L)."""
    length = (y - x) % L
    return (x + np.arange(length)) % L


# ---------------------------------------------------------------------------
# Exact oracle


def _bits(L: int) -> np.ndarray:
    states = np.arange(1 << L, dtype=np.int64)
    return ((states[:, None] >> np.arange(L)) & 1).astype(np.int8)


def voter_generator(L: int) -> sparse.csr_matrix:
    """Sparse CTMC generator of the voter model on the L-cycle (bit x = spin at x)."""
    if L > ORACLE_MAX_L:
        raise SizeError(f"exact oracle limited to L <= {ORACLE_MAX_L}, got {L}")
    _check_L(L)
    bits = _bits(L)
    S = 1 << L
    rows, cols, vals = [], [], []
    states = np.arange(S, dtype=np.int64)
    for x in range(L):
        disagree = (bits[:, (x - 1) % L] != bits[:, x]).astype(float) + (bits[:, (x + 1) % L] != bits[:, x])
        rate = ARROW_RATE * disagree
        nz = rate > 0
        rows.append(states[nz])
        cols.append(states[nz] ^ (1 << x))
        vals.append(rate[nz])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    Q = sparse.csr_matrix((vals, (rows, cols)), shape=(S, S))
    exit_rate = np.asarray(Q.sum(axis=1)).ravel()
    return (Q - sparse.diags(exit_rate)).tocsr()


def _observable_vector(L: int, observable) -> np.ndarray:
    bits = _bits(L)
    if callable(observable):
        return np.asarray(observable(bits), dtype=float)
    sites = [int(x) % L for x in observable]
    return np.prod(bits[:, sites], axis=1).astype(float) if sites else np.ones(1 << L)


def _state_index(eta0: SpinField) -> int:
    return int(np.sum(eta0.spins.astype(np.int64) << np.arange(eta0.L)))


def exact_oracle(eta0: SpinField, observable, t: float, tol: float = 1e-8) -> float:
    """``E[observable(eta_t)]`` by uniformization of the voter generator.

    ``observable`` is either an iterable of sites (product of spins) or a
    callable mapping a ``(2**L, L)`` array of configurations to values.  The
    Poisson series is truncated once the neglected weight is below ``tol``
    (relative to ``max |observable|``).
    """
    L = eta0.L
    Q = voter_generator(L)
    f = _observable_vector(L, observable)
    s0 = _state_index(eta0)
    if t == 0:
        return float(f[s0])
    lam = float(-Q.diagonal().min())
    if lam == 0:
        return float(f[s0])
    P = sparse.identity(Q.shape[0], format="csr") + Q / lam
    mu = lam * t
    scale = max(1.0, float(np.abs(f).max()))
    kmax = int(stats.poisson.isf(tol / scale, mu)) + 1
    weights = stats.poisson.pmf(np.arange(kmax + 1), mu)
    v = f.copy()
    total = weights[0] * v[s0]
    for k in range(1, kmax + 1):
        v = P @ v
        total += weights[k] * v[s0]
    return float(total)


def exact_oracle_expm(eta0: SpinField, observable, t: float) -> float:
    """Dense matrix-exponential cross-check of :func:`exact_oracle` (small L only)."""
    L = eta0.L
    Q = voter_generator(L).toarray()
    f = _observable_vector(L, observable)
    return float((expm(Q * t) @ f)[_state_index(eta0)])


def agree_indicator(x: int, y: int) -> Callable[[np.ndarray], np.ndarray]:
    return lambda bits: (bits[:, x] == bits[:, y]).astype(float)


# ---------------------------------------------------------------------------
# Monte Carlo duality checks


def check_voter_duality(
    eta0: SpinField, A, t: float, N: int, rng: RngStream, block_size: int = 20000, workers=None
) -> TwoSided:
    """Both sides of the voter / coalescing-walk moment duality.

    LHS averages ``prod_{x in A} eta_t(x)`` over fresh graphical constructions;
    RHS averages ``prod_{y in dual} eta_0(y)`` over independently simulated
    coalescing walks started from ``A``.
    """
    A = sorted(set(int(x) % eta0.L for x in A))
    if not A:
        raise ParameterError("A must be nonempty")
    L = eta0.L

    def lhs_kernel(n, gen):
        spins = evolve_voter_batch(eta0, build_graphical_batch(L, t, n, gen), t)
        return np.prod(spins[:, A], axis=1)

    def rhs_kernel(n, gen):
        pos = coalescing_walks(L, A, t, n, gen)
        return np.prod(eta0.spins[pos], axis=1)

    lhs = estimate(run_blocks(lhs_kernel, N, rng.child(0), block_size, workers))
    rhs = estimate(run_blocks(rhs_kernel, N, rng.child(1), block_size, workers))
    ref = exact_oracle(eta0, A, t) if L <= ORACLE_MAX_L else None
    return TwoSided(lhs, rhs, ref)


def parity_duality_check(
    eta0: SpinField, x: int, y: int, t: float, N: int, rng: RngStream, block_size: int = 20000, workers=None
) -> TwoSided:
    """Interface parity duality on the cycle.

    LHS: probability that annihilating walks started from ``interface_of(eta0)``
    leave an even number of particles on the clockwise edge interval
    ``[x, y-1]``.  RHS: probability that ``eta_t(x) == eta_t(y)``.
    """
    if not x < y:
        raise ParameterError("need x < y")
    L = eta0.L
    I0 = interface_of(eta0)
    window = cyclic_interval(x, y, L)

    def lhs_kernel(n, gen):
        occ = annihilating_walks(L, I0, t, n, gen)
        return (occ[:, window].sum(axis=1) % 2 == 0).astype(float)

    def rhs_kernel(n, gen):
        spins = evolve_voter_batch(eta0, build_graphical_batch(L, t, n, gen), t)
        return (spins[:, x % L] == spins[:, y % L]).astype(float)

    lhs = estimate(run_blocks(lhs_kernel, N, rng.child(0), block_size, workers))
    rhs = estimate(run_blocks(rhs_kernel, N, rng.child(1), block_size, workers))
    ref = exact_oracle(eta0, agree_indicator(x % L, y % L), t) if L <= ORACLE_MAX_L else None
    return TwoSided(lhs, rhs, ref)


# ---------------------------------------------------------------------------
# Clustering


def _voter_on_grid(eta0: SpinField, t_grid, n: int, gen: np.random.Generator) -> np.ndarray:
    """Spins ``(n, len(t_grid), L)`` at increasing grid times (uniformized arrows)."""
    L = eta0.L
    spins = np.tile(eta0.spins, (n, 1))
    out = np.empty((n, len(t_grid), L), dtype=np.int8)
    rows = np.arange(n)
    prev = 0.0
    for g, tg in enumerate(t_grid):
        counts = gen.poisson(L * (tg - prev), size=n)
        kmax = int(counts.max()) if n else 0
        edge = gen.integers(0, 2 * L, size=(n, kmax))
        for k in range(kmax):
            r = rows[k < counts]
            s, d = _edge_endpoints(L, edge[r, k])
            spins[r, d] = spins[r, s]
        out[:, g] = spins
        prev = tg
    return out


def meeting_probability(L: int, x: int, y: int, t: float) -> float:
    """``P(tau <= t)`` for two independent rate-1 walks on the L-cycle started at x, y.

    The difference walk jumps +-1 at rate 1 each; computed exactly from the
    L-state chain with 0 made absorbing.
    """
    Q = np.zeros((L, L))
    for d in range(1, L):
        for step in (-1, 1):
            Q[d, (d + step) % L] += 1.0
        Q[d, d] = -2.0
    d0 = (y - x) % L
    return float(expm(Q * t)[d0, 0])


@dataclass(frozen=True)
class ClusteringCurve:
    t_grid: np.ndarray
    agree: list[Estimate]
    lower_bound: np.ndarray


def clustering_curve(eta0: SpinField, x: int, y: int, t_grid, N: int, rng: RngStream, workers=None) -> ClusteringCurve:
    """``P(eta_t(x) == eta_t(y))`` on a time grid with the meeting-time lower bound."""
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) < 0) or t_grid[0] < 0:
        raise ParameterError("t_grid must be nondecreasing and nonnegative")
    L = eta0.L

    def kernel(n, gen):
        spins = _voter_on_grid(eta0, t_grid, n, gen)
        return (spins[:, :, x % L] == spins[:, :, y % L]).astype(float)

    samples = run_blocks(kernel, N, rng, 2000, workers)
    agree = [estimate(samples[:, g]) for g in range(len(t_grid))]
    bound = np.array([meeting_probability(L, x, y, tg) if x % L != y % L else 1.0 for tg in t_grid])
    return ClusteringCurve(t_grid, agree, bound)


def simple_walk_law(L: int, x: int, t: float, tol: float = 1e-12) -> np.ndarray:
    """Exact law on the L-cycle of a rate-1 simple random walk from x at time t.

    Poisson(t) number of jumps, each +-1 with probability 1/2, folded mod L.
    """
    kmax = int(stats.poisson.isf(tol, t)) + 1
    law = np.zeros(L)
    step = np.zeros(L)
    step[1 % L] += 0.5
    step[-1 % L] += 0.5
    cur = np.zeros(L)
    cur[x % L] = 1.0
    for k in range(kmax + 1):
        law += stats.poisson.pmf(k, t) * cur
        cur = np.real(np.fft.ifft(np.fft.fft(cur) * np.fft.fft(step)))
    return law / law.sum()


__all__ = [
    "SpinField",
    "ArrowLog",
    "ArrowBatch",
    "build_graphical",
    "build_graphical_batch",
    "evolve_voter",
    "evolve_voter_batch",
    "trace_dual",
    "trace_dual_batch",
    "interface_of",
    "evolve_interface_walks",
    "evolve_interface_batch",
    "coalescing_walks",
    "annihilating_walks",
    "check_voter_duality",
    "parity_duality_check",
    "exact_oracle",
    "exact_oracle_expm",
    "clustering_curve",
    "meeting_probability",
    "simple_walk_law",
]
