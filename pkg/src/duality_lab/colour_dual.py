"""Coloured random walks, collision local times and the colour measure.

Colourings ``b`` in ``{1, 2}^n`` are indexed by ``sum_i (b_i - 1) 2^i``.
Walkers live on the lattice of ``sbm`` (spacing ``dx``) and jump at rate
``1/(2 dx^2)`` to each neighbour, matching the generator ``Lap/2``.  The
collision local time of a pair is its co-location time divided by ``dx``;
for ``dx = 1`` it is the plain co-location time.  A same-coloured
co-located pair flips one member at rate ``gamma`` per unit local time.
"""
from __future__ import annotations

import csv
import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field

import mpmath
import numpy as np
from scipy import sparse
from scipy.linalg import expm
from scipy.sparse.linalg import expm_multiply

from . import interface as ip
from .sbm import PERIODIC, ZERO_FLUX, DEFAULT_DT, DEFAULT_DX, SbmParams, heat_generator, run_paths
from .stochastic_core import (
    DomainError,
    Estimate,
    ParameterError,
    PreconditionError,
    RngStream,
    SizeError,
    TwoSided,
    as_generator,
    estimate,
    run_blocks,
)

log = logging.getLogger(__name__)

MAX_WALKERS = 12
MAX_DUALITY_WALKERS = 4
HEAVY_TAIL_CV = 10.0


class HeavyTailWarning(UserWarning):
    """Exponential weights with empirical coefficient of variation above 10."""


def _check_n(n: int, cap: int = MAX_WALKERS) -> None:
    if n < 1:
        raise ParameterError("need at least one walker")
    if n > cap:
        raise SizeError(f"n={n} exceeds the cap {cap}")


def colouring_index(b) -> int:
    return int(sum((int(bi) - 1) << i for i, bi in enumerate(b)))


def colouring_of(index: int, n: int) -> tuple[int, ...]:
    return tuple(1 + ((index >> i) & 1) for i in range(n))


def pair_list(n: int) -> list[tuple[int, int]]:
    return list(itertools.combinations(range(n), 2))


# ---------------------------------------------------------------------------
# Walkers and ledgers


@dataclass
class LocalTimeLedger:
    """Pairwise collision local times and their split by colour agreement."""

    L_pair: np.ndarray
    L_eq: float = 0.0
    L_neq: float = 0.0

    @classmethod
    def empty(cls, n: int) -> "LocalTimeLedger":
        return cls(np.zeros((n, n)))

    @property
    def total(self) -> float:
        return float(np.triu(self.L_pair, 1).sum())


@dataclass
class ColouredWalkers:
    n: int
    positions: np.ndarray
    colours: np.ndarray
    ledger: LocalTimeLedger


@dataclass(frozen=True)
class DualBatch:
    """Terminal state of ``N`` coloured-dual runs.

    ``L_pair`` has shape ``(N, P)`` over the pairs of :func:`pair_list`.
    """

    positions: np.ndarray
    colours: np.ndarray
    L_eq: np.ndarray
    L_neq: np.ndarray
    L_pair: np.ndarray
    flips: np.ndarray

    def walkers(self, r: int) -> ColouredWalkers:
        n = self.positions.shape[1]
        Lp = np.zeros((n, n))
        for k, (i, j) in enumerate(pair_list(n)):
            Lp[i, j] = Lp[j, i] = self.L_pair[r, k]
        return ColouredWalkers(n, self.positions[r].copy(), self.colours[r].copy(),
                               LocalTimeLedger(Lp, float(self.L_eq[r]), float(self.L_neq[r])))

    def weights(self, gamma: float, rho: float) -> np.ndarray:
        return np.exp(gamma * (self.L_eq + rho * self.L_neq))


def _move(pos, step, L, boundary):
    new = pos + step
    if L is None:
        return new
    if boundary == PERIODIC:
        return np.mod(new, L)
    return np.clip(new, 0, L - 1)


def simulate_coloured_dual(
    x, c, gamma: float, rho: float, t: float, rng, N: int = 1,
    L: int | None = None, dx: float = 1.0, boundary: str = PERIODIC,
) -> DualBatch:
    """Event-driven coloured walkers, ``N`` independent runs in lockstep.

    ``L=None`` is the infinite lattice; otherwise sites ``0..L-1`` with a
    periodic or reflecting (``zero-flux``) boundary.
    """
    x = np.asarray(x, dtype=np.int64)
    c = np.asarray(c, dtype=np.int8)
    n = x.size
    _check_n(n)
    if c.shape != x.shape or not np.all((c == 1) | (c == 2)):
        raise ParameterError("colours must be 1 or 2, one per walker")
    if not -1.0 <= rho <= 1.0:
        raise ParameterError("rho must lie in [-1, 1]")
    if gamma < 0 or t < 0:
        raise ParameterError("gamma and t must be nonnegative")
    gen = as_generator(rng)
    pairs = np.array(pair_list(n), dtype=np.int64).reshape(-1, 2)
    P = len(pairs)
    pos = np.tile(x, (N, 1))
    col = np.tile(c, (N, 1))
    now = np.zeros(N)
    Leq = np.zeros(N)
    Lneq = np.zeros(N)
    Lp = np.zeros((N, P))
    flips = np.zeros(N, dtype=np.int64)
    walk_rate = n / dx**2
    flip_rate = gamma / dx
    act = np.arange(N)
    while act.size:
        p = pos[act]
        cl = col[act]
        if P:
            co = p[:, pairs[:, 0]] == p[:, pairs[:, 1]]
            same = cl[:, pairs[:, 0]] == cl[:, pairs[:, 1]]
            fr = flip_rate * (co & same)
        else:
            co = same = np.zeros((act.size, 0), bool)
            fr = np.zeros((act.size, 0))
        R = walk_rate + fr.sum(axis=1)
        tau = gen.exponential(1.0, act.size) / R
        remaining = t - now[act]
        h = np.minimum(tau, remaining)
        Lp[act] += co * (h / dx)[:, None]
        Leq[act] += (co & same).sum(axis=1) * h / dx
        Lneq[act] += (co & ~same).sum(axis=1) * h / dx
        now[act] += h
        go = tau < remaining  # event happens before the horizon
        idx = act[go]
        if idx.size:
            u = gen.random(idx.size) * R[go]
            walk = u < walk_rate
            wi = idx[walk]
            if wi.size:
                who = gen.integers(0, n, wi.size)
                step = np.where(gen.random(wi.size) < 0.5, -1, 1)
                pos[wi, who] = _move(pos[wi, who], step, L, boundary)
            fi = np.nonzero(~walk)[0]
            if fi.size:
                cum = np.cumsum(fr[go][fi], axis=1)
                target = (u[fi] - walk_rate)[:, None]
                k = np.minimum((cum <= target).sum(axis=1), P - 1)
                member = np.where(gen.random(fi.size) < 0.5, pairs[k, 0], pairs[k, 1])
                rows = idx[fi]
                col[rows, member] = 3 - col[rows, member]
                flips[rows] += 1
        act = act[go]
    return DualBatch(pos, col, Leq, Lneq, Lp, flips)


def flip_probability_exact(gamma: float, t: float, dx: float = 1.0, L: int = 32, boundary: str = PERIODIC, x: int = 0) -> float:
    """``P(at least one flip by t)`` for two walkers started together at ``x`` with equal colours.

    With two walkers only the first flip can happen, so this is
    ``1 - E[exp(-gamma * local time)]``, a Feynman-Kac expectation on the
    pair chain.
    """
    Q = heat_generator(L, dx, boundary)
    I = sparse.identity(L, format="csr")
    A = sparse.kron(Q, I) + sparse.kron(I, Q)
    diag = np.zeros(L * L)
    diag[np.arange(L) * L + np.arange(L)] = gamma / dx
    A = (A - sparse.diags(diag)).tocsc()
    v = expm_multiply(A * t, np.ones(L * L))
    return float(1.0 - v[x * L + x])


# ---------------------------------------------------------------------------
# Moment duality


def _colour_values(u0, v0, pos, col) -> np.ndarray:
    vals = np.where(col == 1, np.asarray(u0)[pos], np.asarray(v0)[pos])
    return vals.prod(axis=-1)


@dataclass(frozen=True)
class MomentDualityResult:
    check: TwoSided
    weight_cv: float

    @property
    def heavy_tail(self) -> bool:
        return self.weight_cv > HEAVY_TAIL_CV


def check_moment_duality(
    u0, v0, x, c, gamma: float, rho: float, t: float, N: int, rng: RngStream,
    dx: float = DEFAULT_DX, dt: float = DEFAULT_DT, boundary: str = PERIODIC, workers=None,
) -> MomentDualityResult:
    """Both sides of the moment duality on the lattice.

    LHS: ``prod_i (u_t, v_t)^(c_i)(x_i)`` over SBM runs.  RHS:
    ``(u0, v0)^(C_t)(X_t) * exp(gamma (L_eq + rho L_neq))`` over dual runs.
    """
    u0 = np.asarray(u0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    x = np.asarray(x, dtype=np.int64)
    c = np.asarray(c, dtype=np.int8)
    _check_n(x.size, MAX_DUALITY_WALKERS)
    L = u0.size
    params = SbmParams(rho, gamma, dt, dx)

    def lhs_kernel(n, gen):
        end = run_paths(u0, v0, params, t, boundary, n, gen)
        vals = np.where(c == 1, end.u[:, x], end.v[:, x])
        return vals.prod(axis=1)

    def rhs_kernel(n, gen):
        d = simulate_coloured_dual(x, c, gamma, rho, t, gen, n, L, dx, boundary)
        w = d.weights(gamma, rho)
        return np.stack([_colour_values(u0, v0, d.positions, d.colours) * w, w], axis=1)

    lhs = run_blocks(lhs_kernel, N, rng.child(0), workers=workers)
    rhs = run_blocks(rhs_kernel, N, rng.child(1), block_size=10000, workers=workers)
    w = rhs[:, 1]
    cv = float(np.std(w) / np.mean(w)) if np.mean(w) > 0 else 0.0
    if cv > HEAVY_TAIL_CV:
        warnings.warn(f"exponential weight CV {cv:.1f} > {HEAVY_TAIL_CV}", HeavyTailWarning, stacklevel=2)
    return MomentDualityResult(TwoSided(estimate(lhs), estimate(rhs[:, 0])), cv)


def colour_pair_operator(n: int, i: int, j: int, rho: float) -> sparse.csr_matrix:
    """Backward colour operator of one co-located pair, per unit ``gamma`` and local time.

    ``(B f)(b) = (f(b^i) + f(b^j)) / 2`` if ``b_i = b_j``, else ``rho f(b)``.
    """
    size = 1 << n
    rows, cols, vals = [], [], []
    for k in range(size):
        bi, bj = (k >> i) & 1, (k >> j) & 1
        if bi == bj:
            rows += [k, k]
            cols += [k ^ (1 << i), k ^ (1 << j)]
            vals += [0.5, 0.5]
        elif rho != 0:
            rows.append(k)
            cols.append(k)
            vals.append(rho)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(size, size))


def moment_dual_exact(
    u0, v0, x, c, gamma: float, rho: float, t: float, dx: float = DEFAULT_DX, boundary: str = PERIODIC,
    max_states: int = 20000,
) -> float:
    """Exact value of the dual side by Feynman-Kac on positions times colourings.

    The state space has ``L^n 2^n`` points; only small ``n`` and ``L`` fit.
    """
    u0 = np.asarray(u0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    x = np.asarray(x, dtype=np.int64)
    n, L = x.size, u0.size
    size = L**n * (1 << n)
    if size > max_states:
        raise SizeError(f"state space {size} exceeds {max_states}")
    Q = heat_generator(L, dx, boundary)
    IL = sparse.identity(L, format="csr")
    IC = sparse.identity(1 << n, format="csr")
    walk = None
    for i in range(n):
        term = sparse.identity(1, format="csr")
        for k in range(n):
            term = sparse.kron(term, Q if k == i else IL, format="csr")
        walk = term if walk is None else walk + term
    A = sparse.kron(walk, IC, format="csr")
    grids = np.indices((L,) * n).reshape(n, -1).T  # position tuples in kron order
    for i, j in pair_list(n):
        ind = (grids[:, i] == grids[:, j]).astype(float)
        A = A + (gamma / dx) * sparse.kron(sparse.diags(ind), colour_pair_operator(n, i, j, rho), format="csr")
    cols = np.array([colouring_of(k, n) for k in range(1 << n)])
    f = np.empty((grids.shape[0], 1 << n))
    for k in range(1 << n):
        f[:, k] = _colour_values(u0, v0, grids, np.broadcast_to(cols[k], grids.shape))
    v = expm_multiply(A.tocsc() * t, f.ravel())
    pidx = int(np.ravel_multi_index(tuple(x), (L,) * n))
    return float(v[pidx * (1 << n) + colouring_index(c)])


def second_moment_exact(rho: float, gamma: float, t: float, L: int = 64, dx: float = DEFAULT_DX) -> float:
    """``E[u_t(x)^2]`` from ``u = v = 1`` on a torus, through the two-walker dual.

    Only the walkers' difference matters, so the computation runs on the
    difference chain (rate ``1/dx^2`` per direction) with the colour pair
    ``{(1,1), (1,2)+(2,1)}`` attached.
    """
    Q = 2.0 * heat_generator(L, dx, PERIODIC)
    I2 = sparse.identity(2, format="csr")
    at0 = np.zeros(L)
    at0[0] = 1.0
    # backward operator on (f_equal, f_unequal): equal -> unequal at full rate, unequal weighted by rho
    B = sparse.csr_matrix(np.array([[0.0, 1.0], [0.0, rho]]))
    A = sparse.kron(Q, I2) + (gamma / dx) * sparse.kron(sparse.diags(at0), B)
    v = expm_multiply(A.tocsc() * t, np.ones(2 * L))
    return float(v[0])


# ---------------------------------------------------------------------------
# Fixed paths and the colour measure


@dataclass(frozen=True)
class WalkPath:
    """Piecewise-constant positions: ``positions[k]`` holds on ``[times[k], times[k+1])``."""

    times: np.ndarray
    positions: np.ndarray
    horizon: float
    dx: float = 1.0

    @property
    def n(self) -> int:
        return self.positions.shape[1]

    def segments(self):
        """``(start, local_time_length, co-located pairs)`` for each constant piece."""
        ends = np.append(self.times[1:], self.horizon)
        out = []
        pl = pair_list(self.n)
        for s, e, p in zip(self.times, ends, self.positions):
            pairs = tuple((i, j) for i, j in pl if p[i] == p[j])
            out.append((float(s), float(e - s) / self.dx, pairs))
        return out

    def local_times(self) -> np.ndarray:
        """Total local time per pair of :func:`pair_list`."""
        pl = pair_list(self.n)
        out = np.zeros(len(pl))
        for _, ell, pairs in self.segments():
            for pr in pairs:
                out[pl.index(pr)] += ell
        return out


def sample_walk_path(x, t: float, rng, L: int | None = None, dx: float = 1.0, boundary: str = PERIODIC) -> WalkPath:
    """One path of ``n`` independent walkers (no colours)."""
    x = np.asarray(x, dtype=np.int64)
    n = x.size
    _check_n(n)
    gen = as_generator(rng)
    rate = n / dx**2
    k = gen.poisson(rate * t)
    times = np.sort(gen.random(k) * t)
    who = gen.integers(0, n, k)
    step = np.where(gen.random(k) < 0.5, -1, 1)
    pos = [x.copy()]
    cur = x.copy()
    for w, s in zip(who, step):
        cur = cur.copy()
        cur[w] = _move(cur[w], s, L, boundary)
        pos.append(cur)
    return WalkPath(np.concatenate([[0.0], times]), np.array(pos), float(t), dx)


def colour_generator(n: int, pairs, gamma: float, rho: float) -> sparse.csr_matrix:
    """Forward generator ``G`` with ``dM/dL = G M`` for the given co-located pairs.

    Per pair: ``dM(b) = gamma rho 1{b_i != b_j} M(b) + gamma/2 1{b_i != b_j} (M(b^i) + M(b^j))``.
    """
    size = 1 << n
    G = sparse.csr_matrix((size, size))
    for i, j in pairs:
        G = G + gamma * colour_pair_operator(n, i, j, rho).T
    return G.tocsr()


@dataclass(frozen=True)
class ColourTrajectory:
    """``weights[k]`` is the colour measure at ``times[k]``."""

    n: int
    times: np.ndarray
    weights: np.ndarray

    def at(self, t: float) -> np.ndarray:
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.weights[max(k, 0)]


def _mp_expm_apply(G, ell, vec, dps):
    with mpmath.workdps(dps):
        A = mpmath.matrix(G.toarray().tolist()) * mpmath.mpf(ell)
        E = mpmath.expm(A)
        out = E * mpmath.matrix([mpmath.mpf(v) for v in vec])
        return [out[i] for i in range(len(vec))]


def evolve_colour_measure(
    path: WalkPath, c, gamma: float, rho: float, precision: int | None = None,
):
    """Exact colour measure along a fixed path, one matrix exponential per piece.

    With ``precision`` (decimal digits) the arithmetic runs in mpmath and
    the returned weights are mpmath numbers; this resolves the tiny
    distances met at large ``gamma``.
    """
    c = tuple(int(v) for v in c)
    n = len(c)
    if n != path.n:
        raise ParameterError("colour vector does not match the path")
    _check_n(n)
    if precision is not None and n > 4:
        raise SizeError("high-precision evolution is limited to n <= 4")
    M = np.zeros(1 << n)
    M[colouring_index(c)] = 1.0
    Mp = None
    if precision is not None:
        with mpmath.workdps(precision):
            Mp = [mpmath.mpf(v) for v in M]
    times = [0.0]
    out = [Mp if Mp is not None else M.copy()]
    cache = {}
    for s, ell, pairs in path.segments():
        if pairs and ell > 0 and gamma > 0:
            G = cache.get(pairs)
            if G is None:
                G = cache[pairs] = colour_generator(n, pairs, gamma, rho)
            if precision is None:
                M = expm_multiply(G.tocsc() * ell, M) if n > 6 else expm(G.toarray() * ell) @ M
            else:
                Mp = _mp_expm_apply(G, ell, Mp, precision)
        times.append(s + ell * path.dx)
        out.append(list(Mp) if precision is not None else M.copy())
    if precision is None:
        return ColourTrajectory(n, np.array(times), np.array(out))
    return ColourTrajectory(n, np.array(times), np.array(out, dtype=object))


def conditional_colour_mc(path: WalkPath, c, gamma: float, rho: float, N: int, rng) -> list[Estimate]:
    """Monte Carlo of ``E[1{C_t = b} exp(gamma (L_eq + rho L_neq)) | path]`` per colouring ``b``."""
    c = np.asarray(c, dtype=np.int8)
    n = c.size
    gen = as_generator(rng)
    col = np.tile(c, (N, 1))
    logw = np.zeros(N)
    for _, ell, pairs in path.segments():
        if not pairs or ell <= 0:
            continue
        pr = np.array(pairs)
        left = np.full(N, ell)
        act = np.arange(N)
        while act.size:
            cl = col[act]
            same = cl[:, pr[:, 0]] == cl[:, pr[:, 1]]
            rate = gamma * same.sum(axis=1)
            tau = np.where(rate > 0, gen.exponential(1.0, act.size) / np.where(rate > 0, rate, 1), np.inf)
            h = np.minimum(tau, left[act])
            logw[act] += gamma * h * (same.sum(axis=1) + rho * (~same).sum(axis=1))
            left[act] -= h
            ev = tau < left[act] + h  # flip happened inside the piece
            ev &= left[act] > 0
            idx = act[ev]
            if idx.size:
                s = same[ev]
                k = (gen.random(idx.size)[:, None] * s.sum(axis=1)[:, None] < np.cumsum(s, axis=1)).argmax(axis=1)
                member = np.where(gen.random(idx.size) < 0.5, pr[k, 0], pr[k, 1])
                col[idx, member] = 3 - col[idx, member]
            act = act[(left[act] > 0) & ev]
    w = np.exp(logw)
    index = ((col - 1) << np.arange(n)).sum(axis=1)
    return [estimate(np.where(index == k, w, 0.0)) for k in range(1 << n)]


def write_colour_csv(path, traj: ColourTrajectory) -> None:
    """Columns ``time, colouring, weight``."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["time", "colouring", "weight"])
        for t, ws in zip(traj.times, traj.weights):
            for k, w in enumerate(ws):
                wr.writerow([repr(float(t)), k, repr(float(w))])


# ---------------------------------------------------------------------------
# Infinite rate, rho = -1


def k_infinity_apply(M, l1: int, l2: int, n: int | None = None) -> np.ndarray:
    """Meeting operator: unequal colours at ``l1, l2`` are dropped, equal ones
    map ``delta_b`` to ``delta_b + delta_{b^l1}/2 + delta_{b^l2}/2``."""
    if l1 == l2:
        raise ParameterError("l1 and l2 must differ")
    M = np.asarray(M)
    size = M.shape[-1]
    n = n or int(round(math.log2(size)))
    if 1 << n != size or not (0 <= l1 < n and 0 <= l2 < n):
        raise ParameterError("bad measure size or positions")
    out = np.zeros_like(M)
    for k in range(size):
        if M[k] == 0:
            continue
        if ((k >> l1) & 1) == ((k >> l2) & 1):
            out[k] += M[k]
            out[k ^ (1 << l1)] += M[k] / 2
            out[k ^ (1 << l2)] += M[k] / 2
    return out


@dataclass(frozen=True)
class MeetingSchedule:
    """First-meeting times of new pairs; ``pairs[k]`` lists the pairs meeting at ``tau[k]``.

    Lattice walkers can meet two others at once; those pairs share a time.
    """

    tau: tuple
    pairs: tuple

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.tau, self.tau[1:])):
            raise ParameterError("meeting times must be strictly increasing")


def meeting_schedule(path: WalkPath) -> MeetingSchedule:
    met = set()
    tau, pairs = [], []
    for s, _, cur in path.segments():
        new = tuple(p for p in cur if p not in met)
        if new:
            met.update(new)
            tau.append(s)
            pairs.append(new)
    return MeetingSchedule(tuple(tau), tuple(pairs))


def evolve_colour_measure_infinite(schedule: MeetingSchedule, c, starts=None) -> ColourTrajectory:
    """Piecewise-constant colour measure at infinite rate, ``rho = -1``.

    ``weights[k]`` holds on ``(times[k], times[k+1]]`` (``weights[0]`` on
    ``[0, tau_1]``).
    """
    c = tuple(int(v) for v in c)
    n = len(c)
    _check_n(n)
    if starts is not None and len(set(int(s) for s in starts)) < len(starts):
        raise PreconditionError("starting positions must be distinct")
    if schedule.tau and schedule.tau[0] == 0:
        raise PreconditionError("starting positions must be distinct")
    M = np.zeros(1 << n)
    M[colouring_index(c)] = 1.0
    times, out = [0.0], [M.copy()]
    for t, prs in zip(schedule.tau, schedule.pairs):
        for l1, l2 in prs:
            M = k_infinity_apply(M, l1, l2, n)
        times.append(t)
        out.append(M.copy())
    return ColourTrajectory(n, np.array(times), np.array(out))


def infinite_measure_at(traj: ColourTrajectory, t: float) -> np.ndarray:
    # left-continuous: the jump at tau_k takes effect strictly after tau_k
    k = int(np.searchsorted(traj.times, t, side="left")) - 1
    return traj.weights[max(k, 0)]


def gamma_convergence(paths, c, gammas, t: float, precision: int | None = None) -> list:
    """``max over paths and b of |M_t^gamma(b) - M_t^inf(b)|`` for each gamma, at ``rho = -1``.

    ``precision=None`` picks enough digits to resolve ``exp(-gamma * local time)``.
    """
    out = []
    for g in gammas:
        worst = mpmath.mpf(0)
        for p in paths:
            lt = float(p.local_times().sum())
            dps = precision or int(g * lt / 2.3) + 40
            with mpmath.workdps(dps):
                fin = evolve_colour_measure(p, c, g, -1.0, precision=dps).at(t)
                inf = infinite_measure_at(evolve_colour_measure_infinite(meeting_schedule(p), c), t)
                d = max(abs(mpmath.mpf(a) - mpmath.mpf(float(b))) for a, b in zip(fin, inf))
                worst = max(worst, d)
        out.append(worst)
    return out


# ---------------------------------------------------------------------------
# Brownian duals at rho = -1


def check_coalescing_duality(u0, x, t: float, N: int, rng: RngStream, dt: float = 1e-3, workers=None) -> TwoSided:
    """``E[prod u_t(x_i)]`` by the continuous voter model against coalescing BMs.

    ``u0`` is a callable with values in ``[0, 1]`` (``v0 = 1 - u0``).
    """
    x = np.asarray(x, dtype=float)
    _check_n(x.size, MAX_DUALITY_WALKERS)

    def lhs(n, gen):
        return ip.continuous_voter(u0, x, t, gen, n, dt).prod(axis=1).astype(float)

    def rhs(n, gen):
        lab, ends = ip.coalescing_families(x, t, dt, n, gen)
        vals = np.asarray(u0(ends), dtype=float)
        rep = lab == np.arange(x.size)
        return np.where(rep, vals, 1.0).prod(axis=1)

    a = run_blocks(lhs, N, rng.child(0), block_size=10000, workers=workers)
    b = run_blocks(rhs, N, rng.child(1), block_size=10000, workers=workers)
    return TwoSided(estimate(a), estimate(b))


def check_annihilating_moment_duality(
    u0, x, gamma: float, t: float, N: int, rng: RngStream, dt: float = 1e-3,
    eps: float = ip.DEFAULT_EPS, lattice_dx: float = 0.1, window: float = 4.0, workers=None,
) -> TwoSided:
    """``E[prod (1 - 2 u_t(x_i))]`` against annihilating BMs from ``x``.

    ``gamma = inf``: the LHS comes from the continuous voter model and the
    RHS from instantly annihilating BMs.  Finite ``gamma``: the LHS runs the
    lattice SBM at ``rho = -1`` (spacing ``lattice_dx``, reflecting window of
    half-width ``window`` around the points) and the RHS delayed annihilating
    BMs with co-location half-width ``eps``.
    """
    x = np.asarray(x, dtype=float)
    _check_n(x.size, MAX_DUALITY_WALKERS)
    infinite = math.isinf(gamma)

    def rhs(n, gen):
        mode = ip.ANNIHILATING if infinite else ip.DELAYED_ANNIHILATING
        sys = ip.ParticleSystem1D(np.tile(x, (n, 1)), mode, None, gamma if not infinite else math.inf, eps)
        sys = ip.evolve_particles(sys, dt, t, gen)
        p = sys.positions
        vals = np.ones_like(p)
        fin = np.isfinite(p)
        vals[fin] = 1.0 - 2.0 * np.asarray(u0(p[fin]), dtype=float)
        return vals.prod(axis=1)

    if infinite:
        def lhs(n, gen):
            ty = ip.continuous_voter(u0, x, t, gen, n, dt)
            return (1.0 - 2.0 * ty).prod(axis=1)
        block = 10000
    else:
        lo, hi = x.min() - window, x.max() + window
        sites = np.arange(int(math.floor(lo / lattice_dx)), int(math.ceil(hi / lattice_dx)) + 1) * lattice_dx
        idx = np.array([int(np.argmin(np.abs(sites - xi))) for xi in x])
        uu = np.asarray(u0(sites), dtype=float)
        step = min(DEFAULT_DT, lattice_dx**2 / 2)
        step = (t / math.ceil(t / step)) if t > 0 else step
        params = SbmParams(-1.0, gamma, step, lattice_dx)

        def lhs(n, gen):
            end = run_paths(uu, 1.0 - uu, params, t, ZERO_FLUX, n, gen)
            return (1.0 - 2.0 * end.u[:, idx]).prod(axis=1)
        block = 2000

    a = run_blocks(lhs, N, rng.child(0), block_size=block, workers=workers)
    b = run_blocks(rhs, N, rng.child(1), block_size=10000, workers=workers)
    return TwoSided(estimate(a), estimate(b))
