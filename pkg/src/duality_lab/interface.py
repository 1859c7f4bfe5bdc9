"""Brownian particle systems on the line and the torus.

Positions are stored as a batch: an array of shape ``(N, m)`` holds ``N``
independent copies of a system with at most ``m`` particles.  Each row is
sorted; dead slots carry ``+inf`` and sit at the end of the row.  A single
system is the case ``N = 1``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import stats
from scipy.special import erf, erfc, ndtr

from .stochastic_core import (
    Estimate,
    ParameterError,
    PreconditionError,
    RngStream,
    TwoSided,
    as_generator,
    estimate,
    run_blocks,
)

log = logging.getLogger(__name__)

INDEPENDENT = "independent"
COALESCING = "coalescing"
ANNIHILATING = "annihilating"
DELAYED_COALESCING = "delayed_coalescing"
DELAYED_ANNIHILATING = "delayed_annihilating"
MODES = (INDEPENDENT, COALESCING, ANNIHILATING, DELAYED_COALESCING, DELAYED_ANNIHILATING)
DEFAULT_EPS = 0.01
DEFAULT_EPS0 = 1e-4

SQRT2 = math.sqrt(2.0)


# ---------------------------------------------------------------------------
# Closed forms


def pair_survival_prob(d, t):
    """``P(two BMs at distance d have not met by t) = 2 Phi(d / sqrt(2t)) - 1``."""
    d = np.asarray(d, dtype=float)
    return erf(np.abs(d) / (2.0 * np.sqrt(t)))


def meeting_prob(d, t):
    """``P(two BMs at distance d meet by t) = erfc(d / (2 sqrt(t)))``."""
    d = np.asarray(d, dtype=float)
    return erfc(np.abs(d) / (2.0 * np.sqrt(t)))


@dataclass(frozen=True)
class PiecewiseConstantProfile:
    """Step function on the line: ``values[k]`` on ``(breakpoints[k-1], breakpoints[k])``.

    ``values`` has one more entry than ``breakpoints``.  The heat flow
    ``S_t f = E f(x + B_t)`` is a finite erf sum.
    """

    breakpoints: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        b = tuple(float(v) for v in self.breakpoints)
        vals = tuple(float(v) for v in self.values)
        if len(vals) != len(b) + 1:
            raise ParameterError("need len(values) == len(breakpoints) + 1")
        if any(b2 <= b1 for b1, b2 in zip(b, b[1:])):
            raise ParameterError("breakpoints must be strictly increasing")
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, c: float) -> "PiecewiseConstantProfile":
        return cls((), (c,))

    @classmethod
    def step(cls, left: float, right: float, at: float = 0.0) -> "PiecewiseConstantProfile":
        return cls((at,), (left, right))

    def __add__(self, other: "PiecewiseConstantProfile") -> "PiecewiseConstantProfile":
        b = sorted(set(self.breakpoints) | set(other.breakpoints))
        probes = _piece_probes(b)
        return PiecewiseConstantProfile(tuple(b), tuple(self(probes) + other(probes)))

    @property
    def jumps(self) -> np.ndarray:
        return np.diff(np.asarray(self.values))

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(np.asarray(self.breakpoints), x, side="right")
        return np.asarray(self.values)[idx]

    def heat(self, t: float, x) -> np.ndarray:
        """``S_t f(x)``; ``S_0`` is the identity."""
        x = np.asarray(x, dtype=float)
        if t < 0:
            raise ParameterError("t must be nonnegative")
        if t == 0:
            return self(x)
        out = np.full(x.shape, self.values[0])
        s = math.sqrt(t)
        for b, j in zip(self.breakpoints, self.jumps):
            out = out + j * ndtr((x - b) / s)
        return out

    def heat_dx(self, t: float, x) -> np.ndarray:
        """Spatial derivative of ``S_t f`` for ``t > 0``."""
        x = np.asarray(x, dtype=float)
        if not t > 0:
            raise ParameterError("derivative needs t > 0")
        s = math.sqrt(t)
        out = np.zeros(x.shape)
        for b, j in zip(self.breakpoints, self.jumps):
            z = (x - b) / s
            out = out + j * np.exp(-0.5 * z * z) / (math.sqrt(2 * math.pi) * s)
        return out


def _piece_probes(b: Sequence[float]) -> np.ndarray:
    if not b:
        return np.zeros(1)
    b = np.asarray(b, dtype=float)
    mids = (b[1:] + b[:-1]) / 2
    return np.concatenate([[b[0] - 1.0], mids, [b[-1] + 1.0]])


# ---------------------------------------------------------------------------
# Particle systems


@dataclass
class ParticleSystem1D:
    """Batch of particle configurations.

    ``circumference=None`` is the line; otherwise positions live in
    ``[0, C)``.  ``ids`` follow particles through re-sorting.  On the torus,
    ``origin_flips`` counts (per row) how often an interface passed the
    origin or a pair annihilated across it; the colouring uses its parity.
    ``parity`` (coalescing mode only) holds each particle's mass mod 2;
    merging adds masses, so the odd particles move as annihilating BMs.
    """

    positions: np.ndarray
    mode: str = ANNIHILATING
    circumference: float | None = None
    gamma: float = math.inf
    eps: float = DEFAULT_EPS
    time: float = 0.0
    ids: np.ndarray | None = None
    origin_flips: np.ndarray | None = None
    parity: np.ndarray | None = None

    def __post_init__(self):
        x = np.array(self.positions, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if self.mode not in MODES:
            raise ParameterError(f"unknown mode {self.mode!r}")
        if self.mode.startswith("delayed") and not (self.gamma > 0 and self.eps > 0):
            raise ParameterError("delayed modes need gamma > 0 and eps > 0")
        if self.circumference is not None:
            if not self.circumference > 0:
                raise ParameterError("circumference must be positive")
            fin = np.isfinite(x)
            x[fin] = np.mod(x[fin], self.circumference)
        order = np.argsort(x, axis=1, kind="stable")
        self.positions = np.take_along_axis(x, order, axis=1)
        if self.ids is None:
            ids = np.broadcast_to(np.arange(x.shape[1]), x.shape)
        else:
            ids = np.asarray(self.ids)
        self.ids = np.take_along_axis(ids, order, axis=1)
        if self.parity is not None:
            par = np.broadcast_to(np.asarray(self.parity, dtype=np.int8), x.shape)
            self.parity = np.take_along_axis(par, order, axis=1)
        if self.origin_flips is None:
            self.origin_flips = np.zeros(x.shape[0], dtype=np.int64)

    @property
    def n_rows(self) -> int:
        return self.positions.shape[0]

    @property
    def alive(self) -> np.ndarray:
        return np.isfinite(self.positions)

    @property
    def counts(self) -> np.ndarray:
        return self.alive.sum(axis=1)

    @property
    def torus(self) -> bool:
        return self.circumference is not None


def _run_parity_fire(crossed: np.ndarray) -> np.ndarray:
    # Greedy left-to-right matching inside each run of consecutive crossed pairs.
    m = crossed.shape[1]
    j = np.arange(m)
    prev = np.concatenate([np.zeros((crossed.shape[0], 1), bool), crossed[:, :-1]], axis=1)
    starts = crossed & ~prev
    run_start = np.maximum.accumulate(np.where(starts, j, -1), axis=1)
    return crossed & ((j - run_start) % 2 == 0)


def _colocation(g0, g1, dt, eps):
    # Time spent within eps of each other, from the two endpoint gaps.
    return 0.5 * dt * ((np.abs(g0) < eps).astype(float) + (np.abs(g1) < eps))


def step_particles(sys: ParticleSystem1D, dt: float, rng, drift: Callable | None = None) -> ParticleSystem1D:
    """Advance every row by ``dt``.

    Each alive particle moves by ``N(0, dt)`` (plus ``drift(time, x) * dt``
    if given).  Adjacent pairs collide if their order swapped or, otherwise,
    with the bridge crossing probability ``exp(-g0 g1 / dt)`` of the gap
    (diffusivity 2).  Collisions are resolved left to right.  Delayed modes
    instead kill or merge a pair with probability ``1 - exp(-gamma/(2 eps) * T)``
    where ``T`` is the time the pair spent within ``eps``.
    """
    if not dt > 0:
        raise ParameterError("dt must be positive")
    gen = as_generator(rng)
    x = sys.positions
    N, m = x.shape
    alive = np.isfinite(x)
    noise = math.sqrt(dt) * gen.standard_normal(x.shape)
    y = np.full_like(x, np.inf)
    if drift is not None and alive.any():
        noise[alive] += drift(sys.time, x[alive]) * dt
    y[alive] = x[alive] + noise[alive]
    par = sys.parity
    flips = sys.origin_flips.copy()
    mode = sys.mode

    if mode != INDEPENDENT and m >= 2:
        valid = alive[:, 1:]
        with np.errstate(invalid="ignore"):
            g0 = x[:, 1:] - x[:, :-1]
            g1 = y[:, 1:] - y[:, :-1]
        u = gen.random(g0.shape)
        if mode.startswith("delayed"):
            occ = np.where(valid, _colocation(g0, g1, dt, sys.eps), 0.0)
            hit = valid & (u < -np.expm1(-sys.gamma / (2 * sys.eps) * occ))
        else:
            with np.errstate(invalid="ignore", over="ignore"):
                pc = np.exp(-np.where(valid, g0 * g1, 0.0) / dt)
            hit = valid & ((g1 <= 0) | (u < pc))
        # wrap pair on the torus: last alive particle and particle 0
        cnt = alive.sum(axis=1)
        wrap_hit = np.zeros(N, bool)
        rows = np.nonzero(cnt >= 2)[0]
        if sys.torus and rows.size:
            C = sys.circumference
            last = cnt[rows] - 1
            w0 = x[rows, 0] + C - x[rows, last]
            w1 = y[rows, 0] + C - y[rows, last]
            uw = gen.random(rows.size)
            if mode.startswith("delayed"):
                wh = uw < -np.expm1(-sys.gamma / (2 * sys.eps) * _colocation(w0, w1, dt, sys.eps))
            else:
                with np.errstate(over="ignore"):
                    wh = (w1 <= 0) | (uw < np.exp(-w0 * w1 / dt))
            wrap_hit[rows] = wh
        if mode in (ANNIHILATING, DELAYED_ANNIHILATING):
            fire = _run_parity_fire(hit)
            dead = np.zeros_like(alive)
            dead[:, :-1] |= fire
            dead[:, 1:] |= fire
            if sys.torus:
                rr = np.nonzero(wrap_hit)[0]
                if rr.size:
                    last = cnt[rr] - 1
                    ok = ~dead[rr, 0] & ~dead[rr, last] & (last > 0)
                    rr, last = rr[ok], last[ok]
                    dead[rr, 0] = True
                    dead[rr, last] = True
                    flips[rr] += 1
            y[dead] = np.inf
        else:
            y, par = _merge_runs(y, hit, wrap_hit, cnt, sys.circumference, gen, sys.parity)

    ids = sys.ids
    if sys.torus:
        fin = np.isfinite(y)
        wraps = np.zeros(y.shape, dtype=np.int64)
        wraps[fin] = np.floor_divide(y[fin], sys.circumference).astype(np.int64)
        flips += np.abs(wraps).sum(axis=1)
        y[fin] = np.mod(y[fin], sys.circumference)
    order = np.argsort(y, axis=1, kind="stable")
    return replace(
        sys,
        positions=np.take_along_axis(y, order, axis=1),
        ids=np.take_along_axis(ids, order, axis=1),
        parity=None if par is None else np.take_along_axis(par, order, axis=1),
        time=sys.time + dt,
        origin_flips=flips,
    )


def _merge_runs(y, hit, wrap_hit, cnt, C, gen, par=None):
    # Coalesce each run of hit pairs into one particle at a uniformly chosen member's endpoint.
    y = y.copy()
    par = None if par is None else par.copy()
    size = np.ones(y.shape[0])
    for j in np.nonzero(hit.any(axis=0))[0]:
        h = hit[:, j]
        # carry the run's survivor from slot j into slot j + 1
        prev = hit[:, j - 1] if j > 0 else np.zeros_like(h)
        seen = np.where(h & prev, size, 1.0)
        take_left = h & (gen.random(y.shape[0]) < seen / (seen + 1.0))
        y[take_left, j + 1] = y[take_left, j]
        y[h, j] = np.inf
        if par is not None:
            par[h, j + 1] ^= par[h, j]
            par[h, j] = 0
        size = np.where(h, seen + 1.0, 1.0)
    if C is not None:
        rr = np.nonzero(wrap_hit)[0]
        for r in rr:
            fin = np.nonzero(np.isfinite(y[r]))[0]
            if fin.size < 2:
                continue
            a, b = fin[0], fin[-1]
            if gen.random() < 0.5:
                y[r, a] = y[r, b] - C
            y[r, b] = np.inf
            if par is not None:
                par[r, a] ^= par[r, b]
                par[r, b] = 0
    return y, par


def evolve_particles(sys: ParticleSystem1D, dt: float, t: float, rng, drift=None, observer=None) -> ParticleSystem1D:
    """Step to time ``sys.time + t``; the last step is shortened to land exactly."""
    gen = as_generator(rng)
    target = sys.time + t
    while sys.time < target - 1e-12:
        h = min(dt, target - sys.time)
        if observer is not None:
            observer(sys)
        sys = step_particles(sys, h, gen, drift)
    sys.time = target
    return sys


def pad_rows(rows: Sequence[np.ndarray]) -> np.ndarray:
    m = max([len(r) for r in rows] + [1])
    out = np.full((len(rows), m), np.inf)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


# ---------------------------------------------------------------------------
# Colouring by annihilating interfaces


@dataclass
class ColouringState:
    """Annihilating interfaces plus the colour left of the first one.

    On the torus ``leftmost_colour`` is the colour at the origin at time 0;
    the current colour there flips with ``interfaces.origin_flips``.
    """

    interfaces: ParticleSystem1D
    leftmost_colour: np.ndarray

    def colour_at(self, grid) -> np.ndarray:
        """Colours in ``{1, 2}`` of shape ``(N, len(grid))``."""
        grid = np.asarray(grid, dtype=float)
        pos = self.interfaces.positions
        left = np.array([np.searchsorted(row, grid, side="right") for row in pos])
        base = np.asarray(self.leftmost_colour) - 1
        if self.interfaces.torus:
            base = (base + self.interfaces.origin_flips) % 2
        return 1 + (base[:, None] + left) % 2


def drift_from_profile(w0: PiecewiseConstantProfile, eps0: float = DEFAULT_EPS0):
    """Interface drift ``-w_s'(x) / w_s(x)`` with ``w_s = S_s w0``; zero before ``eps0``."""

    def drift(s, x):
        if s < eps0:
            return np.zeros_like(x)
        return -w0.heat_dx(s, x) / w0.heat(s, x)

    return drift


def simulate_abm_colouring(
    interfaces: Sequence[float],
    leftmost_colour: int,
    w0: PiecewiseConstantProfile | float,
    t: float,
    rng,
    grid=None,
    N: int = 1,
    dt: float = 1e-3,
    circumference: float | None = None,
    eps0: float = DEFAULT_EPS0,
):
    """Colour the line (or torus) by annihilating interfaces.

    Returns ``(state, u_hat, v_hat)`` where ``u_hat = w_t 1{colour 1}`` and
    ``v_hat = w_t 1{colour 2}`` on ``grid``.  Interfaces are standard BMs
    for constant ``w0`` and follow the drift ``-w'/w`` otherwise.
    """
    pts = np.sort(np.asarray(interfaces, dtype=float))
    if pts.size and (np.any(~np.isfinite(pts)) or np.any(np.diff(pts) <= 0)):
        raise PreconditionError("interface set must be finite with distinct points")
    if leftmost_colour not in (1, 2):
        raise ParameterError("leftmost_colour must be 1 or 2")
    if not isinstance(w0, PiecewiseConstantProfile):
        w0 = PiecewiseConstantProfile.constant(float(w0))
    if min(w0.values) <= 0:
        raise PreconditionError("w0 must be positive")
    drift = None
    if len(w0.breakpoints):
        if circumference is not None:
            raise PreconditionError("non-constant w0 is supported on the line only")
        drift = drift_from_profile(w0, eps0)
    if circumference is not None and pts.size % 2:
        raise PreconditionError("a torus colouring needs an even number of interfaces")
    sys = ParticleSystem1D(np.tile(pts, (N, 1)) if pts.size else np.full((N, 1), np.inf),
                           ANNIHILATING, circumference)
    sys = evolve_particles(sys, dt, t, rng, drift)
    state = ColouringState(sys, np.full(N, leftmost_colour))
    if grid is None:
        return state, None, None
    grid = np.asarray(grid, dtype=float)
    w = w0.heat(t, grid)
    col = state.colour_at(grid)
    return state, np.where(col == 1, w, 0.0), np.where(col == 2, w, 0.0)


def write_colouring_csv(path, grid, u_hat, v_hat) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x", "u_hat", "v_hat"])
        for x, a, b in zip(grid, u_hat, v_hat):
            wr.writerow([repr(float(x)), repr(float(a)), repr(float(b))])


# ---------------------------------------------------------------------------
# Interface SDE


def time_grid(t: float, dt: float, eps0: float = DEFAULT_EPS0, frac: float = 0.05) -> np.ndarray:
    """Steps start at ``eps0`` and grow geometrically until they reach ``dt``."""
    if not (0 < eps0 < t):
        raise ParameterError("need 0 < eps0 < t")
    s = [0.0, eps0]
    while s[-1] < t - 1e-15:
        s.append(min(t, s[-1] + min(dt, frac * s[-1])))
    return np.asarray(s)


def simulate_interface_sde(
    I0: float, w0: PiecewiseConstantProfile, dt: float, t: float, rng, N: int = 1,
    eps0: float = DEFAULT_EPS0, keep_path: bool = False,
):
    """Euler-Maruyama for ``dI = -(w_s'/w_s)(I) ds + dB`` started at ``I0``.

    On ``[0, eps0]`` the drift is dropped (the integral is improper at 0) and
    ``I`` moves as a plain BM.  Returns the time grid and either the paths
    ``(N, len(grid))`` or the terminal values ``(N,)``.
    """
    if not dt > 0:
        raise ParameterError("dt must be positive")
    if min(w0.values) < 0:
        raise PreconditionError("w0 must be nonnegative")
    if w0(np.array([I0 - 1e-12, I0 + 1e-12])).min() <= 0:
        raise PreconditionError("w0 vanishes next to the starting point")
    gen = as_generator(rng)
    grid = time_grid(t, dt, eps0)
    I = np.full(N, float(I0))
    path = [I.copy()] if keep_path else None
    for s0, s1 in zip(grid[:-1], grid[1:]):
        h = s1 - s0
        if s0 >= eps0:
            I = I - w0.heat_dx(s0, I) / w0.heat(s0, I) * h
        I = I + math.sqrt(h) * gen.standard_normal(N)
        if keep_path:
            path.append(I.copy())
    return grid, (np.stack(path, axis=1) if keep_path else I)


def interface_cdf_closed_form(u0: PiecewiseConstantProfile, v0: PiecewiseConstantProfile, t: float, x):
    """``P(I_t >= x) = S_t u0(x) / S_t w0(x)``."""
    w0 = u0 + v0
    return u0.heat(t, x) / w0.heat(t, x)


# ---------------------------------------------------------------------------
# Continuous voter model and coalescing families


def coalescing_families(x0, t: float, dt: float, N: int, rng):
    """Forward coalescing BMs from ``x0`` on the line.

    Returns ``(labels, ends)``: ``labels[r, i]`` is the index of the family
    representative of particle ``i``; ``ends[r, i]`` its family's endpoint.
    """
    x0 = np.asarray(x0, dtype=float)
    m = x0.size
    gen = as_generator(rng)
    pos = np.tile(x0, (N, 1))
    lab = np.tile(np.arange(m), (N, 1))
    done = 0.0
    while done < t - 1e-12:
        h = min(dt, t - done)
        new = pos + math.sqrt(h) * gen.standard_normal(pos.shape)
        for i in range(m):
            for j in range(i + 1, m):
                live = (lab[:, i] == i) & (lab[:, j] == j)
                if not live.any():
                    continue
                g0 = pos[:, j] - pos[:, i]
                g1 = new[:, j] - new[:, i]
                with np.errstate(over="ignore"):
                    pc = np.where(g0 * g1 > 0, np.exp(-np.abs(g0 * g1) / h), 1.0)
                met = live & (gen.random(N) < pc)
                if met.any():
                    keep_j = met & (gen.random(N) < 0.5)
                    new[keep_j, i] = new[keep_j, j]
                    lab[met] = np.where(lab[met] == j, i, lab[met])
        pos = new
        done += h
    ends = np.take_along_axis(pos, lab, axis=1)
    return lab, ends


def continuous_voter(u0: Callable, x, t: float, rng, N: int = 1, dt: float = 1e-3) -> np.ndarray:
    """Types ``{0, 1}`` at query points ``x`` at time ``t``, shape ``(N, len(x))``.

    Each coalesced family shares one Bernoulli draw with success
    probability ``u0`` at the family endpoint.
    """
    gen = as_generator(rng)
    lab, ends = coalescing_families(x, t, dt, N, gen)
    p = np.clip(np.asarray(u0(ends), dtype=float), 0.0, 1.0)
    coin = gen.random(p.shape) < p
    own = np.take_along_axis(coin, lab, axis=1)
    return own.astype(np.int8)


# ---------------------------------------------------------------------------
# Entrance laws on the torus

LATTICE = "lattice"
POISSON = "poisson"
PAIRED_SQUARE = "paired_square"  # pairs (k/n, k/n + 1/n^2)
PAIRED_QUARTER = "paired_quarter"  # pairs (k/n, k/n + 1/(4n))
INITS = (LATTICE, POISSON, PAIRED_SQUARE, PAIRED_QUARTER)


def entrance_init(kind: str, n: int, circumference: float = 1.0, gen=None) -> np.ndarray:
    """Initial positions on the torus; an odd count loses its last particle."""
    C = circumference
    k = np.arange(int(round(n * C)))
    if kind == LATTICE:
        pts = k / n
    elif kind == POISSON:
        g = as_generator(gen)
        pts = np.sort(g.random(g.poisson(n * C)) * C)
    elif kind == PAIRED_SQUARE:
        pts = np.sort(np.concatenate([k / n, k / n + 1.0 / n**2]))
    elif kind == PAIRED_QUARTER:
        pts = np.sort(np.concatenate([k / n, k / n + 1.0 / (4 * n)]))
    else:
        raise ParameterError(f"unknown init {kind!r}")
    if pts.size % 2:
        log.debug("odd initial count %d for %s(n=%d); dropping one particle", pts.size, kind, n)
        pts = pts[:-1]
    return np.mod(pts, C)


def init_capacity(kind: str, n: int, C: float = 1.0) -> int:
    """Row width used for a batch; Poisson counts beyond it are astronomically unlikely."""
    mean = n * C
    if kind == POISSON:
        return int(mean + 12 * math.sqrt(mean) + 20)
    return 2 * int(round(mean)) if kind in (PAIRED_SQUARE, PAIRED_QUARTER) else int(round(mean))


def _init_batch(kind, n, C, rows, gen):
    width = init_capacity(kind, n, C)
    if kind == POISSON:
        out = np.full((rows, width), np.inf)
        for i in range(rows):
            r = entrance_init(kind, n, C, gen)[:width]
            out[i, : r.size] = r
        return out
    return np.tile(entrance_init(kind, n, C), (rows, 1))


@dataclass(frozen=True)
class CountTable:
    kind: str
    n_list: tuple
    t_grid: tuple
    counts: dict  # n -> array (N, len(t_grid))

    def mean(self, n, k) -> Estimate:
        return estimate(self.counts[n][:, k])


def _count_kernel(kind, n, C, t_grid, dt, mode=ANNIHILATING):
    def kernel(rows, gen):
        sys = ParticleSystem1D(_init_batch(kind, n, C, rows, gen), mode, C)
        out = np.empty((rows, len(t_grid)))
        now = 0.0
        for k, tg in enumerate(t_grid):
            sys = evolve_particles(sys, dt, tg - now, gen)
            now = tg
            out[:, k] = sys.counts
        return out

    return kernel


def entrance_law_experiment(
    kind: str, n_list, t_grid, N: int, rng: RngStream, circumference: float = 1.0,
    dt: float = 1e-4, workers=None,
) -> CountTable:
    """Alive counts of annihilating BMs from ``kind`` initial data, per ``n`` and ``t``."""
    t_grid = tuple(float(t) for t in t_grid)
    if any(b <= a for a, b in zip(t_grid, t_grid[1:])) or t_grid[0] < 0:
        raise ParameterError("t_grid must be increasing and nonnegative")
    counts = {}
    for i, n in enumerate(n_list):
        counts[n] = run_blocks(_count_kernel(kind, n, circumference, t_grid, dt), N, rng.child(i),
                               block_size=500, workers=workers)
    return CountTable(kind, tuple(n_list), t_grid, counts)


def count_two_sample(a: np.ndarray, b: np.ndarray) -> float:
    """Chi-square homogeneity p-value for two samples of counts (sparse cells pooled)."""
    a = np.asarray(a, dtype=int)
    b = np.asarray(b, dtype=int)
    vals = np.union1d(a, b)
    tab = np.array([[np.sum(a == v) for v in vals], [np.sum(b == v) for v in vals]], dtype=float)
    # pool cells with expected count < 5 into neighbours
    cols = []
    acc = np.zeros(2)
    for c in tab.T:
        acc = acc + c
        if acc.sum() >= 10:
            cols.append(acc)
            acc = np.zeros(2)
    if acc.sum() > 0:
        if cols:
            cols[-1] = cols[-1] + acc
        else:
            cols.append(acc)
    tab = np.array(cols).T
    if tab.shape[1] < 2:
        return 1.0
    return float(stats.chi2_contingency(tab, correction=False)[1])


@dataclass(frozen=True)
class DensityEstimate:
    h: float
    value: Estimate
    refined: Estimate
    atomic: bool


def estimate_npoint_density(
    kind: str, n: int, t: float, x_points, h: float, N: int, rng: RngStream,
    circumference: float = 1.0, dt: float = 1e-4, mode: str = ANNIHILATING, workers=None,
) -> DensityEstimate:
    """``P(every window [x_i - h, x_i + h] holds a particle) / (2h)^k`` at widths ``h`` and ``h/2``."""
    x_points = np.atleast_1d(np.asarray(x_points, dtype=float))
    C = circumference

    def kernel(rows, gen):
        sys = ParticleSystem1D(_init_batch(kind, n, C, rows, gen), mode, C)
        if t > 0:
            sys = evolve_particles(sys, dt, t, gen)
        p = sys.positions
        out = np.empty((rows, 2))
        for col, hh in enumerate((h, h / 2)):
            hit = np.ones(rows, bool)
            for xp in x_points:
                with np.errstate(invalid="ignore"):
                    d = np.abs(p - xp)
                    d = np.minimum(d, C - d)
                # dead slots hold inf and must never count
                hit &= ((d <= hh) & np.isfinite(p)).any(axis=1)
            out[:, col] = hit / (2 * hh) ** len(x_points)
        return out

    s = run_blocks(kernel, N, rng, block_size=500, workers=workers)
    full, half = estimate(s[:, 0]), estimate(s[:, 1])
    # an atom doubles the estimate when the window halves
    atomic = half.value > 1.5 * full.value and full.value > 0
    return DensityEstimate(h, full, half, bool(atomic))


@dataclass(frozen=True)
class ConsistencyReport:
    count_p: float
    gap_p: float
    direct_mean: Estimate
    split_mean: Estimate
    halved_mean: Estimate

    @property
    def dt_shift(self) -> float:
        return abs(self.direct_mean.value - self.halved_mean.value)

    @property
    def ci_width(self) -> float:
        lo, hi = self.direct_mean.ci95
        return hi - lo


def _nearest_gaps(pos: np.ndarray, C: float) -> np.ndarray:
    out = []
    for row in pos:
        r = row[np.isfinite(row)]
        if r.size >= 2:
            g = np.diff(np.concatenate([r, [r[0] + C]]))
            out.append(np.minimum(g, np.roll(g, 1)))
    return np.concatenate(out) if out else np.empty(0)


def entrance_consistency_check(
    kind: str, n: int, s: float, t: float, N: int, rng: RngStream,
    circumference: float = 1.0, dt: float = 1e-4, workers=None,
) -> ConsistencyReport:
    """Run ``0 -> s -> t`` (fresh stream after ``s``) against ``0 -> t`` and ``0 -> t`` at ``dt/2``."""
    if not 0 < s <= t:
        raise ParameterError("need 0 < s <= t")
    C = circumference

    def direct(step):
        def kernel(rows, gen):
            sys = ParticleSystem1D(_init_batch(kind, n, C, rows, gen), ANNIHILATING, C)
            return evolve_particles(sys, step, t, gen).positions

        return kernel

    def split(rows, gen):
        sys = ParticleSystem1D(_init_batch(kind, n, C, rows, gen), ANNIHILATING, C)
        mid = evolve_particles(sys, dt, s, gen)
        # continue from the time-s state as a new initial condition
        restart = ParticleSystem1D(mid.positions, ANNIHILATING, C)
        return evolve_particles(restart, dt, t - s, gen.spawn(1)[0]).positions

    a = run_blocks(direct(dt), N, rng.child(0), block_size=500, workers=workers)
    b = run_blocks(split, N, rng.child(1), block_size=500, workers=workers)
    c = run_blocks(direct(dt / 2), N, rng.child(2), block_size=500, workers=workers)
    ca, cb, cc = (np.isfinite(p).sum(axis=1) for p in (a, b, c))
    gp = stats.ks_2samp(_nearest_gaps(a, C), _nearest_gaps(b, C)).pvalue
    return ConsistencyReport(count_two_sample(ca, cb), float(gp), estimate(ca), estimate(cb), estimate(cc))


@dataclass(frozen=True)
class ThinningReport:
    t_grid: tuple
    annihilating: list
    coalescing: list
    ratio: list  # (value, stderr) per t
    coupling_violations: int
    coupled_rows: int
    coupled_law_p: float  # odd-mass counts vs direct aBM counts at the last t


def thinning_experiment(
    kind: str, n: int, t_grid, N: int, rng: RngStream, circumference: float = 1.0,
    dt: float = 1e-4, workers=None,
) -> ThinningReport:
    """aBM/cBM 1-point density ratio (mean count ratio on the torus) per ``t``.

    The coupling runs coalescing BMs with mass parities: odd particles form
    an annihilating system driven by the same increments.  Rows where the
    coalescing count falls below the odd count are violations, and the odd
    counts are compared in law with the independently simulated aBM counts.
    """
    t_grid = tuple(float(x) for x in t_grid)
    C = circumference
    a = run_blocks(_count_kernel(kind, n, C, t_grid, dt, ANNIHILATING), N, rng.child(0),
                   block_size=500, workers=workers)
    c = run_blocks(_count_kernel(kind, n, C, t_grid, dt, COALESCING), N, rng.child(1),
                   block_size=500, workers=workers)
    ests_a = [estimate(a[:, k]) for k in range(len(t_grid))]
    ests_c = [estimate(c[:, k]) for k in range(len(t_grid))]
    ratio = []
    for ea, ec in zip(ests_a, ests_c):
        r = ea.value / ec.value
        se = abs(r) * math.hypot(ea.stderr / ea.value, ec.stderr / ec.value) if ea.value > 0 else math.nan
        ratio.append((r, se))

    def coupled(rows, gen):
        x0 = _init_batch(kind, n, C, rows, gen)
        sc = ParticleSystem1D(x0, COALESCING, C, parity=np.isfinite(x0).astype(np.int8))
        sc = evolve_particles(sc, dt, t_grid[-1], gen)
        odd = (sc.alive & (sc.parity == 1)).sum(axis=1)
        return np.stack([sc.counts, odd], axis=1).astype(float)

    rows = min(N, 1000)
    cp = run_blocks(coupled, rows, rng.child(2), block_size=500, workers=workers)
    viol = int(np.sum(cp[:, 0] < cp[:, 1]))
    law_p = count_two_sample(cp[:, 1], a[:, -1])
    return ThinningReport(t_grid, ests_a, ests_c, ratio, viol, rows, law_p)


# ---------------------------------------------------------------------------
# Export


def record_trajectories(sys: ParticleSystem1D, dt: float, t: float, rng, every: int = 1):
    """Single-row trajectory table of ``(time, particle_id, position, alive)`` rows."""
    if sys.n_rows != 1:
        raise ParameterError("trajectory recording needs a single system")
    out = []
    gen = as_generator(rng)
    k = 0

    def snap(s):
        for pid, p in zip(s.ids[0], s.positions[0]):
            out.append((s.time, int(pid), float(p) if np.isfinite(p) else math.nan, bool(np.isfinite(p))))

    def observer(s):
        nonlocal k
        if k % every == 0:
            snap(s)
        k += 1

    final = evolve_particles(sys, dt, t, gen, observer=observer)
    snap(final)
    return out, final


def write_particles_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["time", "particle_id", "position", "alive"])
        for t, pid, p, a in rows:
            wr.writerow([repr(float(t)), pid, "" if not a else repr(p), int(a)])


def fan_svg(rows, circumference: float | None = None, width: int = 480, height: int = 480) -> str:
    """Space-time plot: one polyline per particle, time running downwards.

    Lines end at the particle's last alive snapshot.  On the torus a path is
    drawn unwrapped and repeated one period to either side under a clip.
    """
    rows = [r for r in rows if r[3]]
    if not rows:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"></svg>\n'
    times = np.array([r[0] for r in rows])
    xs = np.array([r[2] for r in rows])
    lo, hi = (0.0, circumference) if circumference else (xs.min(), xs.max())
    span = hi - lo or 1.0
    tmax = times.max() or 1.0
    paths = {}
    for t, pid, x, _ in rows:
        paths.setdefault(pid, []).append((t, x))
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" '
             f'width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
             f'<defs><clipPath id="frame"><rect width="{width}" height="{height}"/></clipPath></defs>',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             '<g clip-path="url(#frame)">', '<g id="fan">']
    for pid, pts in sorted(paths.items()):
        seg = []
        shift = 0.0
        prev = None
        for t, x in pts:
            if prev is not None and circumference:
                # unwrap so the line stays continuous across the seam
                shift -= circumference * round((x - prev) / circumference)
            seg.append(((x + shift - lo) / span * width, t / tmax * height))
            prev = x
        lines.append(_polyline(seg))
    lines.append("</g>")
    if circumference:
        lines += [f'<use xlink:href="#fan" href="#fan" x="{-width}"/>', f'<use xlink:href="#fan" href="#fan" x="{width}"/>']
    lines += ["</g>", "</svg>"]
    return "\n".join(lines) + "\n"


def _polyline(seg) -> str:
    pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in seg)
    return f'<polyline fill="none" stroke="black" stroke-width="0.6" points="{pts}"/>'
