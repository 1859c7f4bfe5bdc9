"""Lattice Euler-Maruyama solver for the symbiotic branching system.

State arrays may carry a leading replicate axis: ``u`` of shape ``(L,)`` is a
single path, ``(n, L)`` is ``n`` independent paths advanced together.
Pairings ``<f, g>`` are ``dx``-weighted sums over sites.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats
from scipy.sparse import diags
from scipy.sparse.linalg import expm_multiply

from .stochastic_core import (
    DomainError,
    Estimate,
    ParameterError,
    RngStream,
    TwoSided,
    as_generator,
    estimate,
    gaussian_pair,
    mann_kendall,
    run_blocks,
)

log = logging.getLogger(__name__)

PERIODIC = "periodic"
ZERO_FLUX = "zero-flux"
DEFAULT_DX = 0.25
DEFAULT_DT = 0.01
DEFAULT_DELTA = 1e-6


@dataclass(frozen=True)
class SbmParams:
    rho: float
    gamma: float
    dt: float = DEFAULT_DT
    dx: float = DEFAULT_DX

    def __post_init__(self):
        if not -1.0 <= self.rho <= 1.0:
            raise ParameterError(f"rho must lie in [-1, 1], got {self.rho}")
        if self.gamma < 0:
            raise ParameterError("gamma must be nonnegative")
        if not (self.dt > 0 and self.dx > 0):
            raise ParameterError("dt and dx must be positive")
        if self.dt > self.dx**2 / 2 * (1 + 1e-12):
            raise ParameterError(f"unstable step: dt={self.dt} > dx^2/2={self.dx**2 / 2}")


@dataclass
class FieldPair:
    """Densities ``(u, v)`` on ``L`` sites plus per-path bookkeeping.

    ``lam`` holds the accumulated branching measure as a density
    (``sum gamma * u * v * dt`` per site).  ``clamp_mass`` is the total
    negative mass removed by the positivity clamp on each path.
    """

    u: np.ndarray
    v: np.ndarray
    dx: float = DEFAULT_DX
    boundary: str = PERIODIC
    lam: np.ndarray | None = None
    clamp_count: int = 0
    clamp_mass: np.ndarray | float = 0.0
    site_steps: int = 0
    time: float = 0.0

    def __post_init__(self):
        self.u = np.array(self.u, dtype=float)
        self.v = np.array(self.v, dtype=float)
        if self.u.shape != self.v.shape:
            raise ParameterError("u and v must have the same shape")
        if np.any(self.u < 0) or np.any(self.v < 0):
            raise ParameterError("densities must be nonnegative")
        if self.boundary not in (PERIODIC, ZERO_FLUX):
            raise ParameterError(f"unknown boundary {self.boundary!r}")
        if self.lam is None:
            self.lam = np.zeros_like(self.u)

    @property
    def L(self) -> int:
        return self.u.shape[-1]

    @property
    def positions(self) -> np.ndarray:
        return np.arange(self.L) * self.dx

    @property
    def clamp_rate(self) -> float:
        return self.clamp_count / self.site_steps if self.site_steps else 0.0

    def replicate(self, n: int) -> "FieldPair":
        """Broadcast a single-path state to ``n`` identical paths."""
        return FieldPair(
            np.tile(self.u, (n, 1)), np.tile(self.v, (n, 1)), self.dx, self.boundary,
            clamp_mass=np.zeros(n),
        )


def second_difference(f: np.ndarray, boundary: str) -> np.ndarray:
    """``f[i-1] + f[i+1] - 2 f[i]`` along the last axis."""
    if boundary == PERIODIC:
        return np.roll(f, 1, axis=-1) + np.roll(f, -1, axis=-1) - 2.0 * f
    left = np.concatenate([f[..., :1], f[..., :-1]], axis=-1)
    right = np.concatenate([f[..., 1:], f[..., -1:]], axis=-1)
    return left + right - 2.0 * f


def laplacian(f: np.ndarray, dx: float, boundary: str) -> np.ndarray:
    return second_difference(f, boundary) / dx**2


def _absorbed(start, proposal, var, gen):
    # Brownian path from start to proposal (variance var) touched zero.
    hit = proposal <= 0
    pos = ~hit & (var > 0)
    p = np.zeros_like(start)
    with np.errstate(over="ignore", under="ignore"):
        p[pos] = np.exp(-2.0 * start[pos] * proposal[pos] / var[pos])
    return hit | (gen.random(start.shape) < p)


def step_sbm(state: FieldPair, params: SbmParams, rng) -> FieldPair:
    """One Euler-Maruyama step with Brownian absorption at zero.

    Heat part: ``u_h = u + dt/2 * Lap(u)``.  Noise part: ``u_h + s * xi1`` and
    ``v_h + s * xi2`` with ``s = sqrt(gamma*u*v*dt/dx)`` and ``(xi1, xi2)``
    correlated standard normals, independent per site.  A coordinate whose
    noise path reaches zero during the step (sign change, or a bridge
    crossing) is absorbed at 0, so each coordinate stays a martingale and
    ``E[u_t]`` follows the noise-free scheme exactly.  For ``rho = -1`` the
    absorbed coordinate hands its mass to the other one and ``u + v`` is
    conserved pathwise.  Sign changes are counted as clamp events.
    """
    if not math.isclose(params.dx, state.dx):
        raise ParameterError("state and params disagree on dx")
    gen = as_generator(rng)
    u, v, dt, dx = state.u, state.v, params.dt, params.dx
    prod = u * v
    var = params.gamma * prod * dt / dx
    amp = np.sqrt(var)
    u_h = u + 0.5 * dt * laplacian(u, dx, state.boundary)
    v_h = v + 0.5 * dt * laplacian(v, dx, state.boundary)
    xi1, xi2 = gaussian_pair(params.rho, gen, size=u.shape)
    u_new = u_h + amp * xi1
    v_new = v_h + amp * xi2
    neg = (u_new < 0) | (v_new < 0)
    removed = np.where(u_new < 0, -u_new, 0.0) + np.where(v_new < 0, -v_new, 0.0)
    hit_u = _absorbed(u_h, u_new, var, gen)
    hit_v = _absorbed(v_h, v_new, var, gen)
    if params.rho == -1.0:
        w = u_h + v_h
        both = hit_u & hit_v
        first_u = gen.random(u.shape) < 0.5
        hit_u = hit_u & ~(both & ~first_u)
        hit_v = hit_v & ~(both & first_u)
        u_new = np.where(hit_u, 0.0, np.where(hit_v, w, u_new))
        v_new = w - u_new
    else:
        u_new = np.where(hit_u, 0.0, u_new)
        v_new = np.where(hit_v, 0.0, v_new)
    lam = state.lam + params.gamma * prod * dt
    mass = state.clamp_mass + (removed.sum(axis=-1) if removed.ndim > 1 else removed.sum())
    return replace(
        state,
        u=u_new,
        v=v_new,
        lam=lam,
        clamp_count=state.clamp_count + int(neg.sum()),
        clamp_mass=mass,
        site_steps=state.site_steps + u.size,
        time=state.time + dt,
    )


def n_steps(t: float, dt: float) -> int:
    k = int(round(t / dt))
    if not math.isclose(k * dt, t, rel_tol=1e-9, abs_tol=1e-12):
        raise ParameterError(f"t={t} is not a multiple of dt={dt}")
    return k


def simulate(state: FieldPair, params: SbmParams, t: float, rng, observer=None) -> FieldPair:
    """Advance ``state`` to time ``t``; ``observer(state)`` runs before every step."""
    gen = as_generator(rng)
    for _ in range(n_steps(t, params.dt)):
        if observer is not None:
            observer(state)
        state = step_sbm(state, params, gen)
    return state


# ---------------------------------------------------------------------------
# Deterministic heat flow


def heat_flow_euler(f: np.ndarray, dx: float, dt: float, t: float, boundary: str = PERIODIC) -> np.ndarray:
    """The noise-free scheme: ``(1 + dt/2 Lap)^k f``.  Equals ``E[u_t]`` of the solver."""
    f = np.array(f, dtype=float)
    for _ in range(n_steps(t, dt)):
        f = f + 0.5 * dt * laplacian(f, dx, boundary)
    return f


def heat_generator(L: int, dx: float, boundary: str = PERIODIC):
    main = -2.0 * np.ones(L)
    off = np.ones(L - 1)
    G = diags([off, main, off], [-1, 0, 1], format="lil")
    if boundary == PERIODIC:
        G[0, L - 1] = 1.0
        G[L - 1, 0] = 1.0
    else:
        G[0, 0] = -1.0
        G[L - 1, L - 1] = -1.0
    return (0.5 / dx**2) * G.tocsr()


def heat_semigroup(f: np.ndarray, dx: float, t: float, boundary: str = PERIODIC) -> np.ndarray:
    """Continuous-time lattice heat flow ``exp(t/2 Lap) f``."""
    f = np.asarray(f, dtype=float)
    if t == 0:
        return f.copy()
    return expm_multiply(heat_generator(f.shape[-1], dx, boundary) * t, f)


# ---------------------------------------------------------------------------
# Initial data and the interface region


def heaviside_init(L: int, dx: float = DEFAULT_DX, boundary: str = ZERO_FLUX) -> FieldPair:
    """Complementary step profiles sharing the junction site ``L // 2``.

    ``u = 1`` on sites ``0..L//2`` and ``v = 1`` on sites ``L//2..L-1``.  The
    two masses are equal when ``L`` is odd.
    """
    c = L // 2
    u = np.zeros(L)
    v = np.zeros(L)
    u[: c + 1] = 1.0
    v[c:] = 1.0
    return FieldPair(u, v, dx, boundary)


def interface_region(state: FieldPair, delta: float = DEFAULT_DELTA):
    """Lattice interval ``(left, right)`` where the numerical supports meet, or None.

    Sites where both ``u`` and ``v`` exceed ``delta`` form the overlap; when
    there is none, neighbouring sites ``i, i+1`` with one type on each side
    count as abutting.  Single path only.
    """
    if not delta > 0:
        raise ParameterError("delta must be positive")
    u, v = np.asarray(state.u), np.asarray(state.v)
    if u.ndim != 1:
        raise ParameterError("interface_region takes a single path")
    su, sv = u > delta, v > delta
    both = np.nonzero(su & sv)[0]
    if both.size:
        return int(both.min()), int(both.max())
    touch = np.nonzero((su[:-1] & sv[1:]) | (sv[:-1] & su[1:]))[0]
    if touch.size:
        return int(touch.min()), int(touch.max()) + 1
    return None


def region_width(region) -> int:
    return 0 if region is None else region[1] - region[0] + 1


# ---------------------------------------------------------------------------
# Self-duality


def _pair(f: np.ndarray, g: np.ndarray, dx: float) -> np.ndarray:
    return np.sum(f * g, axis=-1) * dx


def duality_bracket(u, v, phi, psi, rho: float, dx: float) -> np.ndarray:
    """``-sqrt(1-rho) <u+v, phi+psi> + i sqrt(1+rho) <u-v, phi-psi>``."""
    return -math.sqrt(1.0 - rho) * _pair(u + v, phi + psi, dx) + 1j * math.sqrt(1.0 + rho) * _pair(
        u - v, phi - psi, dx
    )


def self_duality_functional(mu: FieldPair, phi_psi: FieldPair, rho: float):
    """``F = exp(bracket)`` for measure-valued ``mu`` and test functions ``phi_psi``."""
    if not -1.0 < rho < 1.0:
        raise DomainError("self-duality functional needs |rho| < 1")
    for f in (mu.u, mu.v, phi_psi.u, phi_psi.v):
        if np.any(np.asarray(f) < 0):
            raise ParameterError("fields must be nonnegative")
    if not math.isclose(mu.dx, phi_psi.dx):
        raise ParameterError("pairing needs a common dx")
    val = np.exp(duality_bracket(mu.u, mu.v, phi_psi.u, phi_psi.v, rho, mu.dx))
    return complex(val) if np.ndim(val) == 0 else val


@dataclass(frozen=True)
class ComplexCheck:
    real: TwoSided
    imag: TwoSided

    @property
    def overlapping(self) -> bool:
        return self.real.overlapping and self.imag.overlapping


def run_paths(u0, v0, params: SbmParams, t: float, boundary: str, n: int, gen, observer=None) -> FieldPair:
    state = FieldPair(u0, v0, params.dx, boundary).replicate(n)
    return simulate(state, params, t, gen, observer)


def check_self_duality(
    u0, v0, phi, psi, rho: float, gamma: float, t: float, N: int, rng: RngStream,
    dx: float = DEFAULT_DX, dt: float = DEFAULT_DT, boundary: str = PERIODIC, workers=None,
) -> ComplexCheck:
    """Both sides of the mixed Laplace-Fourier self-duality.

    LHS runs start from ``(u0, v0)`` and evaluate ``F(u_t, v_t, phi, psi)``;
    RHS runs start from ``(phi, psi)`` and evaluate ``F(~u_t, ~v_t, u0, v0)``.
    """
    if not -1.0 < rho < 1.0:
        raise DomainError("self-duality needs |rho| < 1")
    params = SbmParams(rho, gamma, dt, dx)
    u0, v0, phi, psi = (np.asarray(a, dtype=float) for a in (u0, v0, phi, psi))

    def side(a, b, c, d):
        def kernel(n, gen):
            if t == 0:
                F = np.exp(duality_bracket(np.tile(a, (n, 1)), np.tile(b, (n, 1)), c, d, rho, dx))
            else:
                end = run_paths(a, b, params, t, boundary, n, gen)
                F = np.exp(duality_bracket(end.u, end.v, c, d, rho, dx))
            return np.stack([F.real, F.imag], axis=1)

        return kernel

    lhs = run_blocks(side(u0, v0, phi, psi), N, rng.child(0), workers=workers)
    rhs = run_blocks(side(phi, psi, u0, v0), N, rng.child(1), workers=workers)
    return ComplexCheck(
        TwoSided(estimate(lhs[:, 0]), estimate(rhs[:, 0])),
        TwoSided(estimate(lhs[:, 1]), estimate(rhs[:, 1])),
    )


@dataclass(frozen=True)
class ComplexEstimate:
    real: Estimate
    imag: Estimate

    def within(self, target: complex = 0.0, k: float = 3.0) -> bool:
        return self.real.within(target.real, k) and self.imag.within(target.imag, k)


def martingale_residual(
    u0, v0, phi, psi, rho: float, gamma: float, t: float, N: int, rng: RngStream,
    dx: float = DEFAULT_DX, dt: float = DEFAULT_DT, boundary: str = PERIODIC, workers=None,
) -> ComplexEstimate:
    """Mean of the martingale-problem expression at time ``t`` (should vanish).

    ``F_t - F_0 - 1/2 int F <<u, v, Lap phi, Lap psi>> ds
    - 4(1-rho^2) int F <phi psi, dLambda>`` with left-point time integrals and
    the branching measure accumulated along each path.
    """
    if not -1.0 < rho < 1.0:
        raise DomainError("martingale problem is stated for |rho| < 1")
    params = SbmParams(rho, gamma, dt, dx)
    phi = np.asarray(phi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    lap_phi = laplacian(phi, dx, boundary)
    lap_psi = laplacian(psi, dx, boundary)
    weight = 4.0 * (1.0 - rho * rho) * phi * psi

    def kernel(n, gen):
        state = FieldPair(u0, v0, dx, boundary).replicate(n)
        F0 = np.exp(duality_bracket(state.u, state.v, phi, psi, rho, dx))
        drift = np.zeros(n, dtype=complex)
        branching = np.zeros(n, dtype=complex)
        for _ in range(n_steps(t, dt)):
            F = np.exp(duality_bracket(state.u, state.v, phi, psi, rho, dx))
            drift += 0.5 * F * duality_bracket(state.u, state.v, lap_phi, lap_psi, rho, dx) * dt
            branching += F * _pair(weight, gamma * state.u * state.v * dt, dx)
            state = step_sbm(state, params, gen)
        Ft = np.exp(duality_bracket(state.u, state.v, phi, psi, rho, dx))
        r = Ft - F0 - drift - branching
        return np.stack([r.real, r.imag], axis=1)

    s = run_blocks(kernel, N, rng, workers=workers)
    return ComplexEstimate(estimate(s[:, 0]), estimate(s[:, 1]))


# ---------------------------------------------------------------------------
# First moment, separation of types, rescaling


@dataclass(frozen=True)
class FirstMomentReport:
    mean: np.ndarray
    stderr: np.ndarray
    heat: np.ndarray
    clamp_rate: float

    @property
    def max_z(self) -> float:
        se = np.where(self.stderr > 0, self.stderr, np.inf)
        z = np.abs(self.mean - self.heat) / se
        z[(self.stderr == 0) & (self.mean != self.heat)] = np.inf
        return float(z.max())


def first_moment_check(
    u0, v0, rho: float, gamma: float, t: float, N: int, rng: RngStream,
    dx: float = DEFAULT_DX, dt: float = DEFAULT_DT, boundary: str = PERIODIC, workers=None,
) -> FirstMomentReport:
    """Site-wise ``E[u_t]`` against the noise-free scheme applied to ``u0``."""
    params = SbmParams(rho, gamma, dt, dx)
    clamps = []

    def kernel(n, gen):
        end = run_paths(u0, v0, params, t, boundary, n, gen)
        clamps.append((end.clamp_count, end.site_steps))
        return end.u

    u = run_blocks(kernel, N, rng, workers=workers)
    count = sum(c for c, _ in clamps)
    steps = sum(s for _, s in clamps)
    rate = count / steps if steps else 0.0
    if rate > 0.01:
        log.warning("clamp rate %.4f exceeds 1%%", rate)
    return FirstMomentReport(
        u.mean(axis=0), u.std(axis=0, ddof=1) / math.sqrt(N),
        heat_flow_euler(u0, dx, dt, t, boundary), rate,
    )


def conservation_check(
    u0, v0, gamma: float, t: float, N: int, rng: RngStream,
    dx: float = DEFAULT_DX, dt: float = DEFAULT_DT, boundary: str = PERIODIC, workers=None,
) -> tuple[np.ndarray, np.ndarray]:
    """For rho = -1: per-path max deviation of ``u+v`` from heat flow, and clamp mass."""
    params = SbmParams(-1.0, gamma, dt, dx)
    w = heat_flow_euler(np.asarray(u0) + np.asarray(v0), dx, dt, t, boundary)

    def kernel(n, gen):
        end = run_paths(u0, v0, params, t, boundary, n, gen)
        dev = np.abs(end.u + end.v - w).max(axis=-1)
        return np.stack([dev, end.clamp_mass], axis=1)

    s = run_blocks(kernel, N, rng, workers=workers)
    return s[:, 0], s[:, 1]


def separation_stat(
    u0, v0, rho: float, gamma_list, t: float, site: int, N: int, rng: RngStream,
    dx: float = DEFAULT_DX, dt: float = DEFAULT_DT, boundary: str = ZERO_FLUX, workers=None,
) -> list[Estimate]:
    """``E[u_t(site) v_t(site)]`` for each branching rate in ``gamma_list``."""
    out = []
    for k, gamma in enumerate(gamma_list):
        params = SbmParams(rho, gamma, dt, dx)

        def kernel(n, gen, params=params):
            end = run_paths(u0, v0, params, t, boundary, n, gen)
            return end.u[:, site] * end.v[:, site]

        out.append(estimate(run_blocks(kernel, N, rng.child(k), workers=workers)))
    return out


@dataclass(frozen=True)
class RescalingReport:
    coarse: np.ndarray
    fine: np.ndarray
    ks_statistic: float
    p_value: float


def rescaling_check(
    u0, v0, rho: float, gamma: float, K: int, t: float, site: int, N: int, rng: RngStream,
    dx: float = DEFAULT_DX, dt: float = DEFAULT_DT, boundary: str = ZERO_FLUX, workers=None,
) -> RescalingReport:
    """Compare ``u_{K^2 t}(K x0)`` at rate ``gamma`` with ``u_t(x0)`` at rate ``K gamma``.

    ``u0, v0`` are sampled on the coarse lattice (spacing ``dx``).  The fine
    system uses spacing ``dx/K`` and step ``dt/K^2``; sampling a
    scale-covariant profile at the fine positions gives the same arrays, and
    site index ``site`` sits at ``K x0`` on the coarse lattice and at ``x0`` on
    the fine one.
    """
    if K < 1 or int(K) != K:
        raise ParameterError("K must be a positive integer")
    coarse_p = SbmParams(rho, gamma, dt, dx)
    fine_p = SbmParams(rho, K * gamma, dt / K**2, dx / K)

    def kernel(params, horizon):
        def run(n, gen):
            return run_paths(u0, v0, params, horizon, boundary, n, gen).u[:, site]

        return run

    a = run_blocks(kernel(coarse_p, K * K * t), N, rng.child(0), workers=workers)
    b = run_blocks(kernel(fine_p, t), N, rng.child(1), workers=workers)
    res = stats.ks_2samp(a, b)
    return RescalingReport(a, b, float(res.statistic), float(res.pvalue))


# ---------------------------------------------------------------------------
# Critical curve and moment growth


def critical_curve(rho: float) -> float:
    """Moment threshold ``pi / arccos(-rho)``; ``rho = -1`` gives ``inf``."""
    if not -1.0 <= rho < 1.0:
        raise DomainError("critical curve is defined for rho in [-1, 1)")
    if rho == -1.0:
        return math.inf
    return math.pi / math.acos(-rho)


@dataclass(frozen=True)
class MomentCurve:
    t_grid: np.ndarray
    moments: list[Estimate]
    kendall_tau: float
    p_value: float
    p_critical: float

    @property
    def increasing(self) -> bool:
        return self.kendall_tau > 0 and self.p_value < 0.01


def moment_growth_experiment(
    rho: float, gamma: float, p: float, t_grid, N: int, rng: RngStream,
    L: int = 64, dx: float = DEFAULT_DX, dt: float = DEFAULT_DT, tail_from: float | None = None, workers=None,
) -> MomentCurve:
    """``E[u_t(x)^p]`` from ``u = v = 1`` on a torus, with a Mann-Kendall trend test.

    The torus is translation invariant, so each path contributes the site
    average of ``u_t^p``.  The trend test uses grid points ``t >= tail_from``
    (default: the whole grid).
    """
    if p < 1:
        raise ParameterError("moment order must be >= 1")
    params = SbmParams(rho, gamma, dt, dx)
    t_grid = np.asarray(t_grid, dtype=float)
    stops = [n_steps(tg, dt) for tg in t_grid]

    def kernel(n, gen):
        state = FieldPair(np.ones(L), np.ones(L), dx, PERIODIC).replicate(n)
        out = np.empty((n, len(t_grid)))
        done = 0
        for g, k in enumerate(stops):
            for _ in range(k - done):
                state = step_sbm(state, params, gen)
            done = k
            out[:, g] = np.mean(state.u**p, axis=-1)
        return out

    s = run_blocks(kernel, N, rng, block_size=500, workers=workers)
    moments = [estimate(s[:, g]) for g in range(len(t_grid))]
    sel = t_grid >= (t_grid[0] if tail_from is None else tail_from)
    tau, pv = mann_kendall([m.value for m, keep in zip(moments, sel) if keep])
    return MomentCurve(t_grid, moments, tau, pv, critical_curve(rho) if rho < 1 else math.inf)


# ---------------------------------------------------------------------------
# Export


def write_snapshot_csv(path, state: FieldPair) -> None:
    """Columns ``site, x, u, v, Lambda`` for a single-path state."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site", "x", "u", "v", "Lambda"])
        for i in range(state.L):
            w.writerow([i, repr(float(state.positions[i])), repr(float(state.u[i])),
                        repr(float(state.v[i])), repr(float(state.lam[i]))])
