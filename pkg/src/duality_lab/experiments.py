"""Experiment registry: parameter schemas and runners for the config-driven CLI.

Every registered name maps to one library operation.  A runner receives the
validated parameter map, the replicate count, an :class:`RngStream` and the
worker count, and returns an :class:`Outcome`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from scipy import stats

from . import acceptance
from . import colour_dual as cd
from . import interface as ip
from . import sbm
from . import voter as vt
from .stochastic_core import Estimate, ParameterError, RngStream, estimate

REQUIRED = object()


@dataclass(frozen=True)
class Param:
    kind: str  # int | float | str | bool | ints | floats
    default: Any = REQUIRED
    help: str = ""
    choices: tuple = ()

    @property
    def required(self) -> bool:
        return self.default is REQUIRED

    def describe(self) -> dict:
        d = {"type": self.kind, "help": self.help}
        if not self.required:
            d["default"] = self.default
        if self.choices:
            d["choices"] = list(self.choices)
        return d


def _is_int(v) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return _is_int(v) or isinstance(v, float)


_CHECKS: dict[str, Callable[[Any], bool]] = {
    "int": _is_int,
    "float": _is_num,
    "str": lambda v: isinstance(v, str),
    "bool": lambda v: isinstance(v, bool),
    "ints": lambda v: isinstance(v, list) and all(_is_int(x) for x in v),
    "floats": lambda v: isinstance(v, list) and all(_is_num(x) for x in v),
}


@dataclass
class Metric:
    name: str
    value: float
    stderr: float
    n: int

    @classmethod
    def of(cls, name: str, e: Estimate) -> "Metric":
        return cls(name, float(e.value), float(e.stderr), int(e.n))

    @classmethod
    def exact(cls, name: str, value: float) -> "Metric":
        return cls(name, float(value), 0.0, 0)

    @property
    def ci(self) -> tuple[float, float]:
        if not math.isfinite(self.stderr):
            return (self.value, self.value)
        return (self.value - 1.96 * self.stderr, self.value + 1.96 * self.stderr)


@dataclass
class Outcome:
    metrics: list[Metric]
    series: dict = field(default_factory=dict)
    invariants: dict = field(default_factory=dict)  # name -> bool
    tables: dict = field(default_factory=dict)  # file name -> (header, rows)


@dataclass(frozen=True)
class Experiment:
    name: str
    operation: str  # dotted path of the library operation
    params: dict
    runner: Callable
    default_replicates: int = 1000

    def schema(self) -> dict:
        return {k: p.describe() for k, p in self.params.items()}

    def validate(self, given: dict) -> dict:
        unknown = sorted(set(given) - set(self.params))
        if unknown:
            raise ParameterError(f"unknown parameter(s) for {self.name}: {', '.join(unknown)}")
        out = {}
        for key, p in self.params.items():
            if key not in given:
                if p.required:
                    raise ParameterError(f"missing required parameter '{key}' for {self.name}")
                out[key] = p.default
                continue
            v = given[key]
            if not _CHECKS[p.kind](v):
                raise ParameterError(f"parameter '{key}' must be of type {p.kind}, got {v!r}")
            if p.choices and v not in p.choices:
                raise ParameterError(f"parameter '{key}' must be one of {list(p.choices)}")
            out[key] = float(v) if p.kind == "float" else v
        return out


REGISTRY: dict[str, Experiment] = {}


def register(name: str, operation: str, params: dict, replicates: int = 1000):
    def deco(fn):
        REGISTRY[name] = Experiment(name, operation, params, fn, replicates)
        return fn

    return deco


# ---------------------------------------------------------------------------
# Initial data helpers

SPIN_INITS = ("heaviside", "alternating")
FIELD_INITS = ("heaviside", "smooth", "constant")


def _spins(kind: str, L: int) -> vt.SpinField:
    return vt.SpinField.heaviside(L) if kind == "heaviside" else vt.SpinField.alternating(L)


def _fields(kind: str, L: int, dx: float) -> tuple[np.ndarray, np.ndarray, str]:
    """``(u0, v0, boundary)`` for a named initial condition."""
    if kind == "heaviside":
        h = sbm.heaviside_init(L, dx)
        return h.u, h.v, sbm.ZERO_FLUX
    if kind == "smooth":
        x = np.arange(L)
        return 1 + 0.5 * np.sin(2 * np.pi * x / L), 1 + 0.5 * np.cos(2 * np.pi * x / L), sbm.PERIODIC
    return np.ones(L), np.ones(L), sbm.PERIODIC


def _two_sided(prefix: str, r) -> list[Metric]:
    out = [Metric.of(f"{prefix}lhs", r.lhs), Metric.of(f"{prefix}rhs", r.rhs)]
    if r.reference is not None:
        out.append(Metric.exact(f"{prefix}reference", r.reference))
    out.append(Metric.exact(f"{prefix}z_lhs_rhs", r.z))
    return out


def _curve(x, ests, label="") -> dict:
    return {"x": [float(v) for v in x], "y": [float(e.value) for e in ests],
            "stderr": [float(e.stderr) for e in ests], "label": label}


def _step(x):
    return (np.asarray(x) <= 0).astype(float)


# ---------------------------------------------------------------------------
# Voter lattice


@register("check_voter_duality", "voter.check_voter_duality", {
    "L": Param("int", 8, "cycle length"),
    "A": Param("ints", [0, 1], "sites of the product observable"),
    "t": Param("float", 1.0, "time"),
    "init": Param("str", "alternating", "initial spins", SPIN_INITS),
}, 100_000)
def _voter_duality(p, N, rng, workers):
    r = vt.check_voter_duality(_spins(p["init"], p["L"]), p["A"], p["t"], N, rng, workers=workers)
    return Outcome(_two_sided("", r))


@register("parity_duality_check", "voter.parity_duality_check", {
    "L": Param("int", 8), "x": Param("int", 0), "y": Param("int", 1), "t": Param("float", 1.0),
    "init": Param("str", "heaviside", "initial spins", SPIN_INITS),
}, 100_000)
def _parity(p, N, rng, workers):
    r = vt.parity_duality_check(_spins(p["init"], p["L"]), p["x"], p["y"], p["t"], N, rng, workers=workers)
    return Outcome(_two_sided("", r))


@register("clustering_curve", "voter.clustering_curve", {
    "L": Param("int", 16), "x": Param("int", 6), "y": Param("int", 10),
    "t_grid": Param("floats", REQUIRED, "nondecreasing observation times"),
    "init": Param("str", "heaviside", "initial spins", SPIN_INITS),
}, 4000)
def _clustering(p, N, rng, workers):
    c = vt.clustering_curve(_spins(p["init"], p["L"]), p["x"], p["y"], p["t_grid"], N, rng, workers=workers)
    ms = [Metric.of(f"agree_t={t:g}", e) for t, e in zip(c.t_grid, c.agree)]
    ms += [Metric.exact(f"meeting_bound_t={t:g}", b) for t, b in zip(c.t_grid, c.lower_bound)]
    return Outcome(ms, {"curve": _curve(c.t_grid, c.agree, "P(agree)")})


# ---------------------------------------------------------------------------
# SBM

_SBM = {
    "L": Param("int", 64), "rho": Param("float", -0.5), "gamma": Param("float", 1.0),
    "t": Param("float", 0.5), "dx": Param("float", sbm.DEFAULT_DX), "dt": Param("float", sbm.DEFAULT_DT),
}


@register("first_moment_check", "sbm.first_moment_check",
          {**_SBM, "init": Param("str", "smooth", "initial fields", FIELD_INITS)}, 10_000)
def _first_moment(p, N, rng, workers):
    u0, v0, bnd = _fields(p["init"], p["L"], p["dx"])
    r = sbm.first_moment_check(u0, v0, p["rho"], p["gamma"], p["t"], N, rng, p["dx"], p["dt"], bnd, workers)
    ests = [Estimate(m, s, N) for m, s in zip(r.mean, r.stderr)]
    ms = [Metric.exact("max_site_z", r.max_z), Metric.exact("clamp_rate", r.clamp_rate)]
    return Outcome(ms, {"curve": _curve(np.arange(p["L"]), ests, "E[u_t]")})


@register("conservation_check", "sbm.conservation_check", {
    "L": Param("int", 64), "gamma": Param("float", 1.0), "t": Param("float", 0.5),
    "dx": Param("float", sbm.DEFAULT_DX), "dt": Param("float", sbm.DEFAULT_DT),
}, 1000)
def _conservation(p, N, rng, workers):
    x = np.arange(p["L"])
    u0 = np.where(x < p["L"] // 2, 1.0, 0.0)
    dev, budget = sbm.conservation_check(u0, 1 - u0, p["gamma"], p["t"], N, rng, p["dx"], p["dt"],
                                         workers=workers)
    ok = bool(np.all(dev <= 10 * budget + 1e-12))
    return Outcome([Metric.exact("max_deviation", dev.max()), Metric.of("clamp_mass", estimate(budget))],
                   invariants={"deviation_within_clamp_budget": ok})


def _bump_setup(p):
    L = p["L"]
    x = np.arange(L)
    q = L // 8
    u0 = np.where((x >= q) & (x < 3 * q), 1.0, 0.0)
    v0 = np.where((x >= 2 * q) & (x < 4 * q), 1.0, 0.0)
    phi = np.where((x >= q + q // 2) & (x < 2 * q + q // 2), 0.5, 0.0)
    psi = np.where((x >= 2 * q) & (x < 3 * q + q // 2), 0.5, 0.0)
    return u0, v0, phi, psi


_DUALITY = {**_SBM, "L": Param("int", 32), "t": Param("float", 0.25)}


@register("check_self_duality", "sbm.check_self_duality", _DUALITY, 10_000)
def _self_duality(p, N, rng, workers):
    r = sbm.check_self_duality(*_bump_setup(p), p["rho"], p["gamma"], p["t"], N, rng, p["dx"], p["dt"],
                               workers=workers)
    return Outcome(_two_sided("re_", r.real) + _two_sided("im_", r.imag))


@register("martingale_residual", "sbm.martingale_residual", _DUALITY, 10_000)
def _martingale(p, N, rng, workers):
    r = sbm.martingale_residual(*_bump_setup(p), p["rho"], p["gamma"], p["t"], N, rng, p["dx"], p["dt"],
                                workers=workers)
    return Outcome([Metric.of("residual_re", r.real), Metric.of("residual_im", r.imag)])


@register("separation_stat", "sbm.separation_stat", {
    "L": Param("int", 65), "rho": Param("float", -0.5), "gammas": Param("floats", [1.0, 10.0, 100.0]),
    "t": Param("float", 0.5), "site": Param("int", -1, "site index; -1 picks the junction"),
    "dx": Param("float", sbm.DEFAULT_DX), "dt": Param("float", sbm.DEFAULT_DT),
}, 4000)
def _separation(p, N, rng, workers):
    u0, v0, bnd = _fields("heaviside", p["L"], p["dx"])
    site = p["L"] // 2 if p["site"] < 0 else p["site"]
    s = sbm.separation_stat(u0, v0, p["rho"], p["gammas"], p["t"], site, N, rng, p["dx"], p["dt"], bnd, workers)
    return Outcome([Metric.of(f"uv_gamma={g:g}", e) for g, e in zip(p["gammas"], s)],
                   {"curve": _curve(p["gammas"], s, "E[u v] at junction")})


@register("moment_growth_experiment", "sbm.moment_growth_experiment", {
    "rho": Param("float", -0.5), "gamma": Param("float", 1.0), "p": Param("float", 2.0),
    "t_grid": Param("floats", REQUIRED), "L": Param("int", 64),
    "dx": Param("float", sbm.DEFAULT_DX), "dt": Param("float", sbm.DEFAULT_DT),
}, 1000)
def _moment_growth(p, N, rng, workers):
    c = sbm.moment_growth_experiment(p["rho"], p["gamma"], p["p"], p["t_grid"], N, rng, p["L"], p["dx"],
                                     p["dt"], workers=workers)
    ms = [Metric.of(f"moment_t={t:g}", m) for t, m in zip(c.t_grid, c.moments)]
    ms += [Metric.exact("kendall_tau", c.kendall_tau), Metric.exact("trend_p_value", c.p_value),
           Metric.exact("critical_p", c.p_critical)]
    return Outcome(ms, {"curve": _curve(c.t_grid, c.moments, f"E[u_t^{p['p']:g}]")})


# ---------------------------------------------------------------------------
# Colour dual


@register("check_moment_duality", "colour_dual.check_moment_duality", {
    **_SBM, "L": Param("int", 32), "x": Param("ints", [5, 6]), "c": Param("ints", [1, 2]),
    "init": Param("str", "smooth", "initial fields", FIELD_INITS),
}, 100_000)
def _moment_duality(p, N, rng, workers):
    u0, v0, bnd = _fields(p["init"], p["L"], p["dx"])
    r = cd.check_moment_duality(u0, v0, p["x"], p["c"], p["gamma"], p["rho"], p["t"], N, rng, p["dx"],
                                p["dt"], bnd, workers)
    exact = cd.moment_dual_exact(u0, v0, p["x"], p["c"], p["gamma"], p["rho"], p["t"], p["dx"], bnd)
    ms = _two_sided("", r.check) + [Metric.exact("dual_exact", exact), Metric.exact("weight_cv", r.weight_cv)]
    return Outcome(ms)


@register("gamma_convergence", "colour_dual.gamma_convergence", {
    "paths": Param("int", 10), "gammas": Param("floats", [1.0, 10.0, 100.0, 1000.0]),
    "t": Param("float", 0.5), "L": Param("int", 16), "dx": Param("float", 0.25),
    "c": Param("ints", [1, 1]),
}, 1)
def _gamma_conv(p, N, rng, workers):
    paths = [cd.sample_walk_path([0, 1], p["t"], rng.child(i), L=p["L"], dx=p["dx"]) for i in range(p["paths"])]
    d = cd.gamma_convergence(paths, p["c"], p["gammas"], p["t"])
    logd = [float(acceptance.mpf_log10(v)) for v in d]
    ms = [Metric.exact(f"log10_sup_distance_gamma={g:g}", v) for g, v in zip(p["gammas"], logd)]
    return Outcome(ms, {"curve": {"x": list(p["gammas"]), "y": logd, "stderr": [], "label": "log10 sup |M - M_inf|"}})


# ---------------------------------------------------------------------------
# Interfaces


@register("simulate_interface_sde", "interface.simulate_interface_sde", {
    "u_left": Param("float", 1.0, "u0 = u_left on x <= 0"),
    "v_right": Param("float", 2.0, "v0 = v_right on x >= 0"),
    "t": Param("float", 1.0), "dt": Param("float", 1e-3),
}, 5000)
def _interface_sde(p, N, rng, workers):
    u0 = ip.PiecewiseConstantProfile.step(p["u_left"], 0.0)
    v0 = ip.PiecewiseConstantProfile.step(0.0, p["v_right"])
    _, I = ip.simulate_interface_sde(0.0, u0 + v0, p["dt"], p["t"], rng, N=N)
    ks = stats.kstest(I, lambda x: 1.0 - ip.interface_cdf_closed_form(u0, v0, p["t"], x)).pvalue
    return Outcome([Metric.of("interface_position", estimate(I)), Metric.exact("ks_p_value", ks)],
                   {"samples": [float(v) for v in I]})


@register("simulate_abm_colouring", "interface.simulate_abm_colouring", {
    "t": Param("float", 1.0), "dt": Param("float", 1e-2),
}, 2000)
def _tribe(p, N, rng, workers):
    st, _, _ = ip.simulate_abm_colouring([0.0], 1, 1.0, p["t"], rng, N=N, dt=p["dt"])
    x = st.interfaces.positions[:, 0]
    ks = stats.kstest(x / math.sqrt(p["t"]), "norm").pvalue
    return Outcome([Metric.of("interface_position", estimate(x)), Metric.exact("ks_p_value", ks)],
                   {"samples": [float(v) for v in x]})


@register("check_coalescing_duality", "colour_dual.check_coalescing_duality", {
    "x": Param("floats", [-0.2, 0.3]), "t": Param("float", 0.5), "dt": Param("float", 1e-3),
}, 100_000)
def _coalescing(p, N, rng, workers):
    r = cd.check_coalescing_duality(_step, p["x"], p["t"], N, rng, p["dt"], workers)
    return Outcome(_two_sided("", r))


@register("check_annihilating_moment_duality", "colour_dual.check_annihilating_moment_duality", {
    "x": Param("floats", [-0.2, 0.3]), "gamma": Param("float", math.inf),
    "t": Param("float", 0.5), "dt": Param("float", 1e-3), "eps": Param("float", ip.DEFAULT_EPS),
}, 100_000)
def _annihilating(p, N, rng, workers):
    r = cd.check_annihilating_moment_duality(_step, p["x"], p["gamma"], p["t"], N, rng, p["dt"], p["eps"],
                                             workers=workers)
    return Outcome(_two_sided("", r))


_ENTRANCE = {
    "kind": Param("str", ip.LATTICE, "initial configuration", ip.INITS),
    "circumference": Param("float", 1.0), "dt": Param("float", 1e-4),
}


@register("entrance_law_experiment", "interface.entrance_law_experiment", {
    **_ENTRANCE, "n_list": Param("ints", [10, 20, 40, 80]), "t_grid": Param("floats", [0.1]),
}, 1000)
def _entrance(p, N, rng, workers):
    tab = ip.entrance_law_experiment(p["kind"], p["n_list"], p["t_grid"], N, rng, p["circumference"], p["dt"],
                                     workers)
    ms = [Metric.of(f"count_n={n}_t={t:g}", tab.mean(n, k)) for n in p["n_list"] for k, t in enumerate(p["t_grid"])]
    last = len(p["t_grid"]) - 1
    return Outcome(ms, {"curve": _curve(p["n_list"], [tab.mean(n, last) for n in p["n_list"]],
                                        f"mean count at t={p['t_grid'][-1]:g}")})


@register("entrance_consistency_check", "interface.entrance_consistency_check", {
    **_ENTRANCE, "n": Param("int", 40), "s": Param("float", 0.05), "t": Param("float", 0.1),
}, 5000)
def _consistency(p, N, rng, workers):
    r = ip.entrance_consistency_check(p["kind"], p["n"], p["s"], p["t"], N, rng, p["circumference"], p["dt"],
                                      workers)
    return Outcome([Metric.of("count_direct", r.direct_mean), Metric.of("count_split", r.split_mean),
                    Metric.of("count_half_dt", r.halved_mean), Metric.exact("chi2_p_value", r.count_p),
                    Metric.exact("gap_ks_p_value", r.gap_p)])


@register("thinning_experiment", "interface.thinning_experiment", {
    **_ENTRANCE, "n": Param("int", 40), "t_grid": Param("floats", [0.1]),
}, 2000)
def _thinning(p, N, rng, workers):
    r = ip.thinning_experiment(p["kind"], p["n"], p["t_grid"], N, rng, p["circumference"], p["dt"], workers)
    ms = []
    for t, a, c, (q, se) in zip(r.t_grid, r.annihilating, r.coalescing, r.ratio):
        ms += [Metric.of(f"annihilating_t={t:g}", a), Metric.of(f"coalescing_t={t:g}", c),
               Metric(f"ratio_t={t:g}", q, se, a.n)]
    ms.append(Metric.exact("coupling_violations", r.coupling_violations))
    ms.append(Metric.exact("coupled_law_p", r.coupled_law_p))
    return Outcome(ms, invariants={"coalescing_dominates_annihilating": r.coupling_violations == 0})


@register("record_trajectories", "interface.record_trajectories", {
    "n": Param("int", 20, "particles"), "mode": Param("str", ip.ANNIHILATING, "interaction", ip.MODES),
    "t": Param("float", 0.01), "dt": Param("float", 1e-5), "every": Param("int", 10, "record every k steps"),
    "circumference": Param("float", 1.0),
}, 1)
def _trajectories(p, N, rng, workers):
    C = p["circumference"]
    x0 = (np.arange(p["n"]) + 0.5) * C / p["n"]
    sys = ip.ParticleSystem1D(x0, p["mode"], C)
    rows, final = ip.record_trajectories(sys, p["dt"], p["t"], rng, p["every"])
    return Outcome([Metric.exact("alive_at_t", int(final.counts[0]))],
                   {"fan": {"rows": [list(r) for r in rows], "circumference": C}},
                   tables={"particles.csv": (["time", "particle_id", "position", "alive"], rows)})


# ---------------------------------------------------------------------------
# Acceptance suite


@register("acceptance_suite", "acceptance.run_suite", {
    "criteria": Param("ints", [], "criterion numbers; empty runs all"),
    "scale": Param("float", 1.0, "replicate-count multiplier"),
}, 1)
def _acceptance(p, N, rng, workers):
    res = acceptance.run_suite(p["criteria"] or None, p["scale"], workers, rng.master_seed, echo=None)
    ms = [Metric.exact(f"criterion_{r.number:02d}_pass", float(r.passed)) for r in res]
    table = [(r.number, r.title, "PASS" if r.passed else "FAIL", r.detail, r.note) for r in res]
    return Outcome(ms, invariants={"all_criteria_pass": all(r.passed for r in res)},
                   tables={"acceptance.csv": (["criterion", "title", "status", "detail", "note"], table)})
