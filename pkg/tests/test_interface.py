import math

import numpy as np
import pytest
from scipy import stats

from duality_lab import acceptance
from duality_lab import interface as ip
from duality_lab.stochastic_core import ParameterError, PreconditionError, RngStream, estimate


def gen(seed=0):
    return RngStream(seed).generator()


def test_closed_forms():
    assert ip.pair_survival_prob(1.0, 0.25) == pytest.approx(2 * stats.norm.cdf(1 / math.sqrt(0.5)) - 1)
    assert ip.pair_survival_prob(0.7, 0.3) + ip.meeting_prob(0.7, 0.3) == pytest.approx(1.0)


def test_profile_heat_flow():
    p = ip.PiecewiseConstantProfile.step(1.0, 0.0)
    assert float(p.heat(1.0, 0.0)) == pytest.approx(0.5)
    assert float(p.heat(0.5, 0.3)) == pytest.approx(stats.norm.sf(0.3 / math.sqrt(0.5)))
    w = p + ip.PiecewiseConstantProfile.step(0.0, 2.0)
    assert float(w(-1.0)) == 1.0 and float(w(1.0)) == 2.0
    h = 1e-6
    assert float(w.heat_dx(0.4, 0.2)) == pytest.approx(float((w.heat(0.4, 0.2 + h) - w.heat(0.4, 0.2 - h)) / (2 * h)), rel=1e-5)


def test_unknown_mode_rejected():
    with pytest.raises(ParameterError):
        ip.ParticleSystem1D(np.zeros(2), "sticky")


def test_single_particle_is_brownian():
    sys = ip.ParticleSystem1D(np.zeros((10_000, 1)), ip.INDEPENDENT)
    end = ip.evolve_particles(sys, 0.05, 1.0, gen(1))
    x = end.positions[:, 0]
    se = math.sqrt(2.0 / x.size)  # sd of the sample variance of N(0,1)
    assert abs(x.var() - 1.0) < 3 * se


@pytest.mark.parametrize("dt", [1e-2, 1e-3])
def test_pair_survival_matches_reflection(dt):
    d, t = 0.5, 0.25
    sys = ip.ParticleSystem1D(np.tile([0.0, d], (20_000, 1)), ip.ANNIHILATING)
    end = ip.evolve_particles(sys, dt, t, gen(2))
    e = estimate(end.counts == 2)
    assert e.within(float(ip.pair_survival_prob(d, t)))


def test_coalescing_pair_meeting():
    d, t = 0.5, 0.25
    sys = ip.ParticleSystem1D(np.tile([0.0, d], (20_000, 1)), ip.COALESCING)
    end = ip.evolve_particles(sys, 1e-3, t, gen(3))
    assert estimate(end.counts == 1).within(float(ip.meeting_prob(d, t)))


def test_torus_parity_preserved():
    sys = ip.ParticleSystem1D(ip.pad_rows([gen(4).random(10) for _ in range(200)]), ip.ANNIHILATING, 1.0)
    end = ip.evolve_particles(sys, 1e-3, 0.2, gen(5))
    assert np.all(end.counts % 2 == 0)
    assert np.all(end.counts <= 10)


def test_delayed_modes_kill_slower():
    d, t = 0.1, 0.1
    x = np.tile([0.0, d], (4000, 1))
    fast = ip.evolve_particles(ip.ParticleSystem1D(x, ip.ANNIHILATING), 1e-4, t, gen(6))
    slow = ip.evolve_particles(ip.ParticleSystem1D(x, ip.DELAYED_ANNIHILATING, gamma=1.0, eps=0.01), 1e-4, t, gen(7))
    assert slow.counts.mean() > fast.counts.mean()
    with pytest.raises(ParameterError):
        ip.ParticleSystem1D(x, ip.DELAYED_COALESCING, gamma=0.0)


def test_zero_time_evolution_is_identity():
    sys = ip.ParticleSystem1D(np.array([[0.1, 0.4]]), ip.ANNIHILATING, 1.0)
    end = ip.evolve_particles(sys, 1e-3, 0.0, gen())
    assert np.array_equal(end.positions, sys.positions)


def test_tribe_interface_gaussian():
    st, _, _ = ip.simulate_abm_colouring([0.0], 1, 1.0, 1.0, RngStream(8), N=2000, dt=1e-2)
    assert stats.kstest(st.interfaces.positions[:, 0], "norm").pvalue > 0.01


def test_no_interfaces_keeps_one_colour():
    grid = np.linspace(-2, 2, 9)
    _, u, v = ip.simulate_abm_colouring([], 1, 1.0, 0.5, RngStream(9), grid=grid, N=3)
    assert np.all(u == 1.0) and np.all(v == 0.0)


def test_two_interfaces_survival():
    d, t = 0.5, 0.25
    st, _, _ = ip.simulate_abm_colouring([0.0, d], 1, 1.0, t, RngStream(10), N=20_000, dt=1e-3)
    assert estimate(st.interfaces.counts == 2).within(float(ip.pair_survival_prob(d, t)))


def test_colouring_rejects_bad_input():
    with pytest.raises(PreconditionError):
        ip.simulate_abm_colouring([0.0, 0.0], 1, 1.0, 0.1, RngStream(0))
    with pytest.raises(PreconditionError):
        ip.simulate_abm_colouring([0.1], 1, 1.0, 0.1, RngStream(0), circumference=1.0)


def test_colour_at_on_torus_uses_origin_flips():
    sys = ip.ParticleSystem1D(np.array([[0.2, 0.6]]), ip.ANNIHILATING, 1.0)
    st = ip.ColouringState(sys, np.array([1]))
    assert list(st.colour_at([0.1, 0.4, 0.8])[0]) == [1, 2, 1]
    sys.origin_flips[:] = 1
    assert list(st.colour_at([0.1, 0.4, 0.8])[0]) == [2, 1, 2]


def test_continuous_voter_cases():
    ones = ip.continuous_voter(lambda y: np.ones(np.shape(y)), [0.0, 0.4], 0.3, RngStream(11), N=200)
    assert np.all(ones == 1)
    step = lambda y: (np.asarray(y) <= 0).astype(float)
    single = ip.continuous_voter(step, [0.3], 0.5, RngStream(12), N=20_000)
    assert estimate(single[:, 0]).within(float(ip.PiecewiseConstantProfile.step(1.0, 0.0).heat(0.5, 0.3)))
    half = lambda y: np.full(np.shape(y), 0.5)
    pair = ip.continuous_voter(half, [0.0, 0.5], 0.25, RngStream(13), N=20_000)
    pc = float(ip.meeting_prob(0.5, 0.25))
    assert estimate(pair.prod(axis=1)).within(0.5 * pc + 0.25 * (1 - pc))


def test_sde_flat_profile_is_brownian():
    _, I = ip.simulate_interface_sde(0.0, ip.PiecewiseConstantProfile.constant(1.0), 1e-2, 1.0, RngStream(14), N=3000)
    assert stats.kstest(I, "norm").pvalue > 0.01


def test_sde_symmetric_profile():
    w0 = ip.PiecewiseConstantProfile(np.array([-1.0, 1.0]), np.array([2.0, 1.0, 2.0]))
    _, I = ip.simulate_interface_sde(0.0, w0, 1e-2, 1.0, RngStream(15), N=5000)
    assert abs(stats.skew(I)) < 3 * math.sqrt(6 / I.size)


def test_sde_law_closed_form():
    u0 = ip.PiecewiseConstantProfile.step(1.0, 0.0)
    v0 = ip.PiecewiseConstantProfile.step(0.0, 2.0)
    _, I = ip.simulate_interface_sde(0.0, u0 + v0, 1e-3, 1.0, RngStream(16), N=5000)
    assert stats.kstest(I, lambda x: 1 - ip.interface_cdf_closed_form(u0, v0, 1.0, x)).pvalue > 0.01


def test_sde_keep_path_and_grid():
    grid, P = ip.simulate_interface_sde(0.0, ip.PiecewiseConstantProfile.constant(1.0), 0.1, 1.0, RngStream(0), N=4,
                                        keep_path=True)
    assert P.shape == (4, grid.size) and grid[-1] == pytest.approx(1.0)
    assert np.all(np.diff(grid) > 0)


def test_sde_rejects_vanishing_profile():
    with pytest.raises(PreconditionError):
        ip.simulate_interface_sde(0.0, ip.PiecewiseConstantProfile.constant(0.0), 0.1, 1.0, RngStream(0))


def test_entrance_inits():
    assert ip.entrance_init(ip.LATTICE, 40).size == 40
    q = ip.entrance_init(ip.PAIRED_QUARTER, 10)
    assert q.size == 20 and np.diff(q)[0] == pytest.approx(1 / 40)
    p = ip.entrance_init(ip.POISSON, 40, gen=gen(17))
    assert p.size % 2 == 0
    assert ip.entrance_init(ip.LATTICE, 41).size == 40


def test_paired_square_dies_out():
    tab = ip.entrance_law_experiment(ip.PAIRED_SQUARE, [10, 40], [0.1], 300, RngStream(18))
    assert tab.mean(40, 0).value < tab.mean(10, 0).value


def test_lattice_and_poisson_agree():
    lat = ip.entrance_law_experiment(ip.LATTICE, [40], [0.1], 400, RngStream(19))
    poi = ip.entrance_law_experiment(ip.POISSON, [40], [0.1], 400, RngStream(20))
    assert ip.count_two_sample(lat.counts[40][:, 0], poi.counts[40][:, 0]) > 0.01


def test_density_atomic_at_time_zero():
    d = ip.estimate_npoint_density(ip.LATTICE, 10, 0.0, [0.3], 0.01, 10, RngStream(21))
    assert d.atomic
    assert d.value.value == pytest.approx(1 / 0.02)


def test_dead_particles_never_hit():
    d = ip.estimate_npoint_density(ip.LATTICE, 4, 5.0, [0.5], 0.01, 200, RngStream(22))
    assert d.value.value < 5


def test_two_point_repulsion():
    # disjoint windows closer than the diffusion scale
    one = ip.estimate_npoint_density(ip.LATTICE, 40, 0.005, [0.5], 0.01, 4000, RngStream(22))
    two = ip.estimate_npoint_density(ip.LATTICE, 40, 0.005, [0.5, 0.53], 0.01, 4000, RngStream(23))
    assert two.value.value + 3 * two.value.stderr < one.value.value**2
    assert not one.atomic


def test_consistency_split_vs_direct():
    r = ip.entrance_consistency_check(ip.LATTICE, 40, 0.05, 0.1, 1000, RngStream(24))
    assert r.count_p > 0.01
    assert r.dt_shift < r.ci_width


def test_thinning_short_time_and_coupling():
    r = ip.thinning_experiment(ip.LATTICE, 20, [1e-4, 0.05], 300, RngStream(25))
    assert r.ratio[0][0] == pytest.approx(1.0, abs=0.02)
    assert r.coupling_violations == 0
    assert r.coupled_law_p > 0.01


def test_parity_tracking_matches_annihilation():
    x0 = ip.entrance_init(ip.LATTICE, 20)
    sc = ip.ParticleSystem1D(np.tile(x0, (400, 1)), ip.COALESCING, 1.0, parity=np.ones(20, np.int8))
    sc = ip.evolve_particles(sc, 1e-4, 0.05, gen(28))
    odd = (sc.alive & (sc.parity == 1)).sum(axis=1)
    assert np.all(odd % 2 == 0) and np.all(odd <= sc.counts)
    # total mass is conserved mod 2 in every row
    assert np.all(sc.parity[sc.alive].sum() % 2 == 0)


@pytest.mark.slow
def test_thinning_ratio_golden():
    gold = acceptance.load_golden()["thinning_ratio_lattice40_t0.1"]
    r = ip.thinning_experiment(ip.LATTICE, 40, [0.1], 2000, RngStream(acceptance.SEED, 300))
    value, se = r.ratio[0]
    assert abs(value - gold["value"]) <= 3 * math.hypot(se, gold["stderr"])


def test_trajectories_and_fan(tmp_path):
    x0 = (np.arange(20) + 0.5) / 20
    rows, final = ip.record_trajectories(ip.ParticleSystem1D(x0, ip.ANNIHILATING, 1.0), 1e-5, 0.005,
                                         RngStream(26), every=5)
    ip.write_particles_csv(tmp_path / "p.csv", rows)
    head = (tmp_path / "p.csv").read_text().splitlines()[0]
    assert head == "time,particle_id,position,alive"
    svg = ip.fan_svg(rows, 1.0)
    assert svg.count("<polyline") == 20
    ids_alive_last = {r[1] for r in rows if r[0] == rows[-1][0] and r[3]}
    assert len(ids_alive_last) == final.counts[0]


def test_colouring_csv(tmp_path):
    grid = np.linspace(-1, 1, 5)
    _, u, v = ip.simulate_abm_colouring([0.0], 1, 1.0, 0.1, RngStream(27), grid=grid)
    ip.write_colouring_csv(tmp_path / "c.csv", grid, u[0], v[0])
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 6
