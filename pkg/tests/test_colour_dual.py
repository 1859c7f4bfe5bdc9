import math

import numpy as np
import pytest

from duality_lab import colour_dual as cd
from duality_lab import interface as ip
from duality_lab import sbm
from duality_lab.stochastic_core import ParameterError, PreconditionError, RngStream, estimate


def smooth(L):
    x = np.arange(L)
    return 1 + 0.5 * np.sin(2 * np.pi * x / L), 1 + 0.5 * np.cos(2 * np.pi * x / L)


def fixed_path(ell, dx=1.0):
    # two walkers sitting together for local time ell
    return cd.WalkPath(np.array([0.0]), np.array([[0, 0]]), ell * dx, dx)


def test_colouring_index_roundtrip():
    for k in range(16):
        assert cd.colouring_index(cd.colouring_of(k, 4)) == k
    assert cd.colouring_index((1, 2)) == 2


def test_single_walker_never_flips():
    d = cd.simulate_coloured_dual([3], [1], 5.0, -0.5, 2.0, RngStream(0), N=200, L=16)
    assert np.all(d.colours == 1)
    assert np.all(d.L_eq == 0) and np.all(d.L_neq == 0)


def test_gamma_zero_frozen_colours():
    d = cd.simulate_coloured_dual([3, 3], [1, 1], 0.0, -0.5, 2.0, RngStream(1), N=200, L=16)
    assert np.all(d.colours == 1)
    assert np.all(d.weights(0.0, -0.5) == 1.0)
    assert np.all(d.L_eq > 0)


def test_bad_colours_rejected():
    with pytest.raises(ParameterError):
        cd.simulate_coloured_dual([0, 1], [1, 3], 1.0, 0.0, 1.0, RngStream(0))


def test_flip_probability_matches_exact():
    gamma, t, L, dx = 4.0, 0.5, 8, 0.5
    d = cd.simulate_coloured_dual([0, 0], [1, 1], gamma, -0.5, t, RngStream(2), N=40_000, L=L, dx=dx)
    e = estimate(d.flips > 0)
    assert e.within(cd.flip_probability_exact(gamma, t, dx, L))


def test_local_time_means_match_exact():
    # E[L_pair] is the derivative of the flip survival at gamma -> 0
    t, L, dx, h = 0.5, 8, 0.5, 1e-5
    d = cd.simulate_coloured_dual([0, 0], [1, 1], 0.0, 0.0, t, RngStream(3), N=40_000, L=L, dx=dx)
    ref = cd.flip_probability_exact(h, t, dx, L) / h
    assert estimate(d.L_pair[:, 0]).within(ref)


def test_moment_duality_single_walker_is_heat_flow():
    L, dx = 32, sbm.DEFAULT_DX
    u0, v0 = smooth(L)
    r = cd.check_moment_duality(u0, v0, [5], [1], 1.0, -0.5, 0.5, 20_000, RngStream(4))
    assert r.check.rhs.within(float(sbm.heat_semigroup(u0, dx, 0.5)[5]))
    assert r.weight_cv == 0


def test_moment_duality_stepping_stone_bounds():
    L = 16
    ones = np.ones(L)
    r = cd.check_moment_duality(ones, ones, [3, 3], [1, 2], 1.0, -1.0, 0.5, 4000, RngStream(5))
    assert r.check.rhs.value <= 1 and r.check.lhs.value <= 1 + 1e-12


def test_moment_duality_two_walkers():
    L = 32
    u0, v0 = smooth(L)
    r = cd.check_moment_duality(u0, v0, [5, 6], [1, 2], 1.0, -0.5, 0.5, 20_000, RngStream(6))
    exact = cd.moment_dual_exact(u0, v0, [5, 6], [1, 2], 1.0, -0.5, 0.5)
    assert r.check.overlapping
    assert r.check.rhs.within(exact)


def test_second_moment_difference_chain_matches_full_chain():
    L, dx = 8, 0.5
    ones = np.ones(L)
    for rho in (-0.5, 0.5):
        full = cd.moment_dual_exact(ones, ones, [0, 0], [1, 1], 1.0, rho, 2.0, dx)
        assert cd.second_moment_exact(rho, 1.0, 2.0, L=L, dx=dx) == pytest.approx(full, rel=1e-8)


def test_second_moment_below_bound_negative_rho():
    assert cd.second_moment_exact(-0.5, 1.0, 50.0) < 1 + 1 / 0.5


def test_measure_without_colocation_is_delta():
    path = cd.WalkPath(np.array([0.0]), np.array([[0, 3]]), 1.0)
    traj = cd.evolve_colour_measure(path, [1, 2], 5.0, -0.5)
    assert np.array_equal(traj.weights[-1], np.eye(4)[cd.colouring_index((1, 2))])


def test_rho_zero_closed_form():
    ell, gamma = 0.7, 1.3
    M = cd.evolve_colour_measure(fixed_path(ell), [1, 1], gamma, 0.0).weights[-1]
    assert M[cd.colouring_index((1, 1))] == pytest.approx(1.0, abs=1e-10)
    assert M[1] + M[2] == pytest.approx(gamma * ell, abs=1e-10)


def test_negative_rho_closed_form():
    ell, gamma, rho = 0.9, 2.0, -0.5
    M = cd.evolve_colour_measure(fixed_path(ell), [1, 1], gamma, rho).weights[-1]
    assert M[1] == pytest.approx((math.exp(gamma * rho * ell) - 1) / (2 * rho), abs=1e-10)
    assert M[2] == pytest.approx(M[1], abs=1e-12)


def test_measure_matches_conditional_mc():
    base = RngStream(7)
    for i in range(3):
        path = cd.sample_walk_path([0, 1], 2.0, base.child(2 * i), L=8)
        exact = cd.evolve_colour_measure(path, [1, 1], 1.0, -0.5).weights[-1]
        mc = cd.conditional_colour_mc(path, [1, 1], 1.0, -0.5, 20_000, base.child(2 * i + 1))
        for e, m in zip(exact, mc):
            assert m.within(e)


def test_high_precision_agrees_with_float():
    path = cd.sample_walk_path([0, 1], 1.0, RngStream(8), L=8)
    a = cd.evolve_colour_measure(path, [1, 2], 1.0, -0.5).weights[-1]
    b = cd.evolve_colour_measure(path, [1, 2], 1.0, -0.5, precision=30).weights[-1]
    assert np.allclose(a, [float(v) for v in b], atol=1e-12)


def test_k_infinity_cases():
    e = np.eye(4)
    assert np.all(cd.k_infinity_apply(e[cd.colouring_index((1, 2))], 0, 1) == 0)
    out = cd.k_infinity_apply(e[cd.colouring_index((1, 1))], 0, 1)
    ref = e[cd.colouring_index((1, 1))] + 0.5 * e[cd.colouring_index((2, 1))] + 0.5 * e[cd.colouring_index((1, 2))]
    assert np.array_equal(out, ref)
    for k in range(4):
        assert cd.k_infinity_apply(e[k], 0, 1).sum() in (0.0, 2.0)
    with pytest.raises(ParameterError):
        cd.k_infinity_apply(e[0], 1, 1)


def test_infinite_measure_after_first_meeting():
    sched = cd.MeetingSchedule((0.4,), (((0, 1),),))
    e = np.eye(4)
    alt = cd.evolve_colour_measure_infinite(sched, [1, 2])
    assert np.array_equal(cd.infinite_measure_at(alt, 0.4), e[cd.colouring_index((1, 2))])
    assert np.all(cd.infinite_measure_at(alt, 0.41) == 0)
    same = cd.evolve_colour_measure_infinite(sched, [1, 1])
    ref = e[cd.colouring_index((1, 1))] + 0.5 * e[cd.colouring_index((1, 2))] + 0.5 * e[cd.colouring_index((2, 1))]
    assert np.array_equal(cd.infinite_measure_at(same, 0.9), ref)


def test_infinite_measure_needs_distinct_starts():
    with pytest.raises(PreconditionError):
        cd.evolve_colour_measure_infinite(cd.MeetingSchedule((), ()), [1, 1], starts=[2, 2])


def test_meeting_schedule_first_meetings_only():
    path = cd.WalkPath(np.array([0.0, 0.5, 1.0, 1.5]), np.array([[0, 2], [1, 1], [1, 2], [2, 2]]), 2.0)
    s = cd.meeting_schedule(path)
    assert s.tau == (0.5,)


def test_gamma_convergence_decreasing():
    base = RngStream(9)
    paths = [cd.sample_walk_path([0, 1], 0.5, base.child(i), L=16, dx=0.25) for i in range(4)]
    d = cd.gamma_convergence(paths, [1, 1], [1, 10, 100], 0.5)
    assert d[0] > d[1] > d[2]


def step(y):
    return (np.asarray(y) <= 0).astype(float)


def test_coalescing_duality_constant_one():
    r = cd.check_coalescing_duality(lambda y: np.ones(np.shape(y)), [0.0, 0.3], 0.5, 500, RngStream(10))
    assert r.lhs.value == 1 and r.rhs.value == 1


def test_coalescing_duality_single_point_erf():
    r = cd.check_coalescing_duality(step, [0.3], 0.5, 20_000, RngStream(11))
    ref = float(ip.PiecewiseConstantProfile.step(1.0, 0.0).heat(0.5, 0.3))
    assert r.lhs.within(ref) and r.rhs.within(ref)


def test_coalescing_duality_half_closed_form():
    half = lambda y: np.full(np.shape(y), 0.5)
    r = cd.check_coalescing_duality(half, [0.0, 0.5], 0.25, 20_000, RngStream(12))
    pc = float(ip.meeting_prob(0.5, 0.25))
    ref = 0.5 * pc + 0.25 * (1 - pc)
    assert r.lhs.within(ref) and r.rhs.within(ref)


def test_annihilating_duality_half():
    half = lambda y: np.full(np.shape(y), 0.5)
    r = cd.check_annihilating_moment_duality(half, [0.0, 0.5], math.inf, 0.25, 20_000, RngStream(13))
    ref = float(ip.meeting_prob(0.5, 0.25))
    assert r.lhs.within(ref) and r.rhs.within(ref)


def test_annihilating_duality_zero_profile():
    zero = lambda y: np.zeros(np.shape(y))
    r = cd.check_annihilating_moment_duality(zero, [0.0, 0.5], math.inf, 0.25, 500, RngStream(14))
    assert r.lhs.value == 1 and r.rhs.value == 1


def test_annihilating_duality_step():
    r = cd.check_annihilating_moment_duality(step, [-0.2, 0.3], math.inf, 0.5, 20_000, RngStream(15))
    assert r.overlapping


@pytest.mark.slow
def test_annihilating_duality_finite_gamma():
    r = cd.check_annihilating_moment_duality(step, [-0.2, 0.3], 1.0, 0.5, 20_000, RngStream(16))
    assert r.overlapping


def test_colour_csv(tmp_path):
    traj = cd.evolve_colour_measure(fixed_path(0.5), [1, 1], 1.0, -0.5)
    cd.write_colour_csv(tmp_path / "c.csv", traj)
    rows = (tmp_path / "c.csv").read_text().splitlines()
    assert rows[0] == "time,colouring,weight" and len(rows) == 1 + 4 * len(traj.times)
