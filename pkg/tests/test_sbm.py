import cmath
import math

import numpy as np
import pytest

from duality_lab import sbm
from duality_lab.stochastic_core import DomainError, ParameterError, RngStream


def smooth(L):
    x = np.arange(L)
    return 1 + 0.5 * np.sin(2 * np.pi * x / L), 1 + 0.5 * np.cos(2 * np.pi * x / L)


def bumps(L=32):
    x = np.arange(L)
    return (np.where((x >= 4) & (x < 12), 1.0, 0.0), np.where((x >= 8) & (x < 16), 1.0, 0.0),
            np.where((x >= 6) & (x < 10), 0.5, 0.0), np.where((x >= 8) & (x < 14), 0.5, 0.0))


def test_unstable_step_rejected():
    with pytest.raises(ParameterError):
        sbm.SbmParams(-0.5, 1.0, dt=0.05, dx=0.25)


def test_negative_density_rejected():
    with pytest.raises(ParameterError):
        sbm.FieldPair(np.array([1.0, -0.1]), np.zeros(2))


def test_v_zero_gives_heat_flow():
    L, dx, dt = 32, 0.25, 0.01
    u0 = np.exp(-((np.arange(L) - 16) ** 2) / 10.0)
    end = sbm.simulate(sbm.FieldPair(u0, np.zeros(L), dx), sbm.SbmParams(0.3, 5.0, dt, dx), 1.0, RngStream(0))
    assert np.allclose(end.u, sbm.heat_flow_euler(u0, dx, dt, 1.0))
    assert np.abs(end.u - sbm.heat_semigroup(u0, dx, 1.0)).max() < 5 * dt
    assert end.clamp_count == 0


def test_gamma_zero_both_heat_flow():
    L, dx, dt = 32, 0.25, 0.01
    u0, v0 = smooth(L)
    end = sbm.simulate(sbm.FieldPair(u0, v0, dx), sbm.SbmParams(-0.5, 0.0, dt, dx), 0.5, RngStream(1))
    assert np.allclose(end.u, sbm.heat_flow_euler(u0, dx, dt, 0.5))
    assert np.allclose(end.v, sbm.heat_flow_euler(v0, dx, dt, 0.5))


def test_states_stay_nonnegative():
    h = sbm.heaviside_init(33).replicate(200)
    end = sbm.simulate(h, sbm.SbmParams(0.2, 10.0), 0.5, RngStream(2))
    assert np.all(end.u >= 0) and np.all(end.v >= 0)
    assert np.all(np.diff(np.stack([h.lam.sum(), end.lam.sum()])) >= 0)


def test_first_moment_heat_flow():
    u0, v0 = smooth(64)
    r = sbm.first_moment_check(u0, v0, -0.5, 1.0, 0.5, 4000, RngStream(3), dt=0.005)
    assert r.max_z < 3.5  # max over 64 sites
    assert r.clamp_rate < 0.01


def test_heaviside_shapes():
    h = sbm.heaviside_init(17)
    w = h.u + h.v
    assert set(np.unique(w)) <= {1.0, 2.0}
    assert np.count_nonzero(w == 2.0) == 1
    assert h.u.sum() == h.v.sum()
    assert sbm.region_width(sbm.interface_region(h)) == 1


def test_interface_region_empty_for_single_type():
    assert sbm.interface_region(sbm.FieldPair(np.ones(10), np.zeros(10))) is None
    with pytest.raises(ParameterError):
        sbm.interface_region(sbm.FieldPair(np.ones(10), np.zeros(10)), 0.0)


def test_interface_width_sublinear():
    L = 129
    p = sbm.SbmParams(-0.9, 10.0, 0.01, 0.25)
    st = sbm.heaviside_init(L).replicate(100)
    g = RngStream(4).generator()
    med = {}
    now = 0
    for T in (2, 8):
        st = sbm.simulate(st, p, T - now, g)
        now = T
        med[T] = np.median([sbm.region_width(sbm.interface_region(sbm.FieldPair(st.u[r], st.v[r], 0.25)))
                            for r in range(100)])
    assert med[8] < 2 * med[2]


def test_functional_zero_measures():
    z = np.zeros(4)
    val = sbm.self_duality_functional(sbm.FieldPair(z, z), sbm.FieldPair(np.ones(4), np.ones(4)), -0.3)
    assert val == 1


def test_functional_rho_zero_exponent():
    a, b, c, d = (np.array(x) for x in ([1.0, 2.0], [0.5, 0.0], [0.2, 0.3], [0.0, 1.0]))
    val = sbm.self_duality_functional(sbm.FieldPair(a, b, 1.0), sbm.FieldPair(c, d, 1.0), 0.0)
    expo = -np.dot(a + b, c + d) + 1j * np.dot(a - b, c - d)
    assert val == pytest.approx(cmath.exp(expo))


def test_functional_direct_summation():
    a, b, c, d = [0.3, 0.0, 1.2], [0.1, 0.7, 0.0], [0.5, 0.5, 0.0], [0.0, 0.2, 0.9]
    rho, dx = -0.5, 0.25
    re = im = 0.0
    for i in range(3):
        re += (a[i] + b[i]) * (c[i] + d[i]) * dx
        im += (a[i] - b[i]) * (c[i] - d[i]) * dx
    ref = cmath.exp(-math.sqrt(1.5) * re + 1j * math.sqrt(0.5) * im)
    val = sbm.self_duality_functional(sbm.FieldPair(a, b, dx), sbm.FieldPair(c, d, dx), rho)
    assert val == pytest.approx(ref, abs=1e-14)
    assert abs(val) <= 1


@pytest.mark.parametrize("rho", [-1.0, 1.0])
def test_functional_domain(rho):
    f = sbm.FieldPair(np.ones(3), np.ones(3))
    with pytest.raises(DomainError):
        sbm.self_duality_functional(f, f, rho)


def test_self_duality_at_time_zero():
    u0, v0, phi, psi = bumps()
    r = sbm.check_self_duality(u0, v0, phi, psi, -0.5, 1.0, 0.0, 50, RngStream(5))
    assert r.real.lhs.value == pytest.approx(r.real.rhs.value, abs=1e-15)
    assert r.imag.lhs.value == pytest.approx(r.imag.rhs.value, abs=1e-15)
    assert r.real.lhs.stderr == 0


def test_self_duality_zero_tests():
    u0, v0, _, _ = bumps()
    z = np.zeros(32)
    r = sbm.check_self_duality(u0, v0, z, z, -0.5, 1.0, 0.1, 100, RngStream(6))
    assert r.real.lhs.value == 1.0 and r.imag.lhs.value == 0.0


def test_self_duality_overlaps():
    r = sbm.check_self_duality(*bumps(), -0.5, 1.0, 0.25, 4000, RngStream(7))
    assert r.overlapping


def test_martingale_residual_zero_at_time_zero():
    m = sbm.martingale_residual(*bumps(), -0.5, 1.0, 0.0, 20, RngStream(8))
    assert m.real.value == 0 and m.imag.value == 0


def test_martingale_residual_disjoint_tests():
    u0, v0, _, _ = bumps()
    x = np.arange(32)
    phi = np.where(x < 6, 0.5, 0.0)
    psi = np.where(x > 20, 0.5, 0.0)
    m = sbm.martingale_residual(u0, v0, phi, psi, -0.5, 0.1, 0.25, 4000, RngStream(9))
    assert m.within(0.0)


def test_martingale_residual_vanishes():
    m = sbm.martingale_residual(*bumps(), -0.5, 1.0, 0.25, 4000, RngStream(10))
    assert m.within(0.0)


def test_conservation_rho_minus_one():
    x = np.arange(64)
    u0 = np.where(x < 32, 1.0, 0.0)
    dev, budget = sbm.conservation_check(u0, 1 - u0, 1.0, 0.5, 200, RngStream(11))
    assert np.all(dev <= 10 * budget + 1e-12)
    assert dev.max() < 1e-12


def test_separation_far_apart_near_zero():
    x = np.arange(64)
    u0 = np.where(x < 5, 1.0, 0.0)
    v0 = np.where(x > 58, 1.0, 0.0)
    s = sbm.separation_stat(u0, v0, -0.5, [1, 10], 0.05, 32, 200, RngStream(12))
    assert all(e.value < 1e-12 for e in s)


def test_separation_decreasing():
    L = 65
    h = sbm.heaviside_init(L)
    s = sbm.separation_stat(h.u, h.v, -0.5, [1, 10, 100], 0.5, L // 2, 2000, RngStream(13))
    assert s[0].value > s[1].value > s[2].value
    assert not s[0].overlaps(s[2])


def test_stepping_stone_bound():
    u0 = np.where(np.arange(33) < 16, 1.0, 0.0)
    end = sbm.run_paths(u0, 1 - u0, sbm.SbmParams(-1.0, 5.0), 0.5, sbm.ZERO_FLUX, 100, RngStream(14).generator())
    assert np.all(end.u * end.v <= 0.25 + 1e-12)


def test_rescaling_k1_identical_law():
    h = sbm.heaviside_init(17)
    r = sbm.rescaling_check(h.u, h.v, -0.5, 1.0, 1, 0.1, 9, 500, RngStream(15))
    assert r.p_value > 0.01


def test_rescaling_gamma_zero_deterministic():
    h = sbm.heaviside_init(17)
    r = sbm.rescaling_check(h.u, h.v, -0.5, 0.0, 2, 0.1, 10, 20, RngStream(16))
    assert np.ptp(r.coarse) == 0 and np.ptp(r.fine) == 0
    assert r.coarse[0] == pytest.approx(r.fine[0], abs=0.05)


def test_rescaling_k2():
    L = 33
    h = sbm.heaviside_init(L)
    r = sbm.rescaling_check(h.u, h.v, -0.5, 1.0, 2, 0.25, L // 2 + 2, 2000, RngStream(17))
    assert r.p_value > 0.01


def test_critical_curve_values():
    assert sbm.critical_curve(0.0) == pytest.approx(2.0, abs=1e-12)
    assert sbm.critical_curve(-1 / math.sqrt(2)) == pytest.approx(4.0, abs=1e-12)
    assert sbm.critical_curve(-1.0) == math.inf
    assert sbm.critical_curve(-0.999999) > 1000
    with pytest.raises(DomainError):
        sbm.critical_curve(1.0)


def test_first_moment_flat_from_constants():
    c = sbm.moment_growth_experiment(-0.5, 1.0, 1, [1.0, 2.0, 4.0], 200, RngStream(18), L=32)
    for m in c.moments:
        assert m.within(1.0)


@pytest.mark.slow
def test_positive_rho_second_moment_grows():
    c = sbm.moment_growth_experiment(0.5, 1.0, 2, np.arange(1.0, 21.0), 200, RngStream(19), L=32)
    assert c.increasing


def test_snapshot_csv(tmp_path):
    h = sbm.heaviside_init(9)
    sbm.write_snapshot_csv(tmp_path / "s.csv", h)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert len(lines) == 10
