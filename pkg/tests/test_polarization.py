import math

import numpy as np
import pytest
from scipy import stats

from ionatom.constants import KB, MK, UK
from ionatom.hardsphere import BathConfig
from ionatom.polarization import (
    IntegrationError,
    MdConfig,
    PairState,
    contact_collision,
    entry_rate,
    eom_derivatives,
    exact_secular_frequencies,
    floquet_amplitudes,
    floquet_axes,
    floquet_energy,
    integrate_pair,
    rk4_step,
    run_polarization_md,
    sample_atom_entry,
    single_capture_energy,
)
from ionatom.trap import (
    SecularState,
    SpeciesPair,
    TrapConfig,
    cetina_energy_scale,
    default_cetina_mode,
    secular_frequencies,
    trajectory_at,
)

from conftest import RF

FREE = TrapConfig(RF, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0))


def _random_state(rng, scale=1e-7):
    return PairState(rng.normal(0, scale, 3), rng.normal(0, 1, 3), rng.normal(0, scale, 3) + 3 * scale,
                     rng.normal(0, 1, 3), rng.uniform(0, 1e-6))


def test_decoupled_derivatives(reference_trap, sr_rb, rng):
    pair = SpeciesPair(sr_rb.ion_mass, sr_rb.atom_mass, 0.0)
    s = _random_state(rng)
    d = eom_derivatives(s, reference_trap, pair)
    np.testing.assert_array_equal(d.atom_velocity, 0.0)
    a, q = np.asarray(reference_trap.a), np.asarray(reference_trap.q)
    mathieu = -(a + 2 * q * np.cos(RF * s.time)) * s.ion_position * RF**2 / 4
    np.testing.assert_allclose(d.ion_velocity, mathieu, rtol=1e-13)
    np.testing.assert_array_equal(d.ion_position, s.ion_velocity)


def test_ion_at_centre_feels_no_trap(reference_trap, sr_rb):
    pair = SpeciesPair(sr_rb.ion_mass, sr_rb.atom_mass, 0.0)
    s = PairState(np.zeros(3), np.ones(3), np.ones(3) * 1e-6, np.zeros(3), 0.3e-6)
    np.testing.assert_array_equal(eom_derivatives(s, reference_trap, pair).ion_velocity, 0.0)


def test_newtons_third_law(reference_trap, sr_rb, rng):
    for _ in range(20):
        s = _random_state(rng)
        d = eom_derivatives(s, reference_trap, sr_rb)
        a, q = np.asarray(reference_trap.a), np.asarray(reference_trap.q)
        trap_acc = -(a + 2 * q * np.cos(RF * s.time)) * s.ion_position * RF**2 / 4
        f_ion = sr_rb.ion_mass * (d.ion_velocity - trap_acc)
        f_atom = sr_rb.atom_mass * d.atom_velocity
        # the trap term is subtracted back out, so rounding scales with the larger force
        scale = max(np.max(np.abs(f_atom)), sr_rb.ion_mass * np.max(np.abs(trap_acc)))
        np.testing.assert_allclose(f_ion + f_atom, 0.0, atol=1e-12 * scale)


def test_singular_separation_raises(reference_trap, sr_rb):
    s = PairState(np.zeros(3), np.zeros(3), np.array([1e-13, 0, 0]), np.zeros(3))
    with pytest.raises(IntegrationError):
        eom_derivatives(s, reference_trap, sr_rb)
    with pytest.raises(IntegrationError):
        rk4_step(s, reference_trap, sr_rb, 1e-9)


def test_free_particle_is_exact(sr_rb, rng):
    pair = SpeciesPair(sr_rb.ion_mass, sr_rb.atom_mass, 0.0)
    s0 = _random_state(rng)
    s = s0
    for _ in range(100):
        s = rk4_step(s, FREE, pair, 1e-8)
    np.testing.assert_allclose(s.ion_position, s0.ion_position + s0.ion_velocity * 1e-6, rtol=1e-12, atol=1e-20)
    np.testing.assert_allclose(s.atom_position, s0.atom_position + s0.atom_velocity * 1e-6, rtol=1e-12, atol=1e-20)
    assert s.time == pytest.approx(s0.time + 1e-6, rel=1e-12)


def test_static_harmonic_energy_drift(sr_rb):
    pair = SpeciesPair(sr_rb.ion_mass, sr_rb.atom_mass, 0.0)
    trap = TrapConfig(RF, (0.002, 0.003, 0.004), (0.0, 0.0, 0.0))
    w = secular_frequencies(trap)
    period = 2 * np.pi / w.min()
    s = PairState(np.array([1e-6, -2e-6, 5e-7]), np.array([0.1, 0.0, -0.2]), np.ones(3), np.zeros(3))

    def energy(st):
        return np.sum(0.5 * pair.ion_mass * (st.ion_velocity**2 + (w * st.ion_position) ** 2))

    e0 = energy(s)
    for _ in range(1000):
        s = rk4_step(s, trap, pair, period / 1000)
    assert abs(energy(s) / e0 - 1) < 1e-8


def test_flyby_conserves_energy_and_momentum(sr_rb):
    e_col = KB * 100 * UK
    mu = sr_rb.reduced_mass
    b_c = (2 * sr_rb.c4 / e_col) ** 0.25
    v = math.sqrt(2 * e_col / mu)
    m_i, m_a = sr_rb.ion_mass, sr_rb.atom_mass
    # ion and atom approach each other in the centre-of-mass frame with impact parameter 2 b_c
    s = PairState(np.zeros(3), np.array([m_a / (m_i + m_a) * v, 0, 0]),
                  np.array([20 * b_c, 2 * b_c, 0]), np.array([-m_i / (m_i + m_a) * v, 0, 0]))
    md = MdConfig(adaptive_step_policy="free_fall")
    res = integrate_pair(s, FREE, sr_rb, 100 * b_c / v, md, stop_radius=25 * b_c)
    assert res.status == "separated"
    assert res.min_distance < 3 * b_c
    assert res.state.pair_energy(sr_rb) == pytest.approx(s.pair_energy(sr_rb), rel=1e-6)
    # total momentum is zero in this frame: compare against one partner's momentum
    np.testing.assert_allclose(res.state.momentum(sr_rb), s.momentum(sr_rb), atol=1e-6 * mu * v)


@pytest.mark.parametrize("temperature", [1 * UK, 10 * UK, 100 * UK, 1 * MK])
def test_langevin_capture_threshold(sr_rb, temperature):
    # heavy ion: the atom scatters off a fixed centre, so E_col is the atom's kinetic energy
    pair = SpeciesPair(sr_rb.atom_mass * 1e6, sr_rb.atom_mass, sr_rb.c4)
    e_col = KB * temperature
    b_c = (2 * pair.c4 / e_col) ** 0.25
    v = math.sqrt(2 * e_col / pair.reduced_mass)
    md = MdConfig(contact_radius=min(5e-9, b_c / 20), switch_radius=100e-9, sphere_radius=1.2e-6)
    outcome = {}
    for factor in (0.98, 1.02):
        s = PairState(np.zeros(3), np.zeros(3), np.array([-10 * b_c, factor * b_c, 0]), np.array([v, 0, 0]))
        res = integrate_pair(s, FREE, pair, 200 * b_c / v, md, stop_radius=12 * b_c)
        outcome[factor] = res.status
    assert outcome == {0.98: "contact", 1.02: "separated"}


def test_entry_sampling(sr_rb, rng):
    bath = BathConfig(temperature=10 * UK)
    sigma = math.sqrt(KB * bath.temperature / sr_rb.atom_mass)
    r0 = 1.2e-6
    n = 100_000
    pos = np.empty((n, 3))
    vel = np.empty((n, 3))
    for i in range(n):
        pos[i], vel[i] = sample_atom_entry(r0, bath, sr_rb, rng)
    np.testing.assert_allclose(np.linalg.norm(pos, axis=1), r0, rtol=1e-12)
    assert np.all(np.abs(pos.mean(axis=0)) < 3 * r0 / np.sqrt(3 * n))
    normal = -np.sum(vel * pos, axis=1) / r0
    assert np.all(normal > 0)
    assert normal.mean() == pytest.approx(math.sqrt(math.pi / 2) * sigma, rel=0.01)
    # flux-weighted Maxwell-Boltzmann speed: v^3 exp(-v^2 / 2 sigma^2), a chi law with 4 dof
    speed = np.linalg.norm(vel, axis=1)
    assert stats.kstest(speed, stats.chi(4, scale=sigma).cdf).pvalue > 0.01
    with pytest.raises(ValueError):
        sample_atom_entry(r0, BathConfig(temperature=0.0), sr_rb, rng)


def test_entry_rate(sr_rb):
    bath = BathConfig(temperature=10 * UK, density=1e18)
    v_mean = math.sqrt(8 * KB * 10 * UK / (math.pi * sr_rb.atom_mass))
    assert entry_rate(1e-6, bath, sr_rb) == pytest.approx(1e18 * math.pi * 1e-12 * v_mean, rel=1e-12)


def test_equal_mass_head_on_swaps(rng):
    pair = SpeciesPair(1.0, 1.0, 0.0)
    s = PairState(np.zeros(3), np.array([1.0, 0, 0]), np.array([1e-9, 0, 0]), np.array([-0.5, 0, 0]))
    for rotation in (None, -np.eye(3)):
        out = contact_collision(s, pair, rotation)
        np.testing.assert_allclose(out.ion_velocity, s.atom_velocity, atol=1e-15)
        np.testing.assert_allclose(out.atom_velocity, s.ion_velocity, atol=1e-15)
        np.testing.assert_array_equal(out.ion_position, s.ion_position)


def test_contact_conservation(rng):
    from ionatom.hardsphere import random_rotation

    for _ in range(200):
        pair = SpeciesPair(rng.uniform(0.1, 10), rng.uniform(0.1, 10), 1.0)
        s = _random_state(rng)
        for rotation in (None, random_rotation(rng)):
            out = contact_collision(s, pair, rotation)
            np.testing.assert_allclose(out.momentum(pair), s.momentum(pair), rtol=1e-12, atol=1e-12)
            ke0 = s.pair_energy(pair)
            assert out.pair_energy(pair) == pytest.approx(ke0, rel=1e-12, abs=1e-12)


def test_contact_light_atom_limit(rng):
    pair = SpeciesPair(1.0, 1e-12, 1.0)
    s = _random_state(rng)
    out = contact_collision(s, pair)
    np.testing.assert_allclose(out.ion_velocity, s.ion_velocity, atol=1e-11)


def test_contact_rejects_non_orthogonal(rng):
    with pytest.raises(ValueError):
        contact_collision(_random_state(rng), SpeciesPair(1.0, 1.0, 1.0), 2 * np.eye(3))


def test_floquet_matches_cartesian_trap_motion(reference_trap, sr_rb):
    pair = SpeciesPair(sr_rb.ion_mass, sr_rb.atom_mass, 0.0)
    md = MdConfig()
    axes = floquet_axes(reference_trap, pair, md)
    x0, v0, t0 = np.array([1e-6, -5e-7, 2e-6]), np.array([0.3, 0.1, -0.2]), 0.17e-6
    c = floquet_amplitudes(x0, v0, t0, axes, RF)
    s = PairState(x0, v0, np.ones(3), np.zeros(3), t0)
    dt = 2 * np.pi / RF / 400
    for _ in range(2000):  # 5 rf periods
        s = rk4_step(s, reference_trap, pair, dt)
    tau = RF * s.time / 2
    x_floq = np.array([(c[j] * ax.psi(tau)[0]).real for j, ax in enumerate(axes)])
    np.testing.assert_allclose(x_floq, s.ion_position, atol=1e-5 * np.max(np.abs(x0)))
    # amplitudes are constants of the trap-only motion
    c1 = floquet_amplitudes(s.ion_position, s.ion_velocity, s.time, axes, RF)
    np.testing.assert_allclose(c1, c, atol=1e-5 * np.max(np.abs(c)))


def test_exact_secular_frequencies_close_to_first_order(reference_trap):
    exact = exact_secular_frequencies(reference_trap)
    approx = secular_frequencies(reference_trap)
    np.testing.assert_allclose(exact, approx, rtol=0.02)
    assert exact[2] == pytest.approx(approx[2], rel=1e-12)  # q = 0: exact harmonic


def test_secular_energy_bookkeeping(reference_trap, sr_rb):
    md = MdConfig()
    axes = floquet_axes(reference_trap, sr_rb, md)
    w = secular_frequencies(reference_trap)
    state = SecularState((1e-6, 2e-6, 1.5e-6), (0.4, 2.0, 5.0))
    x, v = trajectory_at(reference_trap, state, 0.37e-6)
    c = floquet_amplitudes(x, v, 0.37e-6, axes, RF)
    e_floquet = floquet_energy(c, reference_trap, sr_rb.ion_mass, axes)
    e_secular = np.sum(0.5 * sr_rb.ion_mass * (w * np.asarray(state.u)) ** 2)
    q = np.max(np.abs(reference_trap.q))
    assert e_floquet == pytest.approx(e_secular, rel=2 * q)


def test_md_config_validation():
    with pytest.raises(ValueError):
        MdConfig(contact_radius=2e-6)
    with pytest.raises(ValueError):
        MdConfig(adaptive_step_policy="bogus")
    with pytest.raises(ValueError):
        MdConfig(contact_model="bogus")
    with pytest.raises(ValueError):
        MdConfig(switch_radius=1e-9)


def test_md_rejects_unconfined_or_cold_bath(sr_rb, reference_trap):
    with pytest.raises(ValueError):
        run_polarization_md(FREE, sr_rb, BathConfig(temperature=1e-5), MdConfig(n_realizations=1))
    with pytest.raises(ValueError):
        run_polarization_md(reference_trap, sr_rb, BathConfig(temperature=0.0), MdConfig(n_realizations=1))


def test_decoupled_md_leaves_resting_ion_at_rest(reference_trap, sr_rb):
    pair = SpeciesPair(sr_rb.ion_mass, sr_rb.atom_mass, 0.0)
    md = MdConfig(n_realizations=2, initial_temperature=0.0, contact_radius=1e-11, max_idle_visits=300,
                  max_langevin_collisions=1, collision_count_mode="fixed")
    rec = run_polarization_md(reference_trap, pair, BathConfig(temperature=10 * UK), md)
    np.testing.assert_array_equal(rec.total_energy, 0.0)
    assert rec.extra["stalled"].all() and rec.flagged.all()


def test_md_deterministic_across_workers_and_blocks(reference_trap, sr_rb):
    bath = BathConfig(temperature=10 * UK)
    md = MdConfig(n_realizations=4, max_langevin_collisions=3, master_seed=8)
    a = run_polarization_md(reference_trap, sr_rb, bath, md, workers=1)
    b = run_polarization_md(reference_trap, sr_rb, bath, md, workers=2)
    assert np.array_equal(a.total_energy, b.total_energy)
    assert np.array_equal(a.extra["visits"], b.extra["visits"])
    half = MdConfig(n_realizations=2, max_langevin_collisions=3, master_seed=8)
    tail = run_polarization_md(reference_trap, sr_rb, bath, half, first_index=2)
    assert np.array_equal(tail.total_energy, a.total_energy[2:])
    assert np.all(a.collision_count >= 1)


def test_single_capture_energy_scale(reference_trap, sr_rb):
    w0 = cetina_energy_scale(sr_rb, *default_cetina_mode(reference_trap))
    rng = np.random.default_rng(21)
    e = np.array([single_capture_energy(reference_trap, sr_rb, MdConfig(), rng) for _ in range(40)])
    assert np.all(e >= 0)
    assert w0 / 5 < np.median(e) < 5 * w0
