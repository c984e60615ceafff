import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from ionatom.constants import KB, MK, NM, UK, UM
from ionatom.hardsphere import (
    BathConfig,
    InitialDistribution,
    McRunConfig,
    accept_collision_by_density,
    check_rotation,
    hard_sphere_collision,
    random_rotation,
    run_hard_sphere_mc,
    sample_collision_time,
    sample_initial_state,
    scatter_velocity,
)
from ionatom.trap import SecularState, SpeciesPair, TrapConfig, secular_frequencies, trajectory_at

from conftest import RF


def _secular_velocity(trap, state, t):
    w = secular_frequencies(trap)
    return -state.u * w * np.sin(w * t + state.phi)


def test_identity_rotation_leaves_state_unchanged(reference_trap, sr_rb):
    state = SecularState((1e-6, 2e-6, 3e-6), (0.1, 1.2, 2.3))
    t_c = 3.3e-6
    _, v = trajectory_at(reference_trap, state, t_c)
    # the atom moves with the ion, so the relative velocity is zero
    new = hard_sphere_collision(state, reference_trap, sr_rb, t_c, v, np.eye(3))
    x0, _ = trajectory_at(reference_trap, state, t_c)
    x1, _ = trajectory_at(reference_trap, new, t_c)
    np.testing.assert_allclose(x1, x0, rtol=1e-12, atol=1e-20)


def test_identity_rotation_with_atom_at_rest_only_cools_by_scaling(reference_trap, sr_rb):
    # R = I keeps the relative velocity: no momentum transfer at all
    state = SecularState((1e-6, 2e-6, 3e-6), (0.1, 1.2, 2.3))
    new = hard_sphere_collision(state, reference_trap, sr_rb, 0.0, np.zeros(3), np.eye(3))
    np.testing.assert_allclose(new.u, state.u, rtol=1e-10)


def test_equal_mass_backscatter_stops_ion():
    trap = TrapConfig(RF, (-0.001, -0.001, 0.002), (0.2, -0.2, 0.0))
    pair = SpeciesPair(1e-25, 1e-25, 1e-60)
    w = secular_frequencies(trap)
    # collide at t = 0 (no micromotion velocity) with the ion at its secular centre crossing
    state = SecularState((1e-6, 1e-6, 1e-6), np.full(3, np.pi / 2))
    new = hard_sphere_collision(state, trap, pair, 0.0, np.zeros(3), -np.eye(3))
    np.testing.assert_allclose(_secular_velocity(trap, new, 0.0), 0.0, atol=1e-12 * np.max(w) * 1e-6)
    np.testing.assert_allclose(new.u, 0.0, atol=1e-18)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_position_continuous_and_secular_velocity_matches(seed):
    rng = np.random.default_rng(seed)
    trap = TrapConfig(RF, (-0.0037, 0.0018, 0.0019), (0.1227, -0.1227, 0.0)).with_emm(
        rng.normal(0, 20e-9, 3) * (1, 1, 0))
    pair = SpeciesPair(1.46e-25, 1.44e-25, 1e-60)
    state = SecularState(rng.uniform(0, 5e-6, 3), rng.uniform(0, 2 * np.pi, 3))
    t_c = rng.uniform(0, 10e-6)  # keep w*t small so the oracle itself holds 1e-12
    va = rng.normal(0, 0.05, 3)
    R = random_rotation(rng)
    new = hard_sphere_collision(state, trap, pair, t_c, va, R)
    x0, v0 = trajectory_at(trap, state, t_c)
    x1, _ = trajectory_at(trap, new, t_c)
    np.testing.assert_allclose(x1, x0, rtol=1e-12, atol=1e-12 * np.max(np.abs(x0)))

    beta = pair.atom_mass / (pair.atom_mass + pair.ion_mass)
    v_after = scatter_velocity(v0, va, beta, R)
    q, W, udc = np.asarray(trap.q), RF, trap.u_dc
    # strip the micromotion term evaluated at the (unchanged) secular displacement
    disp = x0 / (1 + q / 2 * np.cos(W * t_c))
    expected = v_after + disp * W * q / 2 * np.sin(W * t_c)
    got = _secular_velocity(trap, new, t_c)
    np.testing.assert_allclose(got, expected, rtol=1e-9, atol=1e-9 * np.max(np.abs(expected)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_scatter_conserves_momentum_and_energy(seed, mass_ratio):
    rng = np.random.default_rng(seed)
    m_i, m_a = 1.0, mass_ratio
    beta = m_a / (m_a + m_i)
    v, va = rng.normal(size=3), rng.normal(size=3)
    v2 = scatter_velocity(v, va, beta, random_rotation(rng))
    va2 = va + (m_i / m_a) * (v - v2)
    e0 = m_i * v @ v + m_a * va @ va
    e1 = m_i * v2 @ v2 + m_a * va2 @ va2
    assert e1 == pytest.approx(e0, rel=1e-12)


def test_heavy_ion_limit_scatter_is_tiny():
    rng = np.random.default_rng(1)
    v, va = rng.normal(size=3), rng.normal(size=3)
    v2 = scatter_velocity(v, va, 1e-9, random_rotation(rng))
    np.testing.assert_allclose(v2, v, atol=1e-8)


def test_random_rotation_is_proper_and_uniform(rng):
    axes = np.array([random_rotation(rng) @ (0, 0, 1.0) for _ in range(20000)])
    for _ in range(20):
        check_rotation(random_rotation(rng))
    # uniform directions: cos(theta) uniform on [-1, 1]
    assert stats.kstest(axes[:, 2], "uniform", args=(-1, 2)).pvalue > 1e-3
    np.testing.assert_allclose(axes.mean(axis=0), 0, atol=0.03)


@pytest.mark.parametrize("bad", [2 * np.eye(3), np.eye(2), np.array([[1.0, 0.1, 0], [0, 1, 0], [0, 0, 1]])])
def test_check_rotation_rejects(bad):
    with pytest.raises(ValueError):
        check_rotation(bad)


def test_thermal_initial_state_statistics(reference_trap, sr_rb, rng):
    dist = InitialDistribution("maxwell_boltzmann", 0.5 * MK)
    w = secular_frequencies(reference_trap)
    e = []
    phases = []
    for _ in range(40000):
        s = sample_initial_state(dist, reference_trap, sr_rb, rng)
        e.append(0.5 * sr_rb.ion_mass * (s.u * w) ** 2)
        phases.append(s.phi)
    e, phases = np.array(e), np.array(phases)
    np.testing.assert_allclose(e.mean(axis=0) / (KB * 0.5 * MK), 1.0, rtol=0.015)
    assert stats.kstest(phases[:, 0], "uniform", args=(0, 2 * np.pi)).pvalue > 1e-3


def test_delta_and_ground_initial_states(reference_trap, sr_rb, rng):
    assert np.all(sample_initial_state(InitialDistribution(), reference_trap, sr_rb, rng).u == 0)
    s = sample_initial_state(InitialDistribution("delta", 1e-27), reference_trap, sr_rb, rng)
    w = secular_frequencies(reference_trap)
    np.testing.assert_allclose(0.5 * sr_rb.ion_mass * (s.u * w) ** 2, 1e-27, rtol=1e-12)


def test_collision_times_exponential(rng):
    t = np.array([sample_collision_time(100e-6, rng) for _ in range(400_000)])
    assert t.mean() == pytest.approx(100e-6, rel=0.005)
    assert np.mean(t <= 100e-6) == pytest.approx(1 - np.exp(-1), abs=0.002)
    with pytest.raises(ValueError):
        sample_collision_time(0.0, rng)


def test_density_thinning(rng):
    bath = BathConfig(10 * UK, 1e18, (1 * UM, 1 * UM, 1 * UM))
    pos = np.array([1 * UM, 0, 0])
    acc = np.mean([accept_collision_by_density(pos, bath, rng) for _ in range(200_000)])
    assert acc == pytest.approx(np.exp(-0.5), rel=0.01)
    assert accept_collision_by_density(pos, BathConfig(), rng)


def test_dc_trap_with_cold_bath_only_cools(sr_rb):
    trap = TrapConfig(RF, (0.001, 0.002, 0.003), (0.0, 0.0, 0.0))
    run = McRunConfig(50, 40, initial_energy_distribution=InitialDistribution("maxwell_boltzmann", 1 * MK),
                      record_mode="full_trace", master_seed=3)
    rec = run_hard_sphere_mc(trap, sr_rb, BathConfig(temperature=0.0), run)
    assert np.all(np.diff(rec.trace, axis=1) <= 1e-12 * np.nanmax(rec.trace))
    assert not rec.flagged.any()


def test_emm_run_reaches_emm_scale(reference_trap, sr_rb):
    trap = reference_trap.with_emm((20 * NM, 20 * NM, 0))
    run = McRunConfig(300, 200, master_seed=5)
    rec = run_hard_sphere_mc(trap, sr_rb, BathConfig(), run)
    e_emm = rec.metadata["emm_energy_J"]
    med = np.median(rec.retained)
    assert e_emm < med < 100 * e_emm


def test_determinism_across_workers_and_blocks(reference_trap, sr_rb):
    trap = reference_trap.with_emm((20 * NM, 20 * NM, 0))
    run = McRunConfig(40, 50, master_seed=11)
    a = run_hard_sphere_mc(trap, sr_rb, BathConfig(temperature=10 * UK), run, workers=1)
    b = run_hard_sphere_mc(trap, sr_rb, BathConfig(temperature=10 * UK), run, workers=2)
    assert np.array_equal(a.total_energy, b.total_energy)
    half = McRunConfig(20, 50, master_seed=11)
    c1 = run_hard_sphere_mc(trap, sr_rb, BathConfig(temperature=10 * UK), half)
    c2 = run_hard_sphere_mc(trap, sr_rb, BathConfig(temperature=10 * UK), half, first_index=20)
    assert np.array_equal(np.concatenate([c1.total_energy, c2.total_energy]), a.total_energy)


def test_include_emm_energy_adds_constant(reference_trap, sr_rb):
    trap = reference_trap.with_emm((20 * NM, 0, 0))
    base = McRunConfig(10, 20, master_seed=2)
    plus = McRunConfig(10, 20, master_seed=2, include_emm_energy=True)
    a = run_hard_sphere_mc(trap, sr_rb, BathConfig(), base)
    b = run_hard_sphere_mc(trap, sr_rb, BathConfig(), plus)
    np.testing.assert_allclose(b.total_energy - a.total_energy, a.metadata["emm_energy_J"], rtol=1e-9)


@pytest.mark.parametrize("kwargs", [dict(n_realizations=0), dict(mean_collision_interval=-1.0), dict(record_mode="x")])
def test_run_config_validation(kwargs):
    with pytest.raises(ValueError):
        McRunConfig(**kwargs)
