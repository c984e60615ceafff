"""Hard-sphere Langevin-collision Monte Carlo for a single ion in a Paul trap.

Between collisions the ion follows the analytic first-order Mathieu
trajectory (see :mod:`ionatom.trap`).  Collisions occur at exponentially
distributed times, are instantaneous (position preserved), and scatter the
relative velocity by a uniformly random rotation.  After each collision the
new secular amplitudes and phases are solved from the preserved position and
the post-collision velocity with the micromotion term removed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numba
import numpy as np

from .constants import KB
from .parallel import realization_rng, run_chunked
from .trap import SecularState, SpeciesPair, TrapConfig, emm_energy, secular_frequencies

TWO_PI = 2 * np.pi

INIT_GROUND = 0
INIT_DELTA = 1
INIT_THERMAL = 2

RUNAWAY_FACTOR = 1e6


@dataclass(frozen=True)
class BathConfig:
    """Atomic bath.  ``cloud_sigma=None`` means an infinite homogeneous cloud."""

    temperature: float = 0.0
    density: float = 1e18
    cloud_sigma: Optional[tuple] = None
    cloud_center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("bath temperature must be >= 0")
        if not self.density > 0:
            raise ValueError("bath density must be > 0")
        if self.cloud_sigma is not None:
            sig = tuple(float(s) for s in self.cloud_sigma)
            if len(sig) != 3 or min(sig) <= 0:
                raise ValueError("cloud_sigma must be three positive widths")
            object.__setattr__(self, "cloud_sigma", sig)
        object.__setattr__(self, "cloud_center", tuple(float(c) for c in self.cloud_center))

    @property
    def homogeneous(self) -> bool:
        return self.cloud_sigma is None

    def relative_density(self, position) -> float:
        if self.homogeneous:
            return 1.0
        d = (np.asarray(position) - np.asarray(self.cloud_center)) / np.asarray(self.cloud_sigma)
        return float(np.exp(-0.5 * np.dot(d, d)))


@dataclass(frozen=True)
class InitialDistribution:
    """Per-mode initial energy: ``ground``, ``delta`` (energy J per mode) or
    ``maxwell_boltzmann`` (temperature K; each mode exponential with mean kT)."""

    kind: str = "ground"
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("ground", "delta", "maxwell_boltzmann"):
            raise ValueError(f"unknown initial distribution {self.kind!r}")
        if self.value < 0:
            raise ValueError("initial distribution parameter must be >= 0")

    @property
    def code(self) -> int:
        return {"ground": INIT_GROUND, "delta": INIT_DELTA, "maxwell_boltzmann": INIT_THERMAL}[self.kind]

    @property
    def numeric(self) -> float:
        return self.value * KB if self.kind == "maxwell_boltzmann" else self.value


@dataclass(frozen=True)
class McRunConfig:
    n_realizations: int = 10_000
    collisions_per_realization: int = 500
    mean_collision_interval: float = 100e-6
    initial_energy_distribution: InitialDistribution = field(default_factory=InitialDistribution)
    master_seed: int = 0
    record_mode: str = "final_energy"
    include_emm_energy: bool = False

    def __post_init__(self):
        if self.n_realizations <= 0 or self.collisions_per_realization <= 0:
            raise ValueError("counts must be positive")
        if not self.mean_collision_interval > 0:
            raise ValueError("mean_collision_interval must be positive")
        if self.record_mode not in ("final_energy", "full_trace"):
            raise ValueError(f"unknown record_mode {self.record_mode!r}")


@dataclass
class EnergyRecords:
    """Per-realization results, stored column-wise.

    ``total_energy`` is the secular total energy (J) after the last
    collision; flagged realizations hit the runaway guard (or the bound-state
    / step budget in the MD) and should be excluded from histograms.
    ``trace`` holds per-collision energies when recorded.
    """

    total_energy: np.ndarray
    collision_count: np.ndarray
    flagged: np.ndarray
    trace: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.total_energy)

    @property
    def retained(self) -> np.ndarray:
        return self.total_energy[~self.flagged]

    @classmethod
    def concatenate(cls, parts: list["EnergyRecords"]) -> "EnergyRecords":
        trace = None
        if parts[0].trace is not None:
            trace = np.concatenate([p.trace for p in parts])
        extra = {k: np.concatenate([p.extra[k] for p in parts]) for k in parts[0].extra}
        return cls(
            np.concatenate([p.total_energy for p in parts]),
            np.concatenate([p.collision_count for p in parts]),
            np.concatenate([p.flagged for p in parts]),
            trace,
            extra,
            dict(parts[0].metadata),
        )


# --- numba kernels ----------------------------------------------------------


@numba.njit(cache=True, inline="always")
def _wrap(x):
    # floor form is several times faster than % on floats under numba
    return x - 2 * math.pi * math.floor(x / (2 * math.pi))


@numba.njit(cache=True)
def _random_rotation(rng, out):
    # uniform unit quaternion -> Haar-distributed rotation
    a = rng.standard_normal()
    b = rng.standard_normal()
    c = rng.standard_normal()
    d = rng.standard_normal()
    n = math.sqrt(a * a + b * b + c * c + d * d)
    a /= n
    b /= n
    c /= n
    d /= n
    out[0, 0] = a * a + b * b - c * c - d * d
    out[0, 1] = 2 * (b * c - a * d)
    out[0, 2] = 2 * (b * d + a * c)
    out[1, 0] = 2 * (b * c + a * d)
    out[1, 1] = a * a - b * b + c * c - d * d
    out[1, 2] = 2 * (c * d - a * b)
    out[2, 0] = 2 * (b * d - a * c)
    out[2, 1] = 2 * (c * d + a * b)
    out[2, 2] = a * a - b * b - c * c + d * d


@numba.njit(cache=True)
def _position(u, theta, psi, q, udc, out):
    crf = math.cos(psi)
    for j in range(3):
        out[j] = (udc[j] + u[j] * math.cos(theta[j])) * (1 + q[j] / 2 * crf)


@numba.njit(cache=True)
def _collide_phase(u, theta, psi, w, q, udc, W, beta, va, R):
    """Instantaneous collision; ``theta_j = w_j t + phi_j`` and ``psi = W t``.

    Updates ``u`` and ``theta`` in place.
    """
    srf = math.sin(psi)
    c0 = u[0] * math.cos(theta[0])
    c1 = u[1] * math.cos(theta[1])
    c2 = u[2] * math.cos(theta[2])
    # micromotion velocity per axis; added back to v' to get the secular part
    m0 = (c0 + udc[0]) * W * q[0] / 2 * srf
    m1 = (c1 + udc[1]) * W * q[1] / 2 * srf
    m2 = (c2 + udc[2]) * W * q[2] / 2 * srf
    g0 = -u[0] * w[0] * math.sin(theta[0]) - m0 - va[0]
    g1 = -u[1] * w[1] * math.sin(theta[1]) - m1 - va[1]
    g2 = -u[2] * w[2] * math.sin(theta[2]) - m2 - va[2]
    for j in range(3):
        if j == 0:
            gj, cj, mj = g0, c0, m0
        elif j == 1:
            gj, cj, mj = g1, c1, m1
        else:
            gj, cj, mj = g2, c2, m2
        rg = R[j, 0] * g0 + R[j, 1] * g1 + R[j, 2] * g2
        vsec = (1 - beta) * gj + beta * rg + va[j] + mj
        if w[j] > 0:
            s = -vsec / w[j]
            u[j] = math.sqrt(cj * cj + s * s)
            theta[j] = math.atan2(s, cj)
        else:
            # unconfined axis: no bounded secular motion to track
            u[j] = 0.0
            theta[j] = 0.0


@numba.njit(cache=True)
def _collide(u, phi, t, w, q, udc, W, beta, va, R):
    theta = np.empty(3)
    for j in range(3):
        theta[j] = w[j] * t + phi[j]
    _collide_phase(u, theta, W * t, w, q, udc, W, beta, va, R)
    for j in range(3):
        phi[j] = _wrap(theta[j] - w[j] * t)


@numba.njit(cache=True)
def _secular_energy(u, w, m):
    e = 0.0
    for j in range(3):
        e += 0.5 * m * (w[j] * u[j]) ** 2
    return e


@numba.njit(cache=True)
def _run_one(
    rng, w, q, udc, W, m_i, beta, sigma_va, mean_dt, homogeneous, sigma, center,
    n_coll, init_code, init_value, threshold, max_candidates, trace,
):
    u = np.empty(3)
    phi = np.empty(3)
    for j in range(3):
        if init_code == 0 or w[j] == 0:
            e = 0.0
        elif init_code == 1:
            e = init_value
        else:
            e = rng.exponential(init_value)
        u[j] = math.sqrt(2 * e / (m_i * w[j] * w[j])) if w[j] > 0 else 0.0
        phi[j] = rng.random() * 2 * math.pi
    R = np.empty((3, 3))
    va = np.empty(3)
    x = np.empty(3)
    # phases are advanced incrementally and kept wrapped so trig arguments stay small
    theta = phi.copy()
    psi = 0.0
    t = 0.0
    done = 0
    candidates = 0
    flagged = False
    energy = _secular_energy(u, w, m_i)
    while done < n_coll:
        dt = rng.exponential(mean_dt)
        t += dt
        psi = _wrap(psi + W * dt)
        for j in range(3):
            theta[j] = _wrap(theta[j] + w[j] * dt)
        candidates += 1
        if candidates > max_candidates:
            flagged = True
            break
        if not homogeneous:
            _position(u, theta, psi, q, udc, x)
            r2 = 0.0
            for j in range(3):
                r2 += ((x[j] - center[j]) / sigma[j]) ** 2
            if rng.random() >= math.exp(-0.5 * r2):
                continue
        for j in range(3):
            va[j] = sigma_va * rng.standard_normal()
        _random_rotation(rng, R)
        _collide_phase(u, theta, psi, w, q, udc, W, beta, va, R)
        energy = _secular_energy(u, w, m_i)
        if trace.shape[0] > 0:
            trace[done] = energy
        done += 1
        if energy > threshold:
            flagged = True
            break
    return energy, done, flagged


# --- public operations ------------------------------------------------------


def sample_initial_state(dist: InitialDistribution, trap: TrapConfig, pair: SpeciesPair, rng) -> SecularState:
    """Draw amplitudes ``sqrt(2 E_j / m w_j^2)`` and uniform phases."""
    w = secular_frequencies(trap)
    if dist.kind == "ground":
        e = np.zeros(3)
    elif dist.kind == "delta":
        e = np.full(3, dist.value)
    else:
        e = rng.exponential(KB * dist.value, size=3)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(w > 0, np.sqrt(2 * e / (pair.ion_mass * w**2)), 0.0)
    return SecularState(u, rng.uniform(0, TWO_PI, size=3))


def sample_collision_time(mean_interval: float, rng) -> float:
    if not mean_interval > 0:
        raise ValueError("mean_interval must be positive")
    return float(rng.exponential(mean_interval))


def accept_collision_by_density(position, bath: BathConfig, rng) -> bool:
    """Thinning step: accept with probability n(x)/n_peak."""
    if bath.homogeneous:
        return True
    return bool(rng.random() < bath.relative_density(position))


def random_rotation(rng) -> np.ndarray:
    R = np.empty((3, 3))
    q = rng.standard_normal(4)
    a, b, c, d = q / np.linalg.norm(q)
    R[:] = [
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d],
    ]
    return R


def check_rotation(rotation, tol: float = 1e-12) -> np.ndarray:
    R = np.asarray(rotation, dtype=float)
    if R.shape != (3, 3):
        raise ValueError("rotation must be 3x3")
    # improper matrices are allowed: only |R g| = |g| matters, and -I is the backscatter
    if np.max(np.abs(R @ R.T - np.eye(3))) > tol:
        raise ValueError("rotation must be orthogonal")
    return R


def scatter_velocity(v, v_atom, beta: float, rotation) -> np.ndarray:
    """Ion velocity after an elastic collision: (1-b)(v-va) + b R (v-va) + va."""
    g = np.asarray(v) - np.asarray(v_atom)
    return (1 - beta) * g + beta * (np.asarray(rotation) @ g) + np.asarray(v_atom)


def hard_sphere_collision(
    state: SecularState, trap: TrapConfig, pair: SpeciesPair, t_c: float, atom_velocity, rotation
) -> SecularState:
    R = check_rotation(rotation)
    u = state.u.copy()
    phi = state.phi.copy()
    beta = pair.atom_mass / (pair.atom_mass + pair.ion_mass)
    _collide(
        u, phi, float(t_c), secular_frequencies(trap), trap.q, trap.u_dc, trap.rf_frequency,
        beta, np.asarray(atom_velocity, dtype=float), R,
    )
    return SecularState(u, phi)


def energy_scale(trap: TrapConfig, pair: SpeciesPair, bath: BathConfig) -> float:
    """Largest of k_B T_a and E_EMM (J); 0 when the bath supplies no energy."""
    return max(KB * bath.temperature, emm_energy(trap, pair.ion_mass)[0])


def _run_chunk(start, stop, trap, pair, bath, run):
    w = secular_frequencies(trap)
    m_i, m_a = pair.ion_mass, pair.atom_mass
    beta = m_a / (m_a + m_i)
    sigma_va = math.sqrt(KB * bath.temperature / m_a)
    scale = energy_scale(trap, pair, bath)
    init = run.initial_energy_distribution
    scale = max(scale, 3 * init.numeric)
    threshold = RUNAWAY_FACTOR * scale if scale > 0 else np.inf
    sigma = np.array(bath.cloud_sigma if not bath.homogeneous else (1.0, 1.0, 1.0))
    center = np.array(bath.cloud_center)
    n = stop - start
    n_coll = run.collisions_per_realization
    energies = np.empty(n)
    counts = np.empty(n, dtype=np.int64)
    flagged = np.empty(n, dtype=bool)
    full = run.record_mode == "full_trace"
    traces = np.full((n, n_coll), np.nan) if full else None
    empty = np.empty(0)
    for k in range(n):
        rng = realization_rng(run.master_seed, start + k)
        trace = traces[k] if full else empty
        e, c, f = _run_one(
            rng, w, trap.q, trap.u_dc, trap.rf_frequency, m_i, beta, sigma_va,
            run.mean_collision_interval, bath.homogeneous, sigma, center, n_coll,
            init.code, init.numeric, threshold, 1000 * n_coll, trace,
        )
        energies[k], counts[k], flagged[k] = e, c, f
    return EnergyRecords(energies, counts, flagged, traces)


def run_hard_sphere_mc(
    trap: TrapConfig, pair: SpeciesPair, bath: BathConfig, run: McRunConfig, workers: int = 1,
    first_index: int = 0,
) -> EnergyRecords:
    """Run ``run.n_realizations`` independent collision histories.

    Realization ``i`` (counting from ``first_index``) uses
    ``realization_rng(run.master_seed, i)``; the result is bit-identical for
    any ``workers``.
    """
    parts = run_chunked(_run_chunk, run.n_realizations, (trap, pair, bath, run), workers, first_index=first_index)
    rec = EnergyRecords.concatenate(parts)
    e_emm = emm_energy(trap, pair.ion_mass)[0]
    if run.include_emm_energy:
        rec.total_energy = rec.total_energy + e_emm
        if rec.trace is not None:
            rec.trace = rec.trace + e_emm
    scale = energy_scale(trap, pair, bath)
    rec.metadata = {
        "simulation": "hard_sphere",
        "recorded_energy": "secular total (kinetic+potential)"
        + (" + mean EMM kinetic energy" if run.include_emm_energy else ""),
        "energy_scale_J": scale,
        "runaway_threshold_J": RUNAWAY_FACTOR * max(scale, 3 * run.initial_energy_distribution.numeric),
        "n_flagged": int(rec.flagged.sum()),
        "first_index": first_index,
        "emm_energy_J": e_emm,
        "run": {**asdict(run)},
    }
    return rec
