"""Classical atom-ion molecular dynamics under the -C4/2r^4 polarization potential.

Atoms from a homogeneous thermal gas enter a sphere centred on the trap
one at a time.  Far from the ion the atom flies straight and the ion
follows its exact Floquet (Hill) solution of the Mathieu equation, so no
time steps are spent there.  Within ``switch_radius`` of the ion the pair
is integrated with RK4.  The integrated variables are the atom's
Cartesian coordinates and the ion's complex Floquet amplitudes, which
change only through the interaction force (variation of parameters).  The
trap motion is therefore exact and the step size is set by the
interaction alone.

The plain Cartesian equations of motion (:func:`eom_derivatives`,
:func:`rk4_step`, :func:`integrate_pair`) are kept for reference
integrations and for checking the fast integrator.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numba
import numpy as np
from scipy import linalg, optimize

from .constants import E_CHARGE, KB
from .hardsphere import BathConfig, EnergyRecords
from .parallel import realization_rng, run_chunked
from .trap import SpeciesPair, TrapConfig

SINGULAR_DISTANCE = 1e-12

STEP_FIXED = 0
STEP_FREE_FALL = 1
STEP_DISTANCE_SCALED = 2
_STEP_CODES = {"fixed": STEP_FIXED, "free_fall": STEP_FREE_FALL, "distance_scaled": STEP_DISTANCE_SCALED}

CONTACT_BILLIARD = 0
CONTACT_ISOTROPIC = 1
_CONTACT_CODES = {"billiard": CONTACT_BILLIARD, "isotropic": CONTACT_ISOTROPIC}

# visit outcome codes
VISIT_DONE = 0
VISIT_FLAGGED = 1


class IntegrationError(RuntimeError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class MdConfig:
    """Settings of the polarization-potential MD.

    ``timestep`` is the base RK4 step inside ``near_radius`` (None means
    1/40 of the rf period); beyond it the step is ``far_step_factor``
    times longer.  ``adaptive_step_policy`` further limits the step:
    ``free_fall`` caps it at ``step_fraction`` times the local free-fall
    time and the distance-over-relative-speed time, ``distance_scaled``
    multiplies it by (r / 100 nm)^2 clamped to [1e-4, 1], ``fixed`` leaves
    it alone.
    """

    sphere_radius: float = 1.2e-6
    contact_radius: float = 5e-9
    timestep: Optional[float] = None
    max_langevin_collisions: int = 300
    adaptive_step_policy: str = "free_fall"
    master_seed: int = 0
    n_realizations: int = 100
    collision_count_mode: str = "poisson"
    switch_radius: float = 100e-9
    switch_hysteresis: float = 1.1
    near_radius: float = 60e-9
    far_step_factor: float = 5.0
    step_fraction: float = 0.02
    langevin_radius_factor: float = 1.0
    contact_model: str = "billiard"
    initial_temperature: float = 0.5e-3
    max_steps_per_visit: int = 10_000_000
    max_idle_visits: int = 200_000
    rf_field: tuple = (0.0, 0.0, 0.0)
    hill_order: int = 6

    def __post_init__(self):
        if not 0 < self.contact_radius < self.sphere_radius:
            raise ValueError("need 0 < contact_radius < sphere_radius")
        if self.timestep is not None and not self.timestep > 0:
            raise ValueError("timestep must be positive")
        if self.max_langevin_collisions <= 0 or self.n_realizations <= 0:
            raise ValueError("counts must be positive")
        if self.adaptive_step_policy not in _STEP_CODES:
            raise ValueError(f"unknown step policy {self.adaptive_step_policy!r}")
        if self.collision_count_mode not in ("poisson", "fixed"):
            raise ValueError(f"unknown collision count mode {self.collision_count_mode!r}")
        if self.contact_model not in _CONTACT_CODES:
            raise ValueError(f"unknown contact model {self.contact_model!r}")
        if not self.contact_radius < self.switch_radius <= self.sphere_radius:
            raise ValueError("switch_radius must lie between contact_radius and sphere_radius")
        if self.switch_hysteresis < 1 or self.far_step_factor < 1:
            raise ValueError("hysteresis and far-step factor must be >= 1")
        if not 0 < self.step_fraction <= 1:
            raise ValueError("step_fraction must lie in (0, 1]")
        if self.initial_temperature < 0:
            raise ValueError("initial temperature must be >= 0")
        if self.max_steps_per_visit <= 0 or self.max_idle_visits <= 0 or self.hill_order < 2:
            raise ValueError("budgets and hill_order must be positive")
        object.__setattr__(self, "rf_field", tuple(float(x) for x in np.asarray(self.rf_field).reshape(3)))

    def base_timestep(self, trap: TrapConfig) -> float:
        return self.timestep if self.timestep is not None else 2 * np.pi / trap.rf_frequency / 40

    @property
    def langevin_radius(self) -> float:
        return self.langevin_radius_factor * self.contact_radius


@dataclass
class PairState:
    ion_position: np.ndarray
    ion_velocity: np.ndarray
    atom_position: np.ndarray
    atom_velocity: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        for name in ("ion_position", "ion_velocity", "atom_position", "atom_velocity"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(3).copy()
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")
            setattr(self, name, v)
        if not np.isfinite(self.time):
            raise ValueError("time must be finite")
        if self.separation == 0:
            raise ValueError("ion and atom coincide")

    @property
    def separation(self) -> float:
        return float(np.linalg.norm(self.ion_position - self.atom_position))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.ion_position, self.ion_velocity, self.atom_position, self.atom_velocity])

    @classmethod
    def from_array(cls, y, time: float) -> "PairState":
        return cls(y[0:3], y[3:6], y[6:9], y[9:12], time)

    def pair_energy(self, pair: SpeciesPair) -> float:
        """Kinetic plus interaction energy, ignoring the trap."""
        ke = 0.5 * pair.ion_mass * self.ion_velocity @ self.ion_velocity
        ke += 0.5 * pair.atom_mass * self.atom_velocity @ self.atom_velocity
        return float(ke - pair.c4 / (2 * self.separation**4))

    def momentum(self, pair: SpeciesPair) -> np.ndarray:
        return pair.ion_mass * self.ion_velocity + pair.atom_mass * self.atom_velocity


# --- Cartesian equations of motion -------------------------------------------


@numba.njit(cache=True)
def _cartesian_rhs(t, y, a, q, W, c4, m_i, m_a, rf_acc, out):
    rx = y[0] - y[6]
    ry = y[1] - y[7]
    rz = y[2] - y[8]
    d2 = rx * rx + ry * ry + rz * rz
    g = 2 * c4 / (d2 * d2 * d2)
    cw = math.cos(W * t)
    for j in range(3):
        out[j] = y[3 + j]
        out[6 + j] = y[9 + j]
    r = (rx, ry, rz)
    for j in range(3):
        trap_acc = -(a[j] + 2 * q[j] * cw) * y[j] * W * W / 4 + rf_acc[j] * cw
        out[3 + j] = trap_acc - g * r[j] / m_i
        out[9 + j] = g * r[j] / m_a


@numba.njit(cache=True)
def _cartesian_rk4(t, y, dt, a, q, W, c4, m_i, m_a, rf_acc, k1, k2, k3, k4, tmp):
    _cartesian_rhs(t, y, a, q, W, c4, m_i, m_a, rf_acc, k1)
    for i in range(12):
        tmp[i] = y[i] + 0.5 * dt * k1[i]
    _cartesian_rhs(t + 0.5 * dt, tmp, a, q, W, c4, m_i, m_a, rf_acc, k2)
    for i in range(12):
        tmp[i] = y[i] + 0.5 * dt * k2[i]
    _cartesian_rhs(t + 0.5 * dt, tmp, a, q, W, c4, m_i, m_a, rf_acc, k3)
    for i in range(12):
        tmp[i] = y[i] + dt * k3[i]
    _cartesian_rhs(t + dt, tmp, a, q, W, c4, m_i, m_a, rf_acc, k4)
    for i in range(12):
        y[i] += dt / 6 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i])


def _rf_acceleration(rf_field, ion_mass) -> np.ndarray:
    return E_CHARGE * np.asarray(rf_field, dtype=float) / ion_mass


def eom_derivatives(state: PairState, trap: TrapConfig, pair: SpeciesPair, rf_field=(0.0, 0.0, 0.0)) -> PairState:
    """Time derivatives as a PairState (positions hold velocities, velocities hold accelerations).

    Ion: -(a + 2q cos W t) x W^2/4 - 2 C4 r / (m_i r^6) [+ e E_rf cos W t / m_i];
    atom: +2 C4 r / (m_a r^6), with r = x_ion - x_atom.
    """
    if state.separation < SINGULAR_DISTANCE:
        raise IntegrationError("atom-ion separation below 1e-12 m", state)
    out = np.empty(12)
    _cartesian_rhs(state.time, state.as_array(), trap.a, trap.q, trap.rf_frequency, pair.c4,
                   pair.ion_mass, pair.atom_mass, _rf_acceleration(rf_field, pair.ion_mass), out)
    d = object.__new__(PairState)
    d.ion_position, d.ion_velocity, d.atom_position, d.atom_velocity = out[0:3], out[3:6], out[6:9], out[9:12]
    d.time = 1.0
    return d


def rk4_step(state: PairState, trap: TrapConfig, pair: SpeciesPair, dt: float, rf_field=(0.0, 0.0, 0.0)) -> PairState:
    if not dt > 0:
        raise ValueError("dt must be positive")
    if state.separation < SINGULAR_DISTANCE:
        raise IntegrationError("atom-ion separation below 1e-12 m", state)
    y = state.as_array()
    bufs = [np.empty(12) for _ in range(5)]
    _cartesian_rk4(state.time, y, dt, trap.a, trap.q, trap.rf_frequency, pair.c4, pair.ion_mass,
                   pair.atom_mass, _rf_acceleration(rf_field, pair.ion_mass), *bufs)
    if not np.all(np.isfinite(y)):
        raise IntegrationError("non-finite state after RK4 step", state)
    return PairState.from_array(y, state.time + dt)


@numba.njit(cache=True)
def _step_size(d, v_rel, base, policy, near_radius, far_factor, frac, c4, mu):
    dt = base if d < near_radius else base * far_factor
    if policy == STEP_FREE_FALL:
        if c4 > 0:
            t_ff = math.sqrt(mu * d**6 / (2 * c4))
            dt = min(dt, frac * t_ff)
        if v_rel > 0:
            dt = min(dt, frac * d / v_rel)
    elif policy == STEP_DISTANCE_SCALED:
        s = (d / 100e-9) ** 2
        dt = base * min(1.0, max(1e-4, s))
    return dt


@numba.njit(cache=True)
def _cartesian_integrate(t, y, t_end, a, q, W, c4, m_i, m_a, rf_acc, base, policy, near_radius,
                         far_factor, frac, contact, stop_radius, max_steps):
    """Integrate until t_end, contact, or the pair separates beyond stop_radius.

    Returns (t, min_distance, status, steps); status 0 time, 1 contact,
    2 separated, 3 step budget.
    """
    mu = m_i * m_a / (m_i + m_a)
    k1 = np.empty(12)
    k2 = np.empty(12)
    k3 = np.empty(12)
    k4 = np.empty(12)
    tmp = np.empty(12)
    d_min = np.inf
    steps = 0
    while t < t_end:
        rx = y[0] - y[6]
        ry = y[1] - y[7]
        rz = y[2] - y[8]
        d = math.sqrt(rx * rx + ry * ry + rz * rz)
        d_min = min(d_min, d)
        vx = y[3] - y[9]
        vy = y[4] - y[10]
        vz = y[5] - y[11]
        radial = rx * vx + ry * vy + rz * vz
        if d <= contact and radial < 0:
            return t, d_min, 1, steps
        if d > stop_radius and radial > 0:
            return t, d_min, 2, steps
        if steps >= max_steps:
            return t, d_min, 3, steps
        v = math.sqrt(vx * vx + vy * vy + vz * vz)
        dt = min(_step_size(d, v, base, policy, near_radius, far_factor, frac, c4, mu), t_end - t)
        _cartesian_rk4(t, y, dt, a, q, W, c4, m_i, m_a, rf_acc, k1, k2, k3, k4, tmp)
        t += dt
        steps += 1
    return t, d_min, 0, steps


@dataclass
class PairIntegration:
    state: PairState
    min_distance: float
    status: str  # "time", "contact", "separated" or "budget"
    steps: int


def integrate_pair(state: PairState, trap: TrapConfig, pair: SpeciesPair, duration: float, md: MdConfig = MdConfig(),
                   stop_radius: float = np.inf, stop_at_contact: bool = True,
                   max_steps: int = 100_000_000) -> PairIntegration:
    """Cartesian RK4 of the pair with the MD step policy.

    Stops at contact (when ``stop_at_contact``), when the pair separates
    beyond ``stop_radius`` while receding, or after ``duration``.
    """
    y = state.as_array()
    contact = md.contact_radius if stop_at_contact else 0.0
    t, d_min, status, steps = _cartesian_integrate(
        state.time, y, state.time + duration, trap.a, trap.q, trap.rf_frequency, pair.c4, pair.ion_mass,
        pair.atom_mass, _rf_acceleration(md.rf_field, pair.ion_mass), md.base_timestep(trap),
        _STEP_CODES[md.adaptive_step_policy], md.near_radius, md.far_step_factor, md.step_fraction,
        contact, stop_radius, max_steps,
    )
    if not np.all(np.isfinite(y)):
        raise IntegrationError("non-finite state during integration", state)
    names = ("time", "contact", "separated", "budget")
    return PairIntegration(PairState.from_array(y, t), float(d_min), names[status], int(steps))


# --- contact and entry sampling ------------------------------------------------


@numba.njit(cache=True)
def _reflect_relative(vi, va, r, m_i, m_a, rot, use_rot):
    """Elastic exchange; the relative velocity is mapped by ``rot`` or mirrored about r."""
    M = m_i + m_a
    vrel = np.empty(3)
    for j in range(3):
        vrel[j] = vi[j] - va[j]
    new = np.empty(3)
    if use_rot:
        for j in range(3):
            new[j] = rot[j, 0] * vrel[0] + rot[j, 1] * vrel[1] + rot[j, 2] * vrel[2]
    else:
        d = math.sqrt(r[0] ** 2 + r[1] ** 2 + r[2] ** 2)
        dot = (vrel[0] * r[0] + vrel[1] * r[1] + vrel[2] * r[2]) / d
        for j in range(3):
            new[j] = vrel[j] - 2 * dot * r[j] / d
    for j in range(3):
        vcm = (m_i * vi[j] + m_a * va[j]) / M
        vi[j] = vcm + m_a / M * new[j]
        va[j] = vcm - m_i / M * new[j]


def contact_collision(state: PairState, pair: SpeciesPair, rotation=None) -> PairState:
    """Elastic hard-sphere collision in the centre-of-mass frame.

    ``rotation=None`` is the billiard collision: the relative velocity is
    mirrored about the line of centres.  Otherwise the relative velocity
    is multiplied by the given orthogonal matrix.  Positions are unchanged.
    """
    rot = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float)
    if rotation is not None and (rot.shape != (3, 3) or not np.allclose(rot @ rot.T, np.eye(3), atol=1e-10)):
        raise ValueError("rotation must be an orthogonal 3x3 matrix")
    vi = state.ion_velocity.copy()
    va = state.atom_velocity.copy()
    _reflect_relative(vi, va, state.ion_position - state.atom_position, pair.ion_mass, pair.atom_mass,
                      rot, rotation is not None)
    return PairState(state.ion_position, vi, state.atom_position, va, state.time)


@numba.njit(cache=True)
def _sample_entry(rng, r0, sigma, pos, vel):
    nx = rng.standard_normal()
    ny = rng.standard_normal()
    nz = rng.standard_normal()
    nn = math.sqrt(nx * nx + ny * ny + nz * nz)
    nx /= nn
    ny /= nn
    nz /= nn
    gx = sigma * rng.standard_normal()
    gy = sigma * rng.standard_normal()
    gz = sigma * rng.standard_normal()
    gn = gx * nx + gy * ny + gz * nz
    vn = sigma * math.sqrt(-2 * math.log(1 - rng.random()))
    pos[0] = r0 * nx
    pos[1] = r0 * ny
    pos[2] = r0 * nz
    vel[0] = gx - gn * nx - vn * nx
    vel[1] = gy - gn * ny - vn * ny
    vel[2] = gz - gn * nz - vn * nz


def sample_atom_entry(sphere_radius: float, bath: BathConfig, pair: SpeciesPair, rng) -> tuple[np.ndarray, np.ndarray]:
    """Flux-weighted entry point and velocity of a gas atom crossing the sphere inward."""
    if not bath.temperature > 0:
        raise ValueError("atom entry needs a bath temperature > 0")
    pos = np.empty(3)
    vel = np.empty(3)
    _sample_entry(rng, sphere_radius, math.sqrt(KB * bath.temperature / pair.atom_mass), pos, vel)
    return pos, vel


def entry_rate(sphere_radius: float, bath: BathConfig, pair: SpeciesPair) -> float:
    """Rate n pi r0^2 <v> at which gas atoms enter the sphere (1/s)."""
    v_mean = math.sqrt(8 * KB * bath.temperature / (math.pi * pair.atom_mass))
    return bath.density * math.pi * sphere_radius**2 * v_mean


# --- Floquet solution of the trap motion ------------------------------------


@dataclass(frozen=True)
class FloquetAxis:
    """x(tau) = Re[c psi(tau)], psi = sum_k C_k exp(i (beta + 2k) tau), tau = W t / 2.

    ``forced`` holds the cosine coefficients of the periodic response to a
    homogeneous rf field, x_p = sum_k P_k cos(2 k tau).
    """

    beta: float
    coefficients: np.ndarray  # C_k for k = -K..K, C_0 = 1
    forced: np.ndarray  # P_k for k = 0..K

    @property
    def order(self) -> int:
        return (len(self.coefficients) - 1) // 2

    @property
    def wronskian(self) -> float:
        k = np.arange(-self.order, self.order + 1)
        return float(self.coefficients.sum() * (self.coefficients * (self.beta + 2 * k)).sum())

    def psi(self, tau):
        k = np.arange(-self.order, self.order + 1)
        tau = np.asarray(tau, dtype=float)[..., None]
        ph = np.exp(1j * (self.beta + 2 * k) * tau)
        return (self.coefficients * ph).sum(-1), (1j * (self.beta + 2 * k) * self.coefficients * ph).sum(-1)


def _hill_coefficients(a: float, q: float, beta: float, order: int) -> tuple[np.ndarray, float]:
    """Coefficients with C_0 = 1 from the k != 0 rows; returns them and the k = 0 residual."""
    k = np.arange(-order, order + 1)
    n = len(k)
    A = np.diag(a - (beta + 2 * k) ** 2) + q * (np.eye(n, k=1) + np.eye(n, k=-1))
    mid = order
    rows = [i for i in range(n) if i != mid]
    cols = rows
    rhs = -A[np.ix_(rows, [mid])].ravel()
    sol = linalg.solve(A[np.ix_(rows, cols)], rhs)
    C = np.empty(n)
    C[mid] = 1.0
    C[rows] = sol
    return C, float(A[mid] @ C)


def floquet_axis(a: float, q: float, field_acc: float, rf_frequency: float, order: int = 6) -> FloquetAxis:
    """Characteristic exponent and Hill coefficients of x'' + (a + 2q cos 2 tau) x = f cos 2 tau.

    ``field_acc`` is the homogeneous rf acceleration amplitude e E / m.
    Only stable, confined axes (0 < beta < 1) are supported.
    """
    guess = math.sqrt(a + q * q / 2)
    if guess <= 0:
        raise ValueError("axis has no confinement")
    if q == 0:
        beta = math.sqrt(a)
        C = np.zeros(2 * order + 1)
        C[order] = 1.0
    else:
        f = lambda b: _hill_coefficients(a, q, b, order)[1]
        lo, hi = max(1e-9, 0.5 * guess), min(0.999, 1.5 * guess)
        beta = optimize.brentq(f, lo, hi, xtol=1e-15, rtol=1e-14)
        C = _hill_coefficients(a, q, beta, order)[0]
    # periodic forced response, cosine series
    f_tau = 4 * field_acc / rf_frequency**2
    kk = np.arange(order + 1)
    A = np.diag(a - 4.0 * kk**2)
    for i in range(order):
        A[i, i + 1] += q
        A[i + 1, i] += q
    A[1, 0] += q  # cos(0) feeds cos(2 tau) twice
    rhs = np.zeros(order + 1)
    rhs[1] = f_tau
    P = np.linalg.lstsq(A, rhs, rcond=None)[0] if f_tau != 0 else np.zeros(order + 1)
    return FloquetAxis(float(beta), C, P)


def floquet_axes(trap: TrapConfig, pair: SpeciesPair, md: MdConfig) -> list[FloquetAxis]:
    acc = _rf_acceleration(md.rf_field, pair.ion_mass)
    return [floquet_axis(trap.a[j], trap.q[j], acc[j], trap.rf_frequency, md.hill_order) for j in range(3)]


def exact_secular_frequencies(trap: TrapConfig, order: int = 6) -> np.ndarray:
    """Secular frequencies beta W / 2 from the Hill determinant (rad/s)."""
    return np.array([floquet_axis(trap.a[j], trap.q[j], 0.0, trap.rf_frequency, order).beta
                     for j in range(3)]) * trap.rf_frequency / 2


def floquet_amplitudes(x, v, t, axes: list[FloquetAxis], rf_frequency: float) -> np.ndarray:
    """Complex amplitudes c_j of the ion at (x, v, t); inverse of the Floquet representation."""
    c = np.empty(3, dtype=complex)
    tau = rf_frequency * t / 2
    for j, ax in enumerate(axes):
        psi, dpsi = ax.psi(tau)
        kk = np.arange(ax.order + 1)
        xp = np.sum(ax.forced * np.cos(2 * kk * tau))
        dxp = -np.sum(2 * kk * ax.forced * np.sin(2 * kk * tau))
        xj = x[j] - xp
        dxj = 2 * v[j] / rf_frequency - dxp
        W = ax.wronskian
        c[j] = complex((dpsi.imag * xj - psi.imag * dxj) / W, (dpsi.real * xj - psi.real * dxj) / W)
    return c


def floquet_energy(c, trap: TrapConfig, ion_mass: float, axes: list[FloquetAxis]) -> float:
    """Secular energy sum_j m (beta_j W / 2)^2 |c_j|^2 / 2."""
    w = np.array([ax.beta for ax in axes]) * trap.rf_frequency / 2
    return float(0.5 * ion_mass * np.sum(w**2 * np.abs(np.asarray(c)) ** 2))


def _pack_axes(axes: list[FloquetAxis]):
    K = axes[0].order
    beta = np.array([ax.beta for ax in axes])
    C = np.array([ax.coefficients for ax in axes])
    P = np.array([ax.forced for ax in axes])
    wr = np.array([ax.wronskian for ax in axes])
    k = np.arange(-K, K + 1)
    box = np.abs(C).sum(1)  # |psi| <= box
    ripple = box - np.abs(C[:, K])  # |psi - C_0 exp(i beta tau)| <= ripple
    speed = np.array([np.sum(np.abs(C[j] * (beta[j] + 2 * k))) for j in range(3)])
    p_box = np.abs(P).sum(1)
    p_speed = np.array([np.sum(np.abs(2 * np.arange(K + 1) * P[j])) for j in range(3)])
    D = C * (beta[:, None] + 2 * k)
    return beta, C, D, P, wr, box, ripple, speed, p_box, p_speed


# --- Floquet-frame kernels ---------------------------------------------------


@numba.njit(cache=True)
def _ion_kinematics(tau, cre, cim, beta, C, D, P, half_w, x, v, w1, w2, zpow):
    """Ion position/velocity at tau from amplitudes; also stores Re/Im psi.

    ``D`` holds C_k (beta + 2k), the coefficients of -i dpsi/dtau;
    ``zpow`` is (2, 2K+1) scratch.
    """
    K = (C.shape[1] - 1) // 2
    n = 2 * K + 1
    zr = math.cos(2 * tau)
    zi = math.sin(2 * tau)
    # powers z^k for k = -K..K, shared by the three axes
    pr = zpow[0]
    pi_ = zpow[1]
    pr[K] = 1.0
    pi_[K] = 0.0
    for k in range(1, K + 1):
        ar = pr[K + k - 1]
        ai = pi_[K + k - 1]
        pr[K + k] = ar * zr - ai * zi
        pi_[K + k] = ar * zi + ai * zr
        pr[K - k] = pr[K + k]
        pi_[K - k] = -pi_[K + k]
    for j in range(3):
        sr = 0.0
        si = 0.0
        dr = 0.0
        di = 0.0
        for i in range(n):
            sr += C[j, i] * pr[i]
            si += C[j, i] * pi_[i]
            dr += D[j, i] * pr[i]
            di += D[j, i] * pi_[i]
        er = math.cos(beta[j] * tau)
        ei = math.sin(beta[j] * tau)
        # psi = e * s, dpsi = i e * ds
        psr = er * sr - ei * si
        psi_ = er * si + ei * sr
        dqr = er * dr - ei * di
        dqi = er * di + ei * dr
        w1[j] = psr
        w2[j] = psi_
        # Re[c psi] and Re[c i dq] = -(cre dqi + cim dqr)
        x[j] = cre[j] * psr - cim[j] * psi_
        v[j] = -half_w * (cre[j] * dqi + cim[j] * dqr)
        if P[j, 0] != 0.0 or P[j, 1] != 0.0:
            for kk in range(P.shape[1]):
                x[j] += P[j, kk] * pr[K + kk]
                v[j] -= half_w * 2 * kk * P[j, kk] * pi_[K + kk]


@numba.njit(cache=True)
def _floquet_rhs(t, y, W, beta, C, D, P, wr, c4, m_i, m_a, out, xi, vi, w1, w2, zpow):
    # y = [c_re(3), c_im(3), x_atom(3), v_atom(3)]
    _ion_kinematics(W * t / 2, y[0:3], y[3:6], beta, C, D, P, W / 2, xi, vi, w1, w2, zpow)
    rx = xi[0] - y[6]
    ry = xi[1] - y[7]
    rz = xi[2] - y[8]
    d2 = rx * rx + ry * ry + rz * rz
    g = 2 * c4 / (d2 * d2 * d2)
    r = (rx, ry, rz)
    for j in range(3):
        fi = -g * r[j] / m_i
        scale = 2 / W * fi / wr[j]
        out[j] = -scale * w2[j]
        out[3 + j] = -scale * w1[j]
        out[6 + j] = y[9 + j]
        out[9 + j] = g * r[j] / m_a


@numba.njit(cache=True)
def _floquet_rk4(t, y, dt, W, beta, C, D, P, wr, c4, m_i, m_a, k1, k2, k3, k4, tmp, xi, vi, w1, w2, zpow):
    _floquet_rhs(t, y, W, beta, C, D, P, wr, c4, m_i, m_a, k1, xi, vi, w1, w2, zpow)
    for i in range(12):
        tmp[i] = y[i] + 0.5 * dt * k1[i]
    _floquet_rhs(t + 0.5 * dt, tmp, W, beta, C, D, P, wr, c4, m_i, m_a, k2, xi, vi, w1, w2, zpow)
    for i in range(12):
        tmp[i] = y[i] + 0.5 * dt * k2[i]
    _floquet_rhs(t + 0.5 * dt, tmp, W, beta, C, D, P, wr, c4, m_i, m_a, k3, xi, vi, w1, w2, zpow)
    for i in range(12):
        tmp[i] = y[i] + dt * k3[i]
    _floquet_rhs(t + dt, tmp, W, beta, C, D, P, wr, c4, m_i, m_a, k4, xi, vi, w1, w2, zpow)
    for i in range(12):
        y[i] += dt / 6 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i])


@numba.njit(cache=True)
def _apply_contact(rng, t, y, W, beta, C, D, P, wr, m_i, m_a, model, xi, vi, w1, w2, zpow):
    """Contact collision in the Floquet frame: the ion's velocity jump moves c."""
    _ion_kinematics(W * t / 2, y[0:3], y[3:6], beta, C, D, P, W / 2, xi, vi, w1, w2, zpow)
    r = np.empty(3)
    va = np.empty(3)
    vi_new = np.empty(3)
    for j in range(3):
        r[j] = xi[j] - y[6 + j]
        va[j] = y[9 + j]
        vi_new[j] = vi[j]
    if model == CONTACT_ISOTROPIC:
        # isotropic outgoing direction, same relative speed
        vr = math.sqrt((vi[0] - va[0]) ** 2 + (vi[1] - va[1]) ** 2 + (vi[2] - va[2]) ** 2)
        nx = rng.standard_normal()
        ny = rng.standard_normal()
        nz = rng.standard_normal()
        nn = math.sqrt(nx * nx + ny * ny + nz * nz)
        n = np.array([nx / nn, ny / nn, nz / nn])
        if n[0] * r[0] + n[1] * r[1] + n[2] * r[2] < 0:
            dr = math.sqrt(r[0] ** 2 + r[1] ** 2 + r[2] ** 2)
            dot = (n[0] * r[0] + n[1] * r[1] + n[2] * r[2]) / dr
            for j in range(3):
                n[j] -= 2 * dot * r[j] / dr
        M = m_i + m_a
        for j in range(3):
            vcm = (m_i * vi[j] + m_a * va[j]) / M
            vi_new[j] = vcm + m_a / M * vr * n[j]
            va[j] = vcm - m_i / M * vr * n[j]
    else:
        _reflect_relative(vi_new, va, r, m_i, m_a, np.empty((3, 3)), False)
    for j in range(3):
        dv = vi_new[j] - vi[j]
        scale = 2 / W * dv / wr[j]
        y[j] -= scale * w2[j]
        y[3 + j] -= scale * w1[j]
        y[9 + j] = va[j]


@numba.njit(cache=True)
def _box_distance(xa, half):
    s = 0.0
    for j in range(3):
        e = abs(xa[j]) - half[j]
        if e > 0:
            s += e * e
    return math.sqrt(s)


@numba.njit(cache=True)
def _sphere_exit_time(xa, va, r0):
    """Time until a straight-line atom leaves the sphere; -1 if it is outside and receding or missing."""
    b = xa[0] * va[0] + xa[1] * va[1] + xa[2] * va[2]
    v2 = va[0] ** 2 + va[1] ** 2 + va[2] ** 2
    c = xa[0] ** 2 + xa[1] ** 2 + xa[2] ** 2 - r0 * r0
    if c >= 0 and b >= 0:
        return -1.0
    disc = b * b - v2 * c
    if disc < 0:
        return -1.0
    return (-b + math.sqrt(disc)) / v2


@numba.njit(cache=True)
def _axis_wait(theta, omega, amp, lo, hi):
    """Time until amp cos(theta + omega s) first lies in [lo, hi]; inf if never."""
    if amp <= 0.0:
        return 0.0 if lo <= 0.0 <= hi else np.inf
    u_lo = lo / amp
    u_hi = hi / amp
    if u_lo > 1.0 or u_hi < -1.0:
        return np.inf
    if u_lo <= -1.0 and u_hi >= 1.0:
        return 0.0
    a1 = math.acos(min(u_hi, 1.0))
    a2 = math.acos(max(u_lo, -1.0))
    two_pi = 2 * math.pi
    th = theta % two_pi
    # allowed phases: [a1, a2] and [2 pi - a2, 2 pi - a1]
    if (a1 <= th <= a2) or (two_pi - a2 <= th <= two_pi - a1):
        return 0.0
    if th < a1:
        gap = a1 - th
    elif th < two_pi - a2:
        gap = two_pi - a2 - th
    else:
        gap = two_pi - th + a1
    return gap / omega


@numba.njit(cache=True)
def _visit(rng, t, y, r0, W, beta, C, D, P, wr, box, ripple, speed, p_box, p_speed, c4, m_i, m_a,
           r_sw, hyst, contact, langevin_r, base, policy, near_radius, far_factor, frac, model,
           max_steps, k1, k2, k3, k4, tmp, xi, vi, w1, w2, zpow):
    """One atom from entry to exit.  Returns (t, min distance, status, rk4 steps)."""
    mu = m_i * m_a / (m_i + m_a)
    half_w = W / 2
    dt_floor = 2 * math.pi / W / 50
    zone = False
    d_min = np.inf
    steps = 0
    flights = 0
    K0 = (C.shape[1] - 1) // 2
    half = np.empty(3)
    sec_amp = np.empty(3)
    phase = np.empty(3)
    lo_win = np.empty(3)
    hi_win = np.empty(3)
    xa = y[6:9]
    va = y[9:12]
    while True:
        if not zone:
            vnorm = math.sqrt(va[0] ** 2 + va[1] ** 2 + va[2] ** 2)
            if vnorm == 0:
                # an atom at rest only matters if it already sits in the zone
                _ion_kinematics(W * t / 2, y[0:3], y[3:6], beta, C, D, P, half_w, xi, vi, w1, w2, zpow)
                d = math.sqrt((xi[0] - xa[0]) ** 2 + (xi[1] - xa[1]) ** 2 + (xi[2] - xa[2]) ** 2)
                if d <= r_sw:
                    zone = True
                    continue
                return t, d_min, VISIT_DONE, steps
            s_exit = _sphere_exit_time(xa, va, r0)
            if s_exit < 0:
                return t, d_min, VISIT_DONE, steps
            for j in range(3):
                half[j] = math.sqrt(y[j] ** 2 + y[3 + j] ** 2) * box[j] + p_box[j]
            dbox = _box_distance(xa, half)
            if dbox > r_sw:
                # the box is only a screen, so overshooting into it is harmless
                ds = max((dbox - r_sw) / vnorm, dt_floor)
                if ds >= s_exit:
                    return t + s_exit, d_min, VISIT_DONE, steps
                for j in range(3):
                    xa[j] += va[j] * ds
                t += ds
                continue
            # jump over stretches where some axis of the ion's secular motion
            # cannot come within reach of the atom's path over the next chunk
            chunk = min(max(0.5 * r_sw / vnorm, dt_floor), s_exit)
            tau = W * t / 2
            for j in range(3):
                amp = math.sqrt(y[j] ** 2 + y[3 + j] ** 2)
                sec_amp[j] = amp * abs(C[j, K0])
                phase[j] = beta[j] * tau + math.atan2(y[3 + j], y[j]) + (math.pi if C[j, K0] < 0 else 0.0)
                reach = r_sw + amp * ripple[j] + p_box[j]
                lo_win[j] = xa[j] + min(0.0, va[j] * chunk) - reach
                hi_win[j] = xa[j] + max(0.0, va[j] * chunk) + reach
            ds = 0.0
            hit = False
            for _ in range(64):
                wait = 0.0
                for j in range(3):
                    wait = max(wait, _axis_wait(phase[j] + half_w * beta[j] * ds, half_w * beta[j],
                                                sec_amp[j], lo_win[j], hi_win[j]))
                if wait == 0.0:
                    hit = True
                    break
                ds += wait
                if ds >= chunk:
                    break
            if ds >= chunk:
                ds = chunk
            elif hit:
                for j in range(3):
                    xa[j] += va[j] * ds
                t += ds
                ds = 0.0
                _ion_kinematics(W * t / 2, y[0:3], y[3:6], beta, C, D, P, half_w, xi, vi, w1, w2, zpow)
                d = math.sqrt((xi[0] - xa[0]) ** 2 + (xi[1] - xa[1]) ** 2 + (xi[2] - xa[2]) ** 2)
                d_min = min(d_min, d)
                if d <= r_sw:
                    zone = True
                    continue
                s_exit = _sphere_exit_time(xa, va, r0)
                if s_exit < 0:
                    return t, d_min, VISIT_DONE, steps
                vion2 = 0.0
                for j in range(3):
                    amp = math.sqrt(y[j] ** 2 + y[3 + j] ** 2)
                    vion2 += (half_w * (amp * speed[j] + p_speed[j])) ** 2
                ds = max((d - r_sw) / (vnorm + math.sqrt(vion2)), dt_floor)
            if ds >= s_exit:
                return t + s_exit, d_min, VISIT_DONE, steps
            flights += 1
            if flights >= max_steps:
                return t, d_min, VISIT_FLAGGED, steps
            for j in range(3):
                xa[j] += va[j] * ds
            t += ds
            continue
        _ion_kinematics(W * t / 2, y[0:3], y[3:6], beta, C, D, P, half_w, xi, vi, w1, w2, zpow)
        rx = xi[0] - xa[0]
        ry = xi[1] - xa[1]
        rz = xi[2] - xa[2]
        d = math.sqrt(rx * rx + ry * ry + rz * rz)
        d_min = min(d_min, d)
        vx = vi[0] - va[0]
        vy = vi[1] - va[1]
        vz = vi[2] - va[2]
        radial = rx * vx + ry * vy + rz * vz
        if d <= contact and radial < 0:
            _apply_contact(rng, t, y, W, beta, C, D, P, wr, m_i, m_a, model, xi, vi, w1, w2, zpow)
            continue
        if d > hyst * r_sw:
            zone = False
            continue
        if steps >= max_steps:
            return t, d_min, VISIT_FLAGGED, steps
        v = math.sqrt(vx * vx + vy * vy + vz * vz)
        dt = _step_size(d, v, base, policy, near_radius, far_factor, frac, c4, mu)
        _floquet_rk4(t, y, dt, W, beta, C, D, P, wr, c4, m_i, m_a, k1, k2, k3, k4, tmp, xi, vi, w1, w2, zpow)
        t += dt
        steps += 1


@numba.njit(cache=True)
def _reduce_time(t, y, beta, T_rf):
    """Shift t into [0, T_rf) by whole rf periods, rotating the amplitudes to match."""
    n = math.floor(t / T_rf)
    if n == 0:
        return t
    for j in range(3):
        ph = beta[j] * math.pi * n
        cr = y[j]
        ci = y[3 + j]
        cs = math.cos(ph)
        sn = math.sin(ph)
        y[j] = cr * cs - ci * sn
        y[3 + j] = cr * sn + ci * cs
    return t - n * T_rf


@numba.njit(cache=True)
def _run_one(rng, target, W, beta, C, D, P, wr, box, ripple, speed, p_box, p_speed, c4, m_i, m_a, r0, sigma_a,
             rate, e_init, r_sw, hyst, contact, langevin_r, base, policy, near_radius, far_factor, frac,
             model, max_steps, max_idle):
    """Returns (energy, langevin count, visits, flagged visits, stalled)."""
    T_rf = 2 * math.pi / W
    half_w = W / 2
    y = np.zeros(12)
    for j in range(3):
        e = -e_init * math.log(1 - rng.random()) if e_init > 0 else 0.0
        amp = math.sqrt(2 * e / m_i) / (beta[j] * half_w)
        ph = 2 * math.pi * rng.random()
        y[j] = amp * math.cos(ph)
        y[3 + j] = amp * math.sin(ph)
    k1 = np.empty(12)
    k2 = np.empty(12)
    k3 = np.empty(12)
    k4 = np.empty(12)
    tmp = np.empty(12)
    xi = np.empty(3)
    vi = np.empty(3)
    w1 = np.empty(3)
    w2 = np.empty(3)
    zpow = np.empty((2, C.shape[1]))
    pos = np.empty(3)
    vel = np.empty(3)
    t = 0.0
    langevin = 0
    visits = 0
    flagged = 0
    idle = 0
    stalled = False
    while langevin < target:
        t += -math.log(1 - rng.random()) / rate
        t = _reduce_time(t, y, beta, T_rf)
        _sample_entry(rng, r0, sigma_a, pos, vel)
        for j in range(3):
            y[6 + j] = pos[j]
            y[9 + j] = vel[j]
        t, d_min, status, _ = _visit(rng, t, y, r0, W, beta, C, D, P, wr, box, ripple, speed, p_box, p_speed, c4, m_i,
                                     m_a, r_sw, hyst, contact, langevin_r, base, policy, near_radius,
                                     far_factor, frac, model, max_steps, k1, k2, k3, k4, tmp, xi, vi, w1, w2, zpow)
        visits += 1
        if status == VISIT_FLAGGED:
            flagged += 1
        if d_min <= langevin_r:
            langevin += 1
            idle = 0
        else:
            idle += 1
            if idle >= max_idle:
                stalled = True
                break
    energy = 0.0
    for j in range(3):
        energy += 0.5 * m_i * (beta[j] * half_w) ** 2 * (y[j] ** 2 + y[3 + j] ** 2)
    return energy, langevin, visits, flagged, stalled


def _kernel_args(trap: TrapConfig, pair: SpeciesPair, bath: BathConfig, md: MdConfig):
    axes = floquet_axes(trap, pair, md)
    beta, C, D, P, wr, box, ripple, speed, p_box, p_speed = _pack_axes(axes)
    return (
        trap.rf_frequency, beta, C, D, P, wr, box, ripple, speed, p_box, p_speed, pair.c4, pair.ion_mass, pair.atom_mass,
        md.sphere_radius, math.sqrt(KB * bath.temperature / pair.atom_mass),
        entry_rate(md.sphere_radius, bath, pair), KB * md.initial_temperature, md.switch_radius,
        md.switch_hysteresis, md.contact_radius, md.langevin_radius, md.base_timestep(trap),
        _STEP_CODES[md.adaptive_step_policy], md.near_radius, md.far_step_factor, md.step_fraction,
        _CONTACT_CODES[md.contact_model], md.max_steps_per_visit, md.max_idle_visits,
    )


def _check_inputs(trap: TrapConfig, pair: SpeciesPair, bath: BathConfig):
    s = trap.a + trap.q**2 / 2
    if np.any(s <= 0):
        raise ValueError("the MD needs all three axes confined")
    if not bath.temperature > 0:
        raise ValueError("the MD needs a bath temperature > 0 (entry flux)")


def _run_chunk(start, stop, trap, pair, bath, md):
    args = _kernel_args(trap, pair, bath, md)
    n = stop - start
    energy = np.empty(n)
    langevin = np.empty(n, dtype=np.int64)
    visits = np.empty(n, dtype=np.int64)
    flagged_visits = np.empty(n, dtype=np.int64)
    stalled = np.empty(n, dtype=bool)
    for k in range(n):
        rng = realization_rng(md.master_seed, start + k)
        if md.collision_count_mode == "poisson":
            target = max(1, int(rng.poisson(md.max_langevin_collisions)))
        else:
            target = md.max_langevin_collisions
        energy[k], langevin[k], visits[k], flagged_visits[k], stalled[k] = _run_one(rng, target, *args)
    flagged = stalled | (flagged_visits > 0)
    return EnergyRecords(energy, langevin, flagged, None,
                         {"visits": visits, "flagged_visits": flagged_visits, "stalled": stalled})


def run_polarization_md(trap: TrapConfig, pair: SpeciesPair, bath: BathConfig, md: MdConfig,
                        workers: int = 1, first_index: int = 0) -> EnergyRecords:
    """Independent MD histories; realization ``i`` uses ``realization_rng(md.master_seed, i)``.

    Indices run from ``first_index``, so a long run can be split into blocks
    whose concatenation equals the single run.

    ``total_energy`` is the ion's secular energy after the Langevin-collision
    target is reached; ``collision_count`` is the Langevin count.  A
    realization is flagged when any visit hit the step budget or when it
    stalled (``max_idle_visits`` visits in a row without a Langevin
    collision).
    """
    _check_inputs(trap, pair, bath)
    parts = run_chunked(_run_chunk, md.n_realizations, (trap, pair, bath, md), workers, first_index=first_index)
    rec = EnergyRecords.concatenate(parts)
    n_visits = int(rec.extra["visits"].sum())
    n_flag_visits = int(rec.extra["flagged_visits"].sum())
    rec.metadata = {
        "simulation": "polarization_md",
        "recorded_energy": "secular total from Floquet amplitudes",
        "exact_secular_frequencies_rad_s": exact_secular_frequencies(trap, md.hill_order).tolist(),
        "n_flagged": int(rec.flagged.sum()),
        "n_stalled": int(rec.extra["stalled"].sum()),
        "visits": n_visits,
        "flagged_visits": n_flag_visits,
        "flagged_visit_fraction": n_flag_visits / n_visits if n_visits else 0.0,
        "contact_model": md.contact_model,
        "first_index": first_index,
        "md": asdict(md),
    }
    return rec


# --- single-collision helpers --------------------------------------------------


def single_capture_energy(trap: TrapConfig, pair: SpeciesPair, md: MdConfig, rng, start_distance: float = 100e-9) -> float:
    """Secular energy of an initially resting ion after one atom released at rest nearby.

    The atom starts ``start_distance`` from the ion in a random direction at
    a random rf phase and falls in; the visit ends when the atom has left
    the switch radius.
    """
    _check_inputs(trap, pair, BathConfig(temperature=1e-6))
    axes = floquet_axes(trap, pair, md)
    beta, C, D, P, wr, box, ripple, speed, p_box, p_speed = _pack_axes(axes)
    W = trap.rf_frequency
    t = rng.random() * 2 * np.pi / W
    n = rng.standard_normal(3)
    n /= np.linalg.norm(n)
    y = np.zeros(12)
    # ion at rest apart from the forced response; the atom sits start_distance away
    xi = np.zeros(3)
    vi = np.zeros(3)
    work = [np.empty(3), np.empty(3), np.empty((2, C.shape[1]))]
    _ion_kinematics(W * t / 2, y[0:3], y[3:6], beta, C, D, P, W / 2, xi, vi, *work)
    y[6:9] = xi + start_distance * n
    r_sw = max(md.switch_radius, 1.5 * start_distance)
    bufs = [np.empty(12) for _ in range(5)] + [np.empty(3) for _ in range(4)] + [np.empty((2, C.shape[1]))]
    t_end, d_min, status, steps = _visit(
        rng, t, y, 10 * r_sw, W, beta, C, D, P, wr, box, ripple, speed, p_box, p_speed, pair.c4, pair.ion_mass,
        pair.atom_mass, r_sw, md.switch_hysteresis, md.contact_radius, md.langevin_radius,
        md.base_timestep(trap), _STEP_CODES[md.adaptive_step_policy], md.near_radius, md.far_step_factor,
        md.step_fraction, _CONTACT_CODES[md.contact_model], md.max_steps_per_visit, *bufs,
    )
    return floquet_energy(y[0:3] + 1j * y[3:6], trap, pair.ion_mass, axes)
