"""Linear Paul trap definitions and first-order Mathieu trajectories.

Everything here is SI. The trajectory model is the first-order (in a, q)
solution of the Mathieu equation with an in-phase excess-micromotion
displacement ``u_dc``::

    x_j(t) = (u_dc_j + u_j cos(w_j t + phi_j)) (1 + q_j/2 cos(W t))
    v_j(t) = -u_j w_j sin(w_j t + phi_j)
             - (u_j cos(w_j t + phi_j) + u_dc_j) W q_j/2 sin(W t)

with ``w_j = W/2 sqrt(a_j + q_j**2/2)`` and ``W`` the rf drive frequency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constants import KB, AMU, C4_ATOMIC_UNIT

MAX_ABS_A = 0.3
MAX_ABS_Q = 0.9


def _vec3(values, name: str) -> tuple[float, float, float]:
    arr = np.asarray(values, dtype=float).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must have exactly 3 components, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return tuple(float(x) for x in arr)


@dataclass(frozen=True)
class TrapConfig:
    """Full definition of a linear Paul trap and the ion's EMM sources.

    Parameters
    ----------
    rf_frequency : float
        Angular rf drive frequency in rad/s.
    mathieu_a, mathieu_q : 3-sequence
        Per-axis Mathieu parameters.
    emm_dc_displacement : 3-sequence
        Ion displacement from the rf null (m); gives in-phase EMM.
    emm_quadrature_amplitude : 3-sequence
        Quadrature EMM amplitude (m).  Only enters |u_EMM| and the
        spectroscopy modulation index, never the trajectory.
    """

    rf_frequency: float
    mathieu_a: tuple = (0.0, 0.0, 0.0)
    mathieu_q: tuple = (0.0, 0.0, 0.0)
    emm_dc_displacement: tuple = (0.0, 0.0, 0.0)
    emm_quadrature_amplitude: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("mathieu_a", "mathieu_q", "emm_dc_displacement", "emm_quadrature_amplitude"):
            object.__setattr__(self, name, _vec3(getattr(self, name), name))
        if not (np.isfinite(self.rf_frequency) and self.rf_frequency > 0):
            raise ValueError("rf_frequency must be positive")
        object.__setattr__(self, "rf_frequency", float(self.rf_frequency))
        a, q = self.a, self.q
        if np.any(np.abs(a) > MAX_ABS_A) or np.any(np.abs(q) > MAX_ABS_Q):
            raise ValueError(
                f"Mathieu parameters outside the first-order regime: a={a}, q={q}"
            )
        for j in range(3):
            s = a[j] + q[j] ** 2 / 2
            if s < 0 or (s == 0 and (a[j] != 0 or q[j] != 0)):
                raise ValueError(f"axis {j} is unstable: a + q^2/2 = {s:.3g}")

    @property
    def a(self) -> np.ndarray:
        return np.array(self.mathieu_a)

    @property
    def q(self) -> np.ndarray:
        return np.array(self.mathieu_q)

    @property
    def u_dc(self) -> np.ndarray:
        return np.array(self.emm_dc_displacement)

    @property
    def u_quadrature(self) -> np.ndarray:
        return np.array(self.emm_quadrature_amplitude)

    def with_emm(self, dc_displacement=(0.0, 0.0, 0.0), quadrature=(0.0, 0.0, 0.0)) -> "TrapConfig":
        return TrapConfig(self.rf_frequency, self.mathieu_a, self.mathieu_q, dc_displacement, quadrature)


@dataclass(frozen=True)
class SpeciesPair:
    """Ion/atom masses (kg) and the polarization coefficient C4 (J m^4)."""

    ion_mass: float
    atom_mass: float
    c4: float

    def __post_init__(self):
        if not (self.ion_mass > 0 and self.atom_mass > 0):
            raise ValueError("masses must be positive")
        if self.c4 < 0:
            raise ValueError("C4 must be non-negative")

    @property
    def reduced_mass(self) -> float:
        return self.ion_mass * self.atom_mass / (self.ion_mass + self.atom_mass)

    @property
    def mass_ratio(self) -> float:
        return self.ion_mass / self.atom_mass

    @classmethod
    def from_atomic_units(cls, ion_mass_u: float, atom_mass_u: float, c4_au: float) -> "SpeciesPair":
        return cls(ion_mass_u * AMU, atom_mass_u * AMU, c4_au * C4_ATOMIC_UNIT)


@dataclass(frozen=True)
class SecularState:
    """Secular amplitude (m) and phase (rad, wrapped to [0, 2pi)) per mode."""

    amplitude: tuple = (0.0, 0.0, 0.0)
    phase: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        amp = np.array(_vec3(self.amplitude, "amplitude"))
        if np.any(amp < 0):
            raise ValueError("amplitudes must be non-negative")
        ph = np.mod(np.array(_vec3(self.phase, "phase")), 2 * np.pi)
        object.__setattr__(self, "amplitude", tuple(amp.tolist()))
        object.__setattr__(self, "phase", tuple(ph.tolist()))

    @property
    def u(self) -> np.ndarray:
        return np.array(self.amplitude)

    @property
    def phi(self) -> np.ndarray:
        return np.array(self.phase)

    def energy(self, trap: TrapConfig, ion_mass: float) -> float:
        """Secular total energy sum_j m w_j^2 u_j^2 / 2 in joules."""
        w = secular_frequencies(trap)
        return float(0.5 * ion_mass * np.sum((w * self.u) ** 2))


def secular_frequencies(trap: TrapConfig) -> np.ndarray:
    """First-order secular frequencies ``W/2 sqrt(a + q^2/2)`` (rad/s)."""
    s = trap.a + trap.q**2 / 2
    if np.any(s < 0):
        raise ValueError("unstable axis")
    return trap.rf_frequency / 2 * np.sqrt(s)


def mathieu_from_frequencies(omega, rf_frequency: float, axial_rf_free: bool = True) -> TrapConfig:
    """Solve for Mathieu parameters reproducing the given secular frequencies.

    With ``axial_rf_free`` (a linear trap) the axis z carries no rf
    (q_z = 0), the radial rf quadrupole is (-q, q, 0) and the dc
    quadrupole satisfies Laplace, a_x + a_y + a_z = 0; the radial
    difference a_y - a_x is the degeneracy-lifting bias field.  Otherwise
    each axis is treated as a pure rf axis with a_j = 0.
    """
    w = np.asarray(omega, dtype=float).reshape(3)
    if np.any(w < 0):
        raise ValueError("secular frequencies must be non-negative")
    if rf_frequency <= 0:
        raise ValueError("rf_frequency must be positive")
    target = (2 * w / rf_frequency) ** 2  # a_j + q_j^2/2 per axis
    if axial_rf_free:
        q2 = target.sum()
        if q2 <= 0:
            raise ValueError("no real Mathieu solution: all frequencies zero")
        q = np.sqrt(q2)
        a = np.array([target[0] - q2 / 2, target[1] - q2 / 2, target[2]])
        qv = np.array([-q, q, 0.0])
    else:
        a = np.zeros(3)
        qv = np.sqrt(2 * target)
    try:
        return TrapConfig(rf_frequency, a, qv)
    except ValueError as exc:
        raise ValueError(f"no real Mathieu solution for omega={w}: {exc}") from None


def trajectory_at(trap: TrapConfig, state: SecularState, t):
    """Position and velocity (3-vectors, or (..., 3) arrays for array ``t``)."""
    t = np.asarray(t, dtype=float)[..., None]
    w = secular_frequencies(trap)
    W = trap.rf_frequency
    q, udc, u, phi = trap.q, trap.u_dc, state.u, state.phi
    c = np.cos(w * t + phi)
    s = np.sin(w * t + phi)
    disp = udc + u * c
    x = disp * (1 + q / 2 * np.cos(W * t))
    v = -u * w * s - disp * W * q / 2 * np.sin(W * t)
    return x, v


def emm_amplitude(trap: TrapConfig) -> float:
    """|u_EMM| = sqrt(sum (u_dc q/2)^2 + sum u_perp^2)."""
    return float(np.sqrt(np.sum((trap.u_dc * trap.q / 2) ** 2) + np.sum(trap.u_quadrature**2)))


def emm_energy_from_amplitude(amplitude: float, ion_mass: float, rf_frequency: float) -> float:
    return ion_mass * (amplitude * rf_frequency) ** 2 / 4


def emm_amplitude_from_energy(energy: float, ion_mass: float, rf_frequency: float) -> float:
    return np.sqrt(4 * energy / ion_mass) / rf_frequency


def emm_energy(trap: TrapConfig, ion_mass: float) -> tuple[float, float]:
    """Mean EMM kinetic energy ``m (|u_EMM| W)^2 / 4``.

    Returns ``(joules, kelvin)``.
    """
    e = emm_energy_from_amplitude(emm_amplitude(trap), ion_mass, trap.rf_frequency)
    return e, e / KB


def cetina_energy_scale(pair: SpeciesPair, omega: float, q: float) -> float:
    """Energy scale ``W0 = 2 (mu^5 w^4 C4 / (m_i^3 q^2))^(1/3)`` in joules.

    The ion is pushed off the rf null by the polarization force during a
    collision; W0 is the resulting characteristic energy gain.  ``omega``
    and ``q`` are scalars: the caller picks the mode (see
    :func:`default_cetina_mode`).
    """
    if q == 0:
        raise ValueError("q must be non-zero")
    if omega <= 0:
        raise ValueError("omega must be positive")
    if pair.c4 <= 0:
        raise ValueError("C4 must be positive")
    mu = pair.reduced_mass
    return 2 * (mu**5 * omega**4 * pair.c4 / (pair.ion_mass**3 * q**2)) ** (1 / 3)


def cetina_temperature(pair: SpeciesPair, omega: float, q: float) -> float:
    return cetina_energy_scale(pair, omega, q) / KB


def default_cetina_mode(trap: TrapConfig) -> tuple[float, float]:
    """(omega, |q|) for W0: geometric mean of the rf-confined modes.

    Which mode enters W0 is a modelling choice; for a linear trap the two
    radial modes share |q| and differ in frequency, so their geometric
    mean frequency is used.
    """
    w = secular_frequencies(trap)
    rf_axes = np.abs(trap.q) > 0
    if not np.any(rf_axes):
        raise ValueError("trap has no rf-confined axis")
    omega = float(np.exp(np.mean(np.log(w[rf_axes]))))
    q = float(np.sqrt(np.mean(trap.q[rf_axes] ** 2)))
    return omega, q
