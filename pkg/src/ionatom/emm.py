"""Excess-micromotion sideband spectroscopy: modulation index, systematics, budgets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from .constants import E_CHARGE, HBAR, KB
from .trap import (
    TrapConfig,
    emm_amplitude_from_energy,
    emm_energy_from_amplitude,
    secular_frequencies,
)

# First zero of J0 is 2.4048; stay well inside the monotone branch of J1/J0.
MAX_BETA = 1.8

# Lande g-factors for Sr+ (S1/2 free-electron value, D5/2 LS-coupling value 6/5).
G_S12 = 2.00231930436
G_D52 = 1.2


@dataclass(frozen=True)
class LaserProbe:
    """Spectroscopy beam.  Only the wave vector enters any calculation."""

    wavelength: float
    direction: tuple = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if not self.wavelength > 0:
            raise ValueError("wavelength must be positive")
        d = np.asarray(self.direction, dtype=float).reshape(3)
        norm = np.linalg.norm(d)
        if norm == 0:
            raise ValueError("direction must be non-zero")
        # accept any non-zero vector but store it normalized
        object.__setattr__(self, "direction", tuple((d / norm).tolist()))

    @property
    def k_magnitude(self) -> float:
        return 2 * np.pi / self.wavelength

    @property
    def k_vector(self) -> np.ndarray:
        return self.k_magnitude * np.asarray(self.direction)


@dataclass(frozen=True)
class EmmVector:
    in_phase: tuple = (0.0, 0.0, 0.0)
    quadrature: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("in_phase", "quadrature"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, tuple(v.tolist()))

    @property
    def amplitude(self) -> float:
        return float(np.sqrt(np.sum(np.square(self.in_phase)) + np.sum(np.square(self.quadrature))))

    @classmethod
    def from_trap(cls, trap: TrapConfig) -> "EmmVector":
        return cls(trap.u_dc * trap.q / 2, trap.u_quadrature)


@dataclass(frozen=True)
class ZeemanTransition:
    """S1/2(m_s) -> D5/2(m_d) line; susceptibility is g_D m_d - g_S m_s."""

    m_s: float
    m_d: float
    g_s: float = G_S12
    g_d: float = G_D52

    def __post_init__(self):
        if abs(self.m_s) != 0.5:
            raise ValueError("m_s must be +-1/2")
        if abs(self.m_d) > 2.5 or (2 * self.m_d) % 2 != 1:
            raise ValueError("m_d must be a half-integer with |m_d| <= 5/2")

    @property
    def susceptibility(self) -> float:
        return self.g_d * self.m_d - self.g_s * self.m_s


def modulation_index(probe: LaserProbe, emm: EmmVector) -> tuple[float, float]:
    """(beta, delta) of the rest-frame phase modulation seen by the probe."""
    k = probe.k_vector
    par = float(k @ np.asarray(emm.in_phase))
    perp = float(k @ np.asarray(emm.quadrature))
    return float(np.hypot(par, perp)), float(np.arctan2(perp, par) - np.pi / 2)


def coupling_ratio_from_beta(beta: float) -> float:
    """Sideband-to-carrier coupling J1(beta)/J0(beta)."""
    if not 0 <= beta < MAX_BETA:
        raise ValueError(f"beta must lie in [0, {MAX_BETA})")
    return float(special.j1(beta) / special.j0(beta))


def coupling_ratio_small_beta(beta: float) -> float:
    return beta / 2


def beta_from_coupling_ratio(ratio: float) -> float:
    """Invert J1/J0 on [0, MAX_BETA) by bracketed root finding."""
    r_max = coupling_ratio_from_beta(np.nextafter(MAX_BETA, 0))
    if not 0 <= ratio < r_max:
        raise ValueError(f"coupling ratio must lie in [0, {r_max:.4g})")
    if ratio == 0:
        return 0.0
    return float(optimize.brentq(lambda b: special.j1(b) / special.j0(b) - ratio,
                                 0.0, MAX_BETA, xtol=1e-15, rtol=1e-14))


def amplitude_from_beta(beta: float, probe: LaserProbe) -> float:
    """EMM amplitude along the probe's k-vector."""
    return beta / probe.k_magnitude


def rf_field_from_amplitude(u_emm: float, ion_mass: float, rf_frequency: float) -> float:
    """Driven-oscillator rf field amplitude m W^2 |u| / e in V/m."""
    if u_emm < 0:
        raise ValueError("amplitude must be non-negative")
    return ion_mass * rf_frequency**2 * u_emm / E_CHARGE


@dataclass
class LinearFit:
    intercept: float
    slope: float
    intercept_err: float
    slope_err: float
    covariance: np.ndarray
    chi2: float
    dof: int


def weighted_linear_fit(x, y, sigma=None) -> LinearFit:
    """Least-squares line y = intercept + slope x.

    With ``sigma`` the covariance is the unscaled (sigma-propagated) one;
    without it, unit weights are used and the covariance is scaled by the
    residual variance when there are spare degrees of freedom.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d and of equal length")
    if len(x) < 2 or np.ptp(x) == 0:
        raise ValueError("need at least two distinct x values")
    w = np.ones_like(x) if sigma is None else 1 / np.asarray(sigma, dtype=float) ** 2
    A = np.column_stack([np.ones_like(x), x])
    F = A.T @ (A * w[:, None])
    cov = np.linalg.inv(F)
    coef = cov @ (A.T @ (w * y))
    resid = y - A @ coef
    chi2 = float(np.sum(w * resid**2))
    dof = len(x) - 2
    if sigma is None and dof > 0:
        cov = cov * chi2 / dof
    return LinearFit(float(coef[0]), float(coef[1]), float(np.sqrt(cov[0, 0])),
                     float(np.sqrt(cov[1, 1])), cov, chi2, dof)


@dataclass
class ZeemanExtrapolation:
    compensation_voltage: float
    compensation_err: float
    slope: float  # V per unit susceptibility
    slope_err: float
    amplitude_per_susceptibility: float | None  # m, needs a response calibration


def rf_zeeman_extrapolate(measurements, sigma=None, response_m_per_v: float | None = None) -> ZeemanExtrapolation:
    """Compensation voltage extrapolated to zero Zeeman susceptibility.

    ``measurements`` is a sequence of (susceptibility, voltage) pairs.
    """
    pts = np.asarray(measurements, dtype=float).reshape(-1, 2)
    if len(np.unique(pts[:, 0])) < 2:
        raise ValueError("need at least two distinct susceptibilities")
    fit = weighted_linear_fit(pts[:, 0], pts[:, 1], sigma)
    per_chi = None if response_m_per_v is None else abs(fit.slope) * response_m_per_v
    return ZeemanExtrapolation(fit.intercept, fit.intercept_err, fit.slope, fit.slope_err, per_chi)


@dataclass
class ResponseSlope:
    slope: float  # m/V
    slope_err: float
    offset: float  # m, amplitude floor at the compensated point
    offset_err: float


def emm_response_slope(measurements, sigma=None, with_offset: bool = True) -> ResponseSlope:
    """Fit |u_EMM| = offset + slope |dV| to (delta_voltage, amplitude) pairs."""
    pts = np.asarray(measurements, dtype=float).reshape(-1, 2)
    x = np.abs(pts[:, 0])
    y = pts[:, 1]
    if with_offset:
        fit = weighted_linear_fit(x, y, sigma)
        return ResponseSlope(fit.slope, fit.slope_err, fit.intercept, fit.intercept_err)
    if len(x) < 1 or not np.any(x > 0):
        raise ValueError("need a non-zero voltage offset")
    w = np.ones_like(x) if sigma is None else 1 / np.asarray(sigma, dtype=float) ** 2
    sxx = np.sum(w * x * x)
    slope = float(np.sum(w * x * y) / sxx)
    err = 1 / np.sqrt(sxx)
    if sigma is None and len(x) > 1:
        err *= np.sqrt(np.sum((y - slope * x) ** 2) / (len(x) - 1))
    return ResponseSlope(slope, float(err), 0.0, 0.0)


def lamb_dicke(k_projected: float, ion_mass: float, omega: float) -> float:
    return k_projected * np.sqrt(HBAR / (2 * ion_mass * omega))


def temperature_systematic_beta(trap: TrapConfig, probe: LaserProbe, ion_temperature: float,
                                mode_index: int, ion_mass: float) -> float:
    """Apparent modulation index q eta^2 k_B T / (hbar w) from thermal motion.

    Only rf-confined modes contribute; for a mode with q = 0 this is 0.
    """
    if ion_temperature < 0:
        raise ValueError("temperature must be non-negative")
    q = abs(trap.q[mode_index])
    if q == 0:
        return 0.0
    w = secular_frequencies(trap)[mode_index]
    eta = lamb_dicke(abs(probe.k_vector[mode_index]), ion_mass, w)
    return float(q * eta**2 * KB * ion_temperature / (HBAR * w))


def temperature_systematic_beta_bessel(trap: TrapConfig, probe: LaserProbe, ion_temperature: float,
                                       mode_index: int, ion_mass: float) -> float:
    """Same quantity from the full Bessel coupling ratio, with u from k_B T = m (u w)^2 / 2."""
    q = abs(trap.q[mode_index])
    if q == 0 or ion_temperature == 0:
        return 0.0
    w = secular_frequencies(trap)[mode_index]
    u = np.sqrt(2 * KB * ion_temperature / ion_mass) / w
    ku = abs(probe.k_vector[mode_index]) * u
    ratio = 2 * special.j1(ku) / special.j0(ku) * special.j1(ku * q / 4) / special.j0(ku * q / 4)
    return float(2 * ratio)


@dataclass
class BudgetEntry:
    label: str
    amplitude: float  # m
    temperature: float  # K


@dataclass
class EmmBudget:
    entries: list
    total_amplitude: float
    total_temperature: float
    metadata: dict = field(default_factory=dict)

    def rows(self):
        yield from ((e.label, e.amplitude, e.temperature) for e in self.entries)
        yield ("Total", self.total_amplitude, self.total_temperature)


def build_emm_budget(entries, ion_mass: float, rf_frequency: float) -> EmmBudget:
    """Complete each (amplitude, temperature) pair and sum energies linearly.

    ``entries`` are (label, amplitude_m or None, temperature_K or None).
    When both are given the temperature is what enters the sum.
    """
    done = []
    for label, amp, temp in entries:
        if amp is None and temp is None:
            raise ValueError(f"budget entry {label!r} has neither amplitude nor temperature")
        if temp is None:
            temp = emm_energy_from_amplitude(amp, ion_mass, rf_frequency) / KB
        if amp is None:
            amp = emm_amplitude_from_energy(temp * KB, ion_mass, rf_frequency)
        done.append(BudgetEntry(str(label), float(amp), float(temp)))
    if not done:
        raise ValueError("empty budget")
    total_t = sum(e.temperature for e in done)
    total_u = float(emm_amplitude_from_energy(total_t * KB, ion_mass, rf_frequency))
    return EmmBudget(done, total_u, total_t, {"summation": "linear in energy"})
