"""Carrier Rabi flopping of a thermal or power-law ion and its inverse fit.

A motional distribution is reduced to a weighted set of carrier couplings
``f_k = prod_j exp(-eta_j^2/2) L_{n_j}(eta_j^2)`` so that
``P(t) = sum_k w_k sin^2(Omega0 f_k t / 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import optimize, special, stats

from .constants import HBAR, KB
from .stats import TsallisParams, tsallis_cdf, tsallis_pdf

LAGUERRE_TABLE_MAX = 20000
TAIL_MASS = 1e-4
MC_SAMPLES = 2**17
GRID_ERROR = 1e-6
MAX_PRODUCT_STATES = 2_000_000


@dataclass(frozen=True)
class ModeSpec:
    frequency: float  # rad/s
    lamb_dicke: float

    def __post_init__(self):
        if not self.frequency > 0:
            raise ValueError("mode frequency must be positive")
        if not 0 <= self.lamb_dicke < 1:
            raise ValueError("Lamb-Dicke parameter must lie in [0, 1)")


@dataclass
class RabiCurve:
    times: np.ndarray
    excitation_probability: np.ndarray
    shots_per_point: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.excitation_probability = np.asarray(self.excitation_probability, dtype=float)
        if self.times.shape != self.excitation_probability.shape:
            raise ValueError("times and probabilities differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        p = self.excitation_probability
        if np.any((p < 0) | (p > 1)):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.shots_per_point < 1:
            raise ValueError("shots_per_point must be positive")


def modes_from_probe(omega, k_vector, ion_mass: float) -> tuple[ModeSpec, ...]:
    """Modes with eta_j = |k_j| sqrt(hbar / 2 m w_j) for a probe wave vector."""
    omega = np.asarray(omega, dtype=float)
    k = np.abs(np.asarray(k_vector, dtype=float))
    eta = k * np.sqrt(HBAR / (2 * ion_mass * omega))
    return tuple(ModeSpec(float(w), float(e)) for w, e in zip(omega, eta))


@numba.njit(cache=True)
def _laguerre_factor_table(x, n_max):
    out = np.empty(n_max + 1)
    prev = 1.0
    out[0] = 1.0
    if n_max >= 1:
        cur = 1.0 - x
        out[1] = cur
        for k in range(1, n_max):
            nxt = ((2 * k + 1 - x) * cur - k * prev) / (k + 1)
            prev = cur
            cur = nxt
            out[k + 1] = cur
    return out * np.exp(-x / 2)


def laguerre_factor(n, eta: float) -> np.ndarray:
    """exp(-eta^2/2) L_n(eta^2) for integer array ``n``.

    Recurrence up to LAGUERRE_TABLE_MAX, J0(2 sqrt((n + 1/2) eta^2)) above
    (absolute error below 1e-7 there for eta < 0.3).
    """
    n = np.asarray(n, dtype=np.int64)
    if np.any(n < 0):
        raise ValueError("occupation numbers must be non-negative")
    x = eta * eta
    if x == 0:
        return np.ones(n.shape)
    top = int(min(n.max(initial=0), LAGUERRE_TABLE_MAX))
    table = _laguerre_factor_table(x, top)
    out = np.empty(n.shape)
    low = n <= LAGUERRE_TABLE_MAX
    out[low] = table[n[low]]
    out[~low] = special.j0(2 * np.sqrt((n[~low] + 0.5) * x))
    return out


def carrier_coupling(n, modes, omega0: float) -> float:
    """Carrier Rabi frequency Omega0 prod_j exp(-eta_j^2/2) L_{n_j}(eta_j^2)."""
    n = np.asarray(n)
    if n.shape != (len(modes),) or np.any(n < 0) or np.any(n != np.floor(n)):
        raise ValueError("n must hold one non-negative integer per mode")
    f = 1.0
    for nj, m in zip(n.astype(np.int64), modes):
        f *= laguerre_factor(np.array([nj]), m.lamb_dicke)[0]
    return float(omega0 * f)


# -- motional distributions as coupling spectra ------------------------------

@dataclass
class CouplingSpectrum:
    """Weighted carrier couplings (relative to Omega0)."""

    coupling: np.ndarray
    weight: np.ndarray
    tail_mass: float = 0.0
    metadata: dict = field(default_factory=dict)


def _mean_occupation(temperature: float, omega: float) -> float:
    if temperature == 0:
        return 0.0
    return 1.0 / np.expm1(HBAR * omega / (KB * temperature))


def thermal_truncation(temperature: float, modes, tail_mass: float = TAIL_MASS) -> tuple[list[int], float]:
    """Per-mode cutoffs starting at max(30, 10 nbar), doubled until the product tail mass is small."""
    nbar = [_mean_occupation(temperature, m.frequency) for m in modes]
    cut = [int(max(30, np.ceil(10 * nb))) for nb in nbar]
    for _ in range(40):
        kept = np.prod([1 - (nb / (nb + 1)) ** (c + 1) if nb > 0 else 1.0 for nb, c in zip(nbar, cut)])
        tail = 1 - kept
        if tail < tail_mass:
            return cut, float(tail)
        cut = [2 * c for c in cut]
    raise ValueError(f"thermal truncation did not converge, tail mass {tail:.3g}")


def thermal_spectrum(temperature: float, modes, truncation=None, tail_mass: float = TAIL_MASS) -> CouplingSpectrum:
    """Exact product of geometric Fock distributions, renormalized after truncation."""
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    if truncation is None:
        truncation, tail = thermal_truncation(temperature, modes, tail_mass)
        coupled = [c + 1 for c, m in zip(truncation, modes) if m.lamb_dicke > 0]
        if np.prod(coupled, dtype=float) > MAX_PRODUCT_STATES:
            return sampled_thermal_spectrum(temperature, modes)
    else:
        truncation = [int(truncation)] * len(modes) if np.isscalar(truncation) else list(truncation)
        tail = None
    f = np.ones(1)
    w = np.ones(1)
    kept = 1.0
    for m, cut in zip(modes, truncation):
        nb = _mean_occupation(temperature, m.frequency)
        if m.lamb_dicke == 0 or nb == 0:
            # the mode does not change the coupling (or sits in its ground state)
            if nb > 0:
                continue
            f = f * np.exp(-m.lamb_dicke**2 / 2)
            continue
        n = np.arange(cut + 1)
        r = nb / (nb + 1)
        p = (1 - r) * r**n
        kept *= p.sum()
        f = np.multiply.outer(f, laguerre_factor(n, m.lamb_dicke)).ravel()
        w = np.multiply.outer(w, p).ravel()
    if tail is None:
        tail = 1 - kept
    return CouplingSpectrum(f, w / w.sum(), float(tail), {"model": "thermal", "truncation": truncation})


def sampled_thermal_spectrum(temperature: float, modes, n_samples: int = MC_SAMPLES, seed: int = 0,
                             uniforms: np.ndarray | None = None) -> CouplingSpectrum:
    """Geometric Fock occupations drawn by inversion, for product grids too large to enumerate."""
    if uniforms is None:
        uniforms = quasi_random_uniforms(n_samples, len(modes), seed)
    f = np.ones(len(uniforms))
    for j, m in enumerate(modes):
        nb = _mean_occupation(temperature, m.frequency)
        if nb == 0:
            f *= np.exp(-m.lamb_dicke**2 / 2)
            continue
        n = np.floor(np.log(uniforms[:, j]) / np.log(nb / (nb + 1))).astype(np.int64)
        f *= laguerre_factor(n, m.lamb_dicke)
    return CouplingSpectrum(f, np.full(len(f), 1 / len(f)), 0.0,
                            {"model": "thermal", "temperature": temperature, "samples": len(f)})


def _energy_samples_from_total(total, split_uniforms, modes):
    """Split total energies uniformly over the 3-mode simplex and quantize per mode."""
    # -log of uniforms gives Dirichlet(1, ..., 1) after normalization
    g = -np.log(split_uniforms)
    frac = g / g.sum(axis=1, keepdims=True)
    couplings = np.ones(len(total))
    for j, m in enumerate(modes):
        n = np.floor(total * frac[:, j] / (HBAR * m.frequency)).astype(np.int64)
        couplings *= laguerre_factor(n, m.lamb_dicke)
    return couplings


def quasi_random_uniforms(n_samples: int, dims: int, seed: int) -> np.ndarray:
    sampler = stats.qmc.Sobol(d=dims, scramble=True, seed=seed)
    u = sampler.random(n_samples)
    return np.clip(u, 1e-15, 1 - 1e-15)


@dataclass
class EnergySamples:
    """Fixed total-energy samples with their per-sample carrier couplings.

    Totals are log-uniform on [e_lo, e_hi] (quasi-random), split uniformly
    over the mode simplex and quantized to n_j = floor(E_j / hbar w_j).  Any
    total-energy density is then represented by importance weights alone,
    so a fit only re-weights a fixed set of couplings.  Below e_lo = hbar
    min(w) every mode is in its ground state, which is exact; mass above
    e_hi is dropped and the rest renormalized, as for a truncated thermal
    distribution (it is reported as the tail mass).
    """

    energy: np.ndarray
    coupling: np.ndarray
    e_lo: float
    e_hi: float
    ground_coupling: float


def energy_samples(modes, n_samples: int = MC_SAMPLES, seed: int = 0, decades: float = 8.0) -> EnergySamples:
    w = np.array([m.frequency for m in modes])
    e_lo = HBAR * w.min()
    e_hi = HBAR * w.max() * 10**decades
    u = quasi_random_uniforms(n_samples, 1 + len(modes), seed)
    energy = e_lo * (e_hi / e_lo) ** u[:, 0]
    f = _energy_samples_from_total(energy, u[:, 1:], modes)
    ground = float(np.exp(-sum(m.lamb_dicke**2 for m in modes) / 2))
    return EnergySamples(energy, f, e_lo, e_hi, ground)


def spectrum_from_density(samples: EnergySamples, pdf, cdf, metadata=None) -> CouplingSpectrum:
    """Self-normalized importance weights pdf(E) E for the log-uniform samples."""
    w = pdf(samples.energy) * samples.energy
    below = float(cdf(samples.e_lo))
    above = float(1 - cdf(samples.e_hi))
    total = w.sum()
    if not total > 0:
        raise ValueError("energy density has no mass inside the sampled range")
    w = w * ((1 - below - above) / total)
    f = np.concatenate([samples.coupling, [samples.ground_coupling]])
    w = np.concatenate([w, [below]]) / (1 - above)
    return CouplingSpectrum(f, w, above, dict(metadata or {}, samples=len(samples.energy),
                            construction="total energy uniform on the mode simplex, "
                                         "Fock level floor(E_j/hbar w_j), importance-weighted"))


def tsallis_spectrum(params: TsallisParams, modes, samples: EnergySamples | None = None,
                     seed: int = 0) -> CouplingSpectrum:
    """Tsallis total-energy density mapped onto Fock levels (see EnergySamples)."""

    samples = samples or energy_samples(modes, seed=seed)
    return spectrum_from_density(samples, lambda e: tsallis_pdf(e, params), lambda e: tsallis_cdf(e, params),
                                 {"model": "tsallis", "n": params.n, "a": params.a})


def maxwell_boltzmann_spectrum(temperature: float, modes, samples: EnergySamples | None = None,
                               seed: int = 0) -> CouplingSpectrum:
    """Classical Boltzmann total energy, Gamma(3, k_B T), mapped like the Tsallis case."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    samples = samples or energy_samples(modes, seed=seed)
    kt = KB * temperature
    return spectrum_from_density(samples, lambda e: stats.gamma.pdf(e, 3, scale=kt),
                                 lambda e: stats.gamma.cdf(e, 3, scale=kt),
                                 {"model": "maxwell_boltzmann", "temperature": temperature})


# -- signal evaluation --------------------------------------------------------

@numba.njit(cache=True)
def _direct_sum(theta, f, w):
    out = np.empty(theta.size)
    for i in range(theta.size):
        s = 0.0
        for k in range(f.size):
            s += w[k] * np.cos(theta[i] * f[k])
        out[i] = 0.5 - 0.5 * s
    return out


@numba.njit(cache=True)
def _grid_sum(theta, f0, df, grid_w):
    # sum_j w_j cos(theta (f0 + j df)) by phasor rotation
    out = np.empty(theta.size)
    for i in range(theta.size):
        zr = np.cos(theta[i] * f0)
        zi = np.sin(theta[i] * f0)
        rr = np.cos(theta[i] * df)
        ri = np.sin(theta[i] * df)
        s = 0.0
        for j in range(grid_w.size):
            s += grid_w[j] * zr
            zr, zi = zr * rr - zi * ri, zr * ri + zi * rr
        out[i] = 0.5 - 0.5 * s
    return out


def _deposit(spec: CouplingSpectrum, theta_max: float, max_error: float):
    """Linear-weight deposit of the spectrum on a uniform coupling grid.

    Replacing cos(theta f) by its chord between grid nodes errs by at
    most (theta df)^2 / 8, which fixes df.
    """
    df = np.sqrt(8 * max_error) / max(theta_max, 1e-300)
    lo, hi = spec.coupling.min(), spec.coupling.max()
    size = int(min(np.floor((hi - lo) / df), 2**62)) + 2
    if size > spec.coupling.size:
        return lo, df, None
    pos = (spec.coupling - lo) / df
    i0 = np.minimum(np.floor(pos).astype(np.int64), size - 2)
    s = pos - i0
    grid = np.bincount(i0, spec.weight * (1 - s), minlength=size)
    grid += np.bincount(i0 + 1, spec.weight * s, minlength=size)
    return lo, df, grid


def excitation_probability(times, omega0: float, spec: CouplingSpectrum, method: str = "auto",
                           max_error: float = GRID_ERROR) -> np.ndarray:
    """P(t) = sum_k w_k sin^2(Omega0 f_k t / 2)."""
    theta = omega0 * np.asarray(times, dtype=float)
    if method == "direct" or (method == "auto" and spec.coupling.size * theta.size < 2_000_000):
        return _direct_sum(theta, spec.coupling, spec.weight)
    lo, df, grid = _deposit(spec, float(np.abs(theta).max(initial=0.0)), max_error)
    if grid is None:
        return _direct_sum(theta, spec.coupling, spec.weight)
    return _grid_sum(theta, lo, df, grid)


def build_spectrum(distribution: dict, modes, seed: int = 0, truncation=None) -> CouplingSpectrum:
    kind = distribution.get("kind")
    if kind == "thermal":
        return thermal_spectrum(distribution["temperature"], modes, truncation)
    if kind == "tsallis":
        return tsallis_spectrum(TsallisParams(distribution["n"], distribution["a"]), modes, seed=seed)
    if kind == "maxwell_boltzmann":
        return maxwell_boltzmann_spectrum(distribution["temperature"], modes, seed=seed)
    raise ValueError(f"unknown energy distribution {kind!r}")


def rabi_signal(times, modes, omega0: float, distribution: dict, shots_per_point: int = 1,
                seed: int = 0, truncation=None) -> RabiCurve:
    """Noise-free carrier Rabi curve for a thermal or Tsallis ion.

    ``distribution`` is ``{"kind": "thermal", "temperature": K}``,
    ``{"kind": "tsallis", "n": ..., "a": J}`` or
    ``{"kind": "maxwell_boltzmann", "temperature": K}``.
    """
    spec = build_spectrum(distribution, modes, seed, truncation)
    if spec.tail_mass >= TAIL_MASS:
        raise ValueError(f"truncation leaves tail mass {spec.tail_mass:.3g} >= {TAIL_MASS}")
    p = np.clip(excitation_probability(times, omega0, spec, method="direct"), 0.0, 1.0)
    meta = dict(spec.metadata, tail_mass=spec.tail_mass, omega0=omega0)
    return RabiCurve(times, p, shots_per_point, meta)


def sample_shots(curve: RabiCurve, shots: int, rng: np.random.Generator) -> RabiCurve:
    """Binomial shot noise at ``shots`` repetitions per time point."""
    k = rng.binomial(shots, curve.excitation_probability)
    return RabiCurve(curve.times, k / shots, shots, dict(curve.metadata, noisy=True))


# -- fitting -----------------------------------------------------------------

@dataclass
class RabiFit:
    model: str
    params: dict
    errors: dict
    chi2: float
    dof: int
    nll: float
    converged: bool
    trace: list = field(default_factory=list)

    @property
    def chi2_dof(self) -> float:
        return self.chi2 / self.dof if self.dof > 0 else np.nan


class RabiFitError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


def _binomial_nll(k, shots, p):
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return -float(np.sum(k * np.log(p) + (shots - k) * np.log1p(-p)))


def pearson_chi2(curve: RabiCurve, model_p) -> float:
    shots = curve.shots_per_point
    p = np.clip(model_p, 1e-6, 1 - 1e-6)
    return float(np.sum(shots * (curve.excitation_probability - p) ** 2 / (p * (1 - p))))


def _guess_omega0(curve: RabiCurve) -> float:
    """Best undamped sinusoid sin^2(W t / 2) on a log grid up to the sampling Nyquist limit."""
    t = curve.times
    p = curve.excitation_probability
    dt = np.min(np.diff(t))
    grid = np.geomspace(np.pi / (4 * t[-1]), np.pi / dt, 2000)
    resid = ((p[None, :] - np.sin(np.outer(grid, t) / 2) ** 2) ** 2).sum(axis=1)
    return float(grid[np.argmin(resid)])


def fit_rabi_curve(curve: RabiCurve, modes, model: str, initial: dict | None = None,
                   n_starts: int = 5, seed: int = 0, n_samples: int = MC_SAMPLES) -> RabiFit:
    """Binomial maximum-likelihood fit of a carrier Rabi curve.

    ``model`` is "thermal" (Omega0, T), "maxwell_boltzmann" (Omega0, T) or
    "tsallis" (Omega0, n, a).  Nelder-Mead from several starts in
    log-parameters; errors from the numerical Hessian of the likelihood.
    """
    if curve.times.size < 10:
        raise ValueError("need at least 10 time points")
    shots = curve.shots_per_point
    k = np.round(curve.excitation_probability * shots)
    times = curve.times
    samples = None
    if model in ("tsallis", "maxwell_boltzmann"):
        samples = energy_samples(modes, n_samples, seed)
    initial = dict(initial or {})
    omega_guess = initial.get("omega0", _guess_omega0(curve))
    theta_max = 1.5 * omega_guess * times[-1]
    trace = []

    def unpack(x):
        if model == "tsallis":
            return {"omega0": np.exp(x[0]), "n": 3 + np.exp(x[1]), "a": np.exp(x[2])}
        return {"omega0": np.exp(x[0]), "temperature": np.exp(x[1])}

    def spectrum(par):
        if model == "thermal":
            return thermal_spectrum(par["temperature"], modes)
        if model == "maxwell_boltzmann":
            return maxwell_boltzmann_spectrum(par["temperature"], modes, samples)
        return tsallis_spectrum(TsallisParams(par["n"], par["a"]), modes, samples)

    def model_p(par):
        spec = spectrum(par)
        theta_top = max(theta_max, par["omega0"] * times[-1])
        lo, df, grid = _deposit(spec, theta_top, GRID_ERROR)
        if grid is None:
            return _direct_sum(par["omega0"] * times, spec.coupling, spec.weight)
        return _grid_sum(par["omega0"] * times, lo, df, grid)

    def nll(x):
        if not np.all(np.isfinite(x)) or np.any(np.abs(x) > 200):
            return np.inf
        par = unpack(x)
        try:
            val = _binomial_nll(k, shots, model_p(par))
        except (ValueError, FloatingPointError, MemoryError):
            val = np.inf
        trace.append((dict(par), val))
        return val

    # starting points: spread the energy scale over a decade each way
    rng = np.random.default_rng(seed)
    w_ref = float(np.exp(np.mean(np.log([m.frequency for m in modes]))))
    t_guess = initial.get("temperature", 20 * HBAR * w_ref / KB)
    a_guess = initial.get("a", KB * t_guess)
    n_guess = initial.get("n", 5.0)
    starts = []
    for i in range(n_starts):
        spread = 0.0 if i == 0 else rng.uniform(-1.0, 1.0)
        om = np.log(omega_guess) + (0.0 if i == 0 else rng.normal(0, 0.05))
        if model == "tsallis":
            starts.append([om, np.log(n_guess - 3) + (0 if i == 0 else rng.uniform(-1, 1)),
                           np.log(a_guess) + spread])
        else:
            starts.append([om, np.log(t_guess) + spread])

    best = None
    for x0 in starts:
        res = optimize.minimize(nll, np.array(x0), method="Nelder-Mead",
                                options={"xatol": 1e-7, "fatol": 1e-9, "maxiter": 3000, "maxfev": 6000})
        if best is None or res.fun < best.fun:
            best = res
    if best is None or not np.isfinite(best.fun):
        raise RabiFitError("Rabi fit failed: no finite likelihood found", trace[-100:])
    par = unpack(best.x)
    errors = _hessian_errors(nll, best.x, model)
    p_fit = model_p(par)
    n_par = len(best.x)
    chi2 = pearson_chi2(curve, p_fit)
    return RabiFit(model, {key: float(v) for key, v in par.items()}, errors, chi2,
                   times.size - n_par, float(best.fun), bool(best.success), trace[-50:])


def _hessian_errors(f, x, model: str, h: float = 1e-3) -> dict:
    d = len(x)
    H = np.empty((d, d))
    f0 = f(x)
    for i in range(d):
        for j in range(i, d):
            ei = np.eye(d)[i] * h
            ej = np.eye(d)[j] * h
            if i == j:
                H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / h**2
            else:
                H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * h * h)
    try:
        cov = np.linalg.inv(H)
        sd = np.sqrt(np.clip(np.diag(cov), 0, None))
    except np.linalg.LinAlgError:
        sd = np.full(d, np.nan)
    # convert from log-parameters
    if model == "tsallis":
        return {"omega0": float(np.exp(x[0]) * sd[0]), "n": float(np.exp(x[1]) * sd[1]),
                "a": float(np.exp(x[2]) * sd[2])}
    return {"omega0": float(np.exp(x[0]) * sd[0]), "temperature": float(np.exp(x[1]) * sd[1])}
