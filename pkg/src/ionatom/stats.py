"""Energy histograms, the Tsallis energy distribution and power-law fits.

The Tsallis density used throughout, in terms of x = E/a::

    P(E) dE = (n-3)(n-2)(n-1) / (2 n^3) * x^2 / (1 + x/n)^n * dE/a

It is quadratic at low energy (three-mode density of states) and falls as
E^(2-n) at high energy.  With y = (x/n) / (1 + x/n), y ~ Beta(3, n-3), which
gives the CDF and an exact sampler.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import optimize, special

CONVENTIONS = ("n", "nu", "kappa", "alpha")
MIN_CHI2_COUNT = 5


@dataclass(frozen=True)
class TsallisParams:
    n: float
    a: float

    def __post_init__(self):
        if not self.n > 3:
            raise ValueError(f"n must exceed 3 for a normalizable density, got {self.n}")
        if not self.a > 0:
            raise ValueError(f"a must be positive, got {self.a}")


@dataclass
class EnergyHistogram:
    bin_edges: np.ndarray
    density: np.ndarray
    counts: np.ndarray
    total_n: int
    e_scale: float = 1.0
    n_below: int = 0
    n_above: int = 0
    n_flagged: int = 0

    @property
    def centers(self) -> np.ndarray:
        return np.sqrt(self.bin_edges[1:] * self.bin_edges[:-1])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.bin_edges)

    @property
    def density_error(self) -> np.ndarray:
        return np.sqrt(self.counts) / (self.widths * self.total_n)

    @property
    def retained_fraction(self) -> float:
        return float(self.counts.sum() / self.total_n)


@numba.njit(cache=True)
def _bin_log(energies, flagged, edges):
    # direct log-index binning, then a one-step correction against the exact edges
    n_bins = edges.size - 1
    lo = edges[0]
    inv = n_bins / np.log(edges[-1] / lo)
    counts = np.zeros(n_bins, dtype=np.int64)
    below = 0
    above = 0
    for i in range(energies.size):
        if flagged[i]:
            continue
        e = energies[i]
        if not e >= lo:
            below += 1
            continue
        if not e < edges[-1]:
            above += 1
            continue
        k = min(int(np.log(e / lo) * inv), n_bins - 1)
        if e < edges[k]:
            k -= 1
        elif e >= edges[k + 1]:
            k += 1
        counts[k] += 1
    return counts, below, above


def build_histogram(records, n_bins: int, range_, e_scale: float = 1.0) -> EnergyHistogram:
    """Log-binned probability density of recorded energies.

    ``records`` is an :class:`~ionatom.hardsphere.EnergyRecords` (flagged
    realizations count towards ``total_n`` but never into bins) or a plain
    array of energies.  ``range_`` is in joules.
    """
    if hasattr(records, "total_energy"):
        energies = np.asarray(records.total_energy)
        flagged = np.asarray(records.flagged, dtype=bool)
    else:
        energies = np.asarray(records, dtype=float)
        flagged = np.zeros(energies.shape, dtype=bool)
    if energies.size == 0:
        raise ValueError("empty record set")
    lo, hi = float(range_[0]), float(range_[1])
    if n_bins < 2 or not (0 < lo < hi):
        raise ValueError("need n_bins >= 2 and 0 < lo < hi")
    edges = np.geomspace(lo, hi, n_bins + 1)
    counts, below, above = _bin_log(np.ascontiguousarray(energies, dtype=float), np.ascontiguousarray(flagged), edges)
    total = energies.size
    density = counts / (np.diff(edges) * total)
    return EnergyHistogram(edges, density, counts, total, e_scale, below, above, int(flagged.sum()))


def _norm(n):
    return (n - 3) * (n - 2) * (n - 1) / (2 * n**3)


def tsallis_pdf(e, p: TsallisParams):
    """Probability density per joule at energy ``e``."""
    e = np.asarray(e, dtype=float)
    if np.any(e < 0):
        raise ValueError("energies must be non-negative")
    x = e / p.a
    return _norm(p.n) * x**2 * np.exp(-p.n * np.log1p(x / p.n)) / p.a


def tsallis_cdf(e, p: TsallisParams):
    x = np.asarray(e, dtype=float) / p.a / p.n
    return special.betainc(3.0, p.n - 3.0, x / (1 + x))


def tsallis_mean(p: TsallisParams) -> float:
    if p.n <= 4:
        return np.inf
    return 3 * p.a * p.n / (p.n - 4)


def sample_tsallis(p: TsallisParams, size, rng) -> np.ndarray:
    y = rng.beta(3.0, p.n - 3.0, size=size)
    return p.a * p.n * y / (1 - y)


def tsallis_ppf(u, p: TsallisParams):
    y = special.betaincinv(3.0, p.n - 3.0, np.asarray(u, dtype=float))
    return p.a * p.n * y / (1 - y)


def weighted_median(hist: EnergyHistogram) -> float:
    c = np.cumsum(hist.counts)
    k = int(np.searchsorted(c, c[-1] / 2))
    return float(hist.centers[k])


@dataclass
class TailFit:
    params: TsallisParams
    n_err: float
    a_err: float
    slope: float
    intercept: float
    threshold: float
    upper: float
    bins_used: int
    chi2: float
    dof: int

    @property
    def chi2_dof(self) -> float:
        return self.chi2 / self.dof if self.dof > 0 else np.nan


def fit_tsallis_tail(hist: EnergyHistogram, tail_threshold: float | None = None, upper: float | None = None) -> TailFit:
    """Power-law fit of the histogram tail: ``log P = s log E + b``, n = 2 - s.

    Weights are the Poisson counts (var(log P) = 1/count).  The scale ``a``
    follows from matching ``exp(b)`` to the asymptote of the Tsallis density,
    ``P ~ C n^n a^(n-3) E^(2-n)``.  Default threshold: 10x the median.
    """
    if tail_threshold is None:
        tail_threshold = 10 * weighted_median(hist)
    upper = np.inf if upper is None else upper
    lo_edges, hi_edges = hist.bin_edges[:-1], hist.bin_edges[1:]
    sel = (lo_edges >= tail_threshold) & (hi_edges <= upper) & (hist.counts > 0)
    if sel.sum() < 5:
        raise ValueError(f"insufficient tail bins above {tail_threshold:.3g}: {int(sel.sum())}")
    x = np.log(hist.centers[sel])
    y = np.log(hist.density[sel])
    wts = hist.counts[sel].astype(float)
    X = np.column_stack([x, np.ones_like(x)])
    A = X.T @ (X * wts[:, None])
    coef = np.linalg.solve(A, X.T @ (wts * y))
    cov = np.linalg.inv(A)
    slope, intercept = coef
    resid = y - X @ coef
    chi2 = float(np.sum(wts * resid**2))
    dof = int(sel.sum()) - 2
    if slope >= 0:
        raise ValueError("non-negative tail slope: no power law")
    n = 2 - slope
    n_err = float(np.sqrt(cov[0, 0]))
    if n <= 3:
        raise ValueError(f"tail exponent n={n:.3f} <= 3: density not normalizable")
    # a^(n-3) = exp(b) / (C n^n)
    log_a = (intercept - np.log(_norm(n)) - n * np.log(n)) / (n - 3)
    a = float(np.exp(log_a))
    # first-order propagation of (slope, intercept) errors into log a
    dn = 1e-6 * max(1.0, n)
    dlog_a_dn = ((intercept - np.log(_norm(n + dn)) - (n + dn) * np.log(n + dn)) / (n + dn - 3) - log_a) / dn
    grad = np.array([-dlog_a_dn, 1 / (n - 3)])
    a_err = float(a * np.sqrt(grad @ cov @ grad))
    return TailFit(TsallisParams(n, a), n_err, a_err, float(slope), float(intercept),
                   float(tail_threshold), float(upper), int(sel.sum()), chi2, dof)


@dataclass
class FullFit:
    params: TsallisParams
    n_err: float
    a_err: float
    chi2: float
    dof: int
    bins_used: int
    converged: bool
    message: str = ""
    trace: list = field(default_factory=list)

    @property
    def chi2_dof(self) -> float:
        return self.chi2 / self.dof if self.dof > 0 else np.nan


def expected_counts(hist: EnergyHistogram, p: TsallisParams) -> np.ndarray:
    # flagged records carry no energy, so the model describes the rest
    return (hist.total_n - hist.n_flagged) * np.diff(tsallis_cdf(hist.bin_edges, p))


def region_chi2(hist: EnergyHistogram, p: TsallisParams, lo: float = 0.0, hi: float = np.inf, n_params: int = 0):
    """Pearson chi^2 of the model against bins inside [lo, hi].

    Bins with fewer than 5 counts are skipped.  Returns (chi2, dof, bins).
    """
    sel = (hist.bin_edges[:-1] >= lo) & (hist.bin_edges[1:] <= hi) & (hist.counts >= MIN_CHI2_COUNT)
    mu = expected_counts(hist, p)[sel]
    obs = hist.counts[sel]
    chi2 = float(np.sum((obs - mu) ** 2 / np.maximum(obs, 1)))
    return chi2, int(sel.sum()) - n_params, int(sel.sum())


class FitError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


def full_tsallis_fit(hist: EnergyHistogram, initial: TsallisParams | None = None) -> FullFit:
    """Binned maximum-likelihood fit of the Tsallis density to every bin.

    Poisson likelihood of the counts against ``total_n`` times the bin
    probability (events outside the histogram range enter as one extra
    bin).  Goodness of fit is the Pearson chi^2 over bins with >= 5 counts.
    """
    if hist.counts.sum() == 0:
        raise ValueError("empty histogram")
    if initial is None:
        med = weighted_median(hist)
        initial = TsallisParams(4.0, med / 4)
    edges = hist.bin_edges
    obs = hist.counts.astype(float)
    outside = hist.total_n - hist.n_flagged - obs.sum()
    trace = []

    def nll(theta):
        n = 3 + np.exp(theta[0])
        a = np.exp(theta[1])
        p = TsallisParams(n, a)
        cdf = tsallis_cdf(edges, p)
        prob = np.clip(np.diff(cdf), 1e-300, None)
        p_out = max(1 - (cdf[-1] - cdf[0]), 1e-300)
        val = -float(np.sum(obs * np.log(prob)) + outside * np.log(p_out))
        trace.append((n, a, val))
        return val

    theta0 = np.array([np.log(initial.n - 3), np.log(initial.a)])
    res = optimize.minimize(nll, theta0, method="Nelder-Mead",
                            options={"xatol": 1e-8, "fatol": 1e-6, "maxiter": 4000})
    if not res.success:
        raise FitError(f"Tsallis ML fit did not converge: {res.message}", trace)
    n, a = 3 + np.exp(res.x[0]), np.exp(res.x[1])
    p = TsallisParams(n, a)
    # curvature of the NLL for parameter errors (numerical Hessian in theta)
    h = 1e-4
    H = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            ei, ej = np.eye(2)[i] * h, np.eye(2)[j] * h
            H[i, j] = (nll(res.x + ei + ej) - nll(res.x + ei - ej) - nll(res.x - ei + ej) + nll(res.x - ei - ej)) / (4 * h * h)
    try:
        cov = np.linalg.inv(H)
        n_err = float(np.exp(res.x[0]) * np.sqrt(max(cov[0, 0], 0)))
        a_err = float(a * np.sqrt(max(cov[1, 1], 0)))
    except np.linalg.LinAlgError:
        n_err = a_err = np.nan
    chi2, dof, used = region_chi2(hist, p, n_params=2)
    return FullFit(p, n_err, a_err, chi2, dof, used, True, str(res.message), trace[-50:])


def chen_exponent(mass_ratio: float) -> float:
    """Analytic power-law parameter n = 3.34 (m_i/m_a - 1) + 5.

    Valid only for weak axial confinement (q^2/a >>> 1); linear traps with
    strong dc confinement give smaller n.
    """
    if not mass_ratio > 0:
        raise ValueError("mass ratio must be positive")
    return 3.34 * (mass_ratio - 1) + 5


def convert_exponent_convention(value: float, from_: str, to: str) -> float:
    """Convert between power-law conventions: 2 - n = -(nu + 1) = kappa = alpha - 1."""
    for c in (from_, to):
        if c not in CONVENTIONS:
            raise ValueError(f"unknown convention {c!r}; expected one of {CONVENTIONS}")
    # everything goes through kappa, the log-log slope of P(E)
    kappa = {"n": 2 - value, "nu": -(value + 1), "kappa": value, "alpha": value - 1}[from_]
    return {"n": 2 - kappa, "nu": -kappa - 1, "kappa": kappa, "alpha": kappa + 1}[to]
