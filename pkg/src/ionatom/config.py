"""JSON run configuration with unit-suffixed keys.

A config file holds any subset of the sections in :func:`paper_defaults`;
missing keys fall back to the defaults and unknown keys are rejected so a
typo never silently runs the wrong experiment.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np

from .constants import KB, MHZ, MK, NM, RB87_MASS_U, RB_POLARIZABILITY_AU, SR88_MASS_U, UK, UM
from .emm import LaserProbe
from .hardsphere import BathConfig, InitialDistribution, McRunConfig
from .polarization import MdConfig
from .trap import SpeciesPair, TrapConfig, mathieu_from_frequencies

KHZ = 1e3
US = 1e-6
NS = 1e-9


class ConfigError(ValueError):
    """Malformed or inconsistent configuration (a user error)."""


def paper_defaults() -> dict:
    return {
        "trap": {
            "secular_frequencies_mhz": [0.82, 1.28, 0.58],
            "rf_frequency_mhz": 26.51,
            "axial_rf_free": True,
            "mathieu_a": None,
            "mathieu_q": None,
            "emm_dc_displacement_nm": [0.0, 0.0, 0.0],
            "emm_quadrature_amplitude_nm": [0.0, 0.0, 0.0],
        },
        "species": {
            "ion_mass_u": SR88_MASS_U,
            "atom_mass_u": RB87_MASS_U,
            "c4_au": RB_POLARIZABILITY_AU,
        },
        "bath": {
            "temperature_uk": 10.0,
            "density_per_m3": 1e18,
            "cloud_sigma_um": None,
            "cloud_center_um": [0.0, 0.0, 0.0],
        },
        "hardsphere": {
            "n_realizations": 10_000,
            "collisions_per_realization": 500,
            "mean_collision_interval_us": 100.0,
            # per-mode energy (k_B mK) for "delta", temperature (mK) for "maxwell_boltzmann"
            "initial_kind": "ground",
            "initial_mk": 0.0,
            "record_mode": "final_energy",
            "include_emm_energy": False,
        },
        "polarization": {
            "n_realizations": 5_000,
            "sphere_radius_um": 1.2,
            "contact_radius_nm": 5.0,
            "timestep_ns": None,
            "max_langevin_collisions": 300,
            "collision_count_mode": "poisson",
            "adaptive_step_policy": "free_fall",
            "contact_model": "billiard",
            "switch_radius_nm": 100.0,
            "initial_temperature_mk": 0.5,
            "max_steps_per_visit": 10_000_000,
            "rf_field_v_per_m": [0.0, 0.0, 0.0],
        },
        "histogram": {
            "n_bins": 100,
            "range_mk": [1e-3, 1e4],
            "e_scale_mk": 1.0,
        },
        "fit": {
            "tail_threshold_mk": None,
            "upper_mk": None,
        },
        "probe": {
            "wavelength_nm": 674.0,
            "direction": [0.0, 0.0, 1.0],
        },
        "emm_budget": {
            "entries": [
                {"label": "Residual axial EMM, single ion", "amplitude_nm": 0.15, "temperature_uk": 1.5},
                {"label": "Residual axial EMM, four ions", "amplitude_nm": 0.15, "temperature_uk": 1.5},
                {"label": "Temperature systematic at 0.3 mK", "amplitude_nm": 0.1, "temperature_uk": 1.0},
                {"label": "Radial compensation uncertainty", "amplitude_nm": 0.4, "temperature_uk": 12.0},
                {"label": "Residual radial EMM after dc compensation", "amplitude_nm": 0.5, "temperature_uk": 16.0},
            ],
        },
        "rabi": {
            "probe_direction": [0.7071067811865476, 0.7071067811865476, 0.0],
            "rabi_frequency_khz": 50.0,
            "times_us": {"start": 1.0, "stop": 150.0, "count": 60},
            "shots_per_point": 170,
            "distribution": {"kind": "thermal", "temperature_mk": 0.3},
            "fit_model": "thermal",
            "n_starts": 5,
        },
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key != "distribution":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None) -> dict:
    """Built-in defaults overlaid with the JSON file at ``path`` (if any)."""
    if path is None:
        return paper_defaults()
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return _merge(paper_defaults(), raw)


def _vec(value, scale: float, name: str) -> tuple:
    arr = np.asarray(value, dtype=float)
    if arr.shape != (3,):
        raise ConfigError(f"{name} must have three components")
    return tuple((arr * scale).tolist())


def _build(factory, *args, **kwargs):
    try:
        return factory(*args, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def trap_from_config(cfg: dict) -> TrapConfig:
    t = cfg["trap"]
    rf = 2 * np.pi * float(t["rf_frequency_mhz"]) * MHZ
    if t["mathieu_a"] is not None or t["mathieu_q"] is not None:
        if t["mathieu_a"] is None or t["mathieu_q"] is None:
            raise ConfigError("give both mathieu_a and mathieu_q, or neither")
        trap = _build(TrapConfig, rf, _vec(t["mathieu_a"], 1, "mathieu_a"), _vec(t["mathieu_q"], 1, "mathieu_q"))
    else:
        omega = 2 * np.pi * np.asarray(_vec(t["secular_frequencies_mhz"], MHZ, "secular_frequencies_mhz"))
        trap = _build(mathieu_from_frequencies, omega, rf, bool(t["axial_rf_free"]))
    return _build(trap.with_emm, _vec(t["emm_dc_displacement_nm"], NM, "emm_dc_displacement_nm"),
                  _vec(t["emm_quadrature_amplitude_nm"], NM, "emm_quadrature_amplitude_nm"))


def pair_from_config(cfg: dict) -> SpeciesPair:
    s = cfg["species"]
    return _build(SpeciesPair.from_atomic_units, float(s["ion_mass_u"]), float(s["atom_mass_u"]), float(s["c4_au"]))


def bath_from_config(cfg: dict) -> BathConfig:
    b = cfg["bath"]
    sigma = None if b["cloud_sigma_um"] is None else _vec(b["cloud_sigma_um"], UM, "cloud_sigma_um")
    return _build(BathConfig, float(b["temperature_uk"]) * UK, float(b["density_per_m3"]), sigma,
                  _vec(b["cloud_center_um"], UM, "cloud_center_um"))


def mc_from_config(cfg: dict, seed: int, n_realizations: int | None = None) -> McRunConfig:
    h = cfg["hardsphere"]
    kind = h["initial_kind"]
    value = float(h["initial_mk"]) * MK
    if kind == "delta":
        value *= KB
    init = _build(InitialDistribution, kind, value)
    return _build(McRunConfig, int(n_realizations or h["n_realizations"]), int(h["collisions_per_realization"]),
                  float(h["mean_collision_interval_us"]) * US, init, int(seed), h["record_mode"],
                  bool(h["include_emm_energy"]))


def md_from_config(cfg: dict, seed: int, n_realizations: int | None = None) -> MdConfig:
    p = cfg["polarization"]
    dt = None if p["timestep_ns"] is None else float(p["timestep_ns"]) * NS
    return _build(
        MdConfig,
        sphere_radius=float(p["sphere_radius_um"]) * UM,
        contact_radius=float(p["contact_radius_nm"]) * NM,
        timestep=dt,
        max_langevin_collisions=int(p["max_langevin_collisions"]),
        adaptive_step_policy=p["adaptive_step_policy"],
        master_seed=int(seed),
        n_realizations=int(n_realizations or p["n_realizations"]),
        collision_count_mode=p["collision_count_mode"],
        switch_radius=float(p["switch_radius_nm"]) * NM,
        contact_model=p["contact_model"],
        initial_temperature=float(p["initial_temperature_mk"]) * MK,
        max_steps_per_visit=int(p["max_steps_per_visit"]),
        rf_field=_vec(p["rf_field_v_per_m"], 1, "rf_field_v_per_m"),
    )


def probe_from_config(cfg: dict) -> LaserProbe:
    p = cfg["probe"]
    return _build(LaserProbe, float(p["wavelength_nm"]) * NM, _vec(p["direction"], 1, "direction"))


def rabi_distribution(spec: dict) -> dict:
    """Thermometry distribution dict in SI units from its config form."""
    kind = spec.get("kind")
    if kind in ("thermal", "maxwell_boltzmann"):
        return {"kind": kind, "temperature": float(spec["temperature_mk"]) * MK}
    if kind == "tsallis":
        return {"kind": kind, "n": float(spec["n"]), "a": float(spec["a_mk"]) * MK * KB}
    raise ConfigError(f"unknown distribution kind {kind!r}")


def rabi_times(cfg: dict) -> np.ndarray:
    t = cfg["rabi"]["times_us"]
    if int(t["count"]) < 2:
        raise ConfigError("need at least two time points")
    return np.linspace(float(t["start"]), float(t["stop"]), int(t["count"])) * US
