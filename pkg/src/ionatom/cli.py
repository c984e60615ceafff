"""Command-line entry point: ``ionatom <subcommand> [options]``.

Every subcommand writes its data files into ``--out-dir`` together with a
``manifest.json`` recording the command, the resolved configuration, the
seed, the build version, timestamps and sha256 digests of every input and
output file.  Exit codes: 0 success, 1 user error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import subprocess
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .constants import KB, MK, NM
from .parallel import default_workers

EXIT_OK = 0
EXIT_USER = 1
EXIT_NUMERIC = 2

SUBCOMMANDS = ("simulate-hardsphere", "simulate-polarization", "histogram", "fit-tsallis", "emm-budget",
               "emm-beta", "rabi-signal", "rabi-fit", "paper-defaults")


class UserError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with exit code 1 (user error) instead of 2 on bad usage."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


# --- output helpers ------------------------------------------------------------


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def build_version() -> str:
    try:
        described = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                                   cwd=Path(__file__).resolve().parent, capture_output=True, text=True,
                                   timeout=10)
        if described.returncode == 0 and described.stdout.strip():
            return f"{__version__}+{described.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _num(x) -> str:
    """Shortest round-trip text for a float; integers and flags as ints."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else _num(v) for v in row])
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    return obj


def write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
    return path


def read_csv_columns(path: Path, required) -> dict:
    try:
        with open(path, newline="", encoding="ascii") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
            fields = reader.fieldnames or []
    except FileNotFoundError as exc:
        raise UserError(f"input file not found: {path}") from exc
    missing = [c for c in required if c not in fields]
    if missing:
        raise UserError(f"{path}: missing column(s) {', '.join(missing)}")
    if not rows:
        raise UserError(f"{path}: no data rows")
    try:
        return {c: np.array([float(r[c]) for r in rows]) for c in fields if c in required}
    except ValueError as exc:
        raise UserError(f"{path}: non-numeric value ({exc})") from exc


class Run:
    """Collects inputs/outputs of one subcommand and writes its manifest."""

    def __init__(self, args, config: dict):
        self.args = args
        self.config = config
        self.out_dir = Path(args.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self.started = datetime.now(timezone.utc)
        self.clock = time.perf_counter()
        if args.config:
            self.inputs.append(Path(args.config))

    def path(self, name: str) -> Path:
        p = self.out_dir / name
        self.outputs.append(p)
        return p

    @property
    def wall_time(self) -> float:
        return time.perf_counter() - self.clock

    def finish(self, argv) -> Path:
        manifest = {
            "command": " ".join(["ionatom", *argv]),
            "subcommand": self.args.command,
            "resolved_config": self.config,
            "master_seed": self.args.seed,
            "workers": self.args.workers,
            "build_version": build_version(),
            "start": self.started.isoformat(),
            "end": datetime.now(timezone.utc).isoformat(),
            "wall_time_s": self.wall_time,
            "inputs": {str(p): sha256_file(p) for p in self.inputs},
            "outputs": {p.name: sha256_file(p) for p in self.outputs},
        }
        return write_json(self.out_dir / "manifest.json", manifest)


# --- subcommands -----------------------------------------------------------------


def _records_rows(rec, md: bool, first_index: int):
    for i in range(len(rec)):
        row = [first_index + i, rec.total_energy[i], rec.flagged[i]]
        if md:
            row += [rec.collision_count[i], rec.extra["flagged_visits"][i], rec.extra["visits"][i]]
        yield row


def cmd_simulate_hardsphere(run: Run):
    from .hardsphere import run_hard_sphere_mc

    args, cfg = run.args, run.config
    trap, pair, bath = cfgmod.trap_from_config(cfg), cfgmod.pair_from_config(cfg), cfgmod.bath_from_config(cfg)
    mc = cfgmod.mc_from_config(cfg, args.seed, args.realizations)
    rec = run_hard_sphere_mc(trap, pair, bath, mc, workers=args.workers, first_index=args.first_index)
    write_csv(run.path("energies.csv"), ["realization_index", "final_energy_J", "flagged"],
              _records_rows(rec, False, args.first_index))
    if rec.trace is not None:
        write_csv(run.path("traces.csv"), ["realization_index", "collision", "energy_J"],
                  ((args.first_index + i, k, e) for i, tr in enumerate(rec.trace) for k, e in enumerate(tr)))
    write_json(run.path("energies.json"), {**rec.metadata, "build_version": build_version(),
                                           "wall_time_s": run.wall_time})
    print(f"{len(rec)} realizations, {int(rec.flagged.sum())} flagged -> {run.out_dir / 'energies.csv'}")


def cmd_simulate_polarization(run: Run):
    from .polarization import run_polarization_md

    args, cfg = run.args, run.config
    trap, pair, bath = cfgmod.trap_from_config(cfg), cfgmod.pair_from_config(cfg), cfgmod.bath_from_config(cfg)
    md = cfgmod.md_from_config(cfg, args.seed, args.realizations)
    rec = run_polarization_md(trap, pair, bath, md, workers=args.workers, first_index=args.first_index)
    write_csv(run.path("energies.csv"),
              ["realization_index", "final_energy_J", "flagged", "langevin_collisions", "flagged_visits", "visits"],
              _records_rows(rec, True, args.first_index))
    write_json(run.path("energies.json"), {**rec.metadata, "build_version": build_version(),
                                           "wall_time_s": run.wall_time})
    print(f"{len(rec)} realizations, {int(rec.flagged.sum())} flagged, "
          f"flagged-visit fraction {rec.metadata['flagged_visit_fraction']:.3g} -> {run.out_dir / 'energies.csv'}")


def _load_energies(run: Run):
    from .hardsphere import EnergyRecords

    if not run.args.input:
        raise UserError("--input is required")
    path = Path(run.args.input)
    run.inputs.append(path)
    cols = read_csv_columns(path, ["final_energy_J", "flagged"])
    e = cols["final_energy_J"]
    return EnergyRecords(e, np.zeros(e.size, dtype=np.int64), cols["flagged"].astype(bool))


def _histogram(run: Run):
    from .stats import build_histogram

    h = run.config["histogram"]
    lo, hi = (float(x) * MK * KB for x in h["range_mk"])
    return build_histogram(_load_energies(run), int(h["n_bins"]), (lo, hi), float(h["e_scale_mk"]) * MK * KB)


def cmd_histogram(run: Run):
    hist = _histogram(run)
    rows = zip(hist.bin_edges[:-1], hist.bin_edges[1:], hist.centers, hist.density, hist.density_error, hist.counts)
    write_csv(run.path("histogram.csv"),
              ["bin_low_J", "bin_high_J", "bin_center_J", "density_per_J", "density_error_per_J", "count"], rows)
    write_json(run.path("histogram.json"), {
        "total_n": hist.total_n, "n_flagged": hist.n_flagged, "n_below_range": hist.n_below,
        "n_above_range": hist.n_above, "retained_fraction": hist.retained_fraction, "e_scale_J": hist.e_scale,
    })
    print(f"{len(hist.counts)} bins, retained fraction {hist.retained_fraction:.6f}")


def cmd_fit_tsallis(run: Run):
    from .stats import FitError, fit_tsallis_tail, full_tsallis_fit, region_chi2, weighted_median

    hist = _histogram(run)
    f = run.config["fit"]
    thr = None if f["tail_threshold_mk"] is None else float(f["tail_threshold_mk"]) * MK * KB
    upper = None if f["upper_mk"] is None else float(f["upper_mk"]) * MK * KB
    tail = fit_tsallis_tail(hist, thr, upper)
    report = {
        "median_J": weighted_median(hist),
        "tail": {"n": tail.params.n, "n_err": tail.n_err, "a_J": tail.params.a, "a_err_J": tail.a_err,
                 "slope": tail.slope, "threshold_J": tail.threshold, "upper_J": tail.upper,
                 "bins_used": tail.bins_used, "chi2": tail.chi2, "dof": tail.dof},
        "e_scale_J": hist.e_scale,
        "n_flagged": hist.n_flagged,
    }
    try:
        full = full_tsallis_fit(hist)
    except FitError as exc:
        raise NumericFailure(str(exc)) from exc
    bulk = region_chi2(hist, full.params, hi=tail.threshold)
    report["full"] = {"n": full.params.n, "n_err": full.n_err, "a_J": full.params.a, "a_err_J": full.a_err,
                      "chi2": full.chi2, "dof": full.dof, "chi2_dof": full.chi2_dof, "bins_used": full.bins_used,
                      "bulk_chi2": bulk[0], "bulk_bins": bulk[2]}
    write_json(run.path("tsallis_fit.json"), report)
    print(f"tail n = {tail.params.n:.4f} +- {tail.n_err:.4f}; full fit n = {full.params.n:.4f}, "
          f"chi2/dof = {full.chi2_dof:.3g}")


def _budget_entries(run: Run):
    if run.args.entries:
        path = Path(run.args.entries)
        run.inputs.append(path)
        try:
            raw = json.loads(path.read_text())
        except (FileNotFoundError, json.JSONDecodeError) as exc:
            raise UserError(f"cannot read budget entries from {path}: {exc}") from exc
        entries = raw["entries"] if isinstance(raw, dict) and "entries" in raw else raw
    else:
        entries = run.config["emm_budget"]["entries"]
    out = []
    for e in entries:
        if not isinstance(e, dict) or "label" not in e:
            raise UserError("each budget entry needs a label")
        amp = e.get("amplitude_nm")
        temp = e.get("temperature_uk")
        out.append((e["label"], None if amp is None else float(amp) * NM, None if temp is None else float(temp) * 1e-6))
    return out


def cmd_emm_budget(run: Run):
    from .emm import build_emm_budget

    pair = cfgmod.pair_from_config(run.config)
    trap = cfgmod.trap_from_config(run.config)
    budget = build_emm_budget(_budget_entries(run), pair.ion_mass, trap.rf_frequency)
    rows = [(label, amp / NM, temp / 1e-6) for label, amp, temp in budget.rows()]
    write_csv(run.path("emm_budget.csv"), ["description", "amplitude_nm", "temperature_uK"], rows)
    write_json(run.path("emm_budget.json"), {"rows": [dict(zip(("description", "amplitude_nm", "temperature_uK"), r))
                                                      for r in rows], **budget.metadata})
    width = max(len(r[0]) for r in rows)
    print(f"{'Description':<{width}}  {'u_EMM [nm]':>10}  {'T_EMM [uK]':>10}")
    for label, amp, temp in rows:
        print(f"{label:<{width}}  {amp:>10.3g}  {temp:>10.3g}")


def cmd_emm_beta(run: Run):
    from .emm import (EmmVector, amplitude_from_beta, beta_from_coupling_ratio, coupling_ratio_from_beta,
                      modulation_index, rf_field_from_amplitude)

    args = run.args
    probe = cfgmod.probe_from_config(run.config)
    trap = cfgmod.trap_from_config(run.config)
    pair = cfgmod.pair_from_config(run.config)
    report = {"probe_wavelength_m": probe.wavelength, "probe_direction": probe.direction}
    if args.ratio is not None:
        beta = beta_from_coupling_ratio(args.ratio)
        report.update(mode="ratio", coupling_ratio=args.ratio)
    elif args.beta is not None:
        beta = args.beta
        report.update(mode="beta", coupling_ratio=coupling_ratio_from_beta(beta))
    else:
        beta, delta = modulation_index(probe, EmmVector.from_trap(trap))
        report.update(mode="geometry", delta_rad=delta, coupling_ratio=coupling_ratio_from_beta(beta))
    amp = amplitude_from_beta(beta, probe)
    report.update(beta=beta, amplitude_along_k_m=amp,
                  rf_field_v_per_m=rf_field_from_amplitude(amp, pair.ion_mass, trap.rf_frequency))
    write_json(run.path("emm_beta.json"), report)
    print(f"beta = {beta:.6g}, amplitude along k = {amp / NM:.4g} nm, "
          f"rf field = {report['rf_field_v_per_m']:.4g} V/m")


def _rabi_modes(run: Run):
    from .emm import LaserProbe
    from .thermometry import modes_from_probe
    from .trap import secular_frequencies

    r = run.config["rabi"]
    trap = cfgmod.trap_from_config(run.config)
    pair = cfgmod.pair_from_config(run.config)
    probe = cfgmod._build(LaserProbe, float(run.config["probe"]["wavelength_nm"]) * NM,
                          cfgmod._vec(r["probe_direction"], 1, "probe_direction"))
    return modes_from_probe(secular_frequencies(trap), probe.k_vector, pair.ion_mass)


def cmd_rabi_signal(run: Run):
    from .parallel import realization_rng
    from .thermometry import rabi_signal, sample_shots

    r = run.config["rabi"]
    modes = _rabi_modes(run)
    omega0 = 2 * np.pi * float(r["rabi_frequency_khz"]) * 1e3
    shots = int(r["shots_per_point"])
    curve = rabi_signal(cfgmod.rabi_times(run.config), modes, omega0, cfgmod.rabi_distribution(r["distribution"]),
                        shots_per_point=shots, seed=run.args.seed)
    if run.args.noisy:
        curve = sample_shots(curve, shots, realization_rng(run.args.seed, 0))
    write_csv(run.path("rabi_curve.csv"), ["time_us", "p_excited", "shots"],
              ((t * 1e6, p, curve.shots_per_point) for t, p in zip(curve.times, curve.excitation_probability)))
    write_json(run.path("rabi_curve.json"), {**curve.metadata, "noisy": bool(run.args.noisy)})
    print(f"{curve.times.size} points -> {run.out_dir / 'rabi_curve.csv'}")


def cmd_rabi_fit(run: Run):
    from .thermometry import RabiCurve, RabiFitError, fit_rabi_curve

    if not run.args.input:
        raise UserError("--input is required")
    path = Path(run.args.input)
    run.inputs.append(path)
    cols = read_csv_columns(path, ["time_us", "p_excited", "shots"])
    shots = np.unique(cols["shots"])
    if shots.size != 1:
        raise UserError("rabi-fit needs the same shot count at every point")
    curve = RabiCurve(cols["time_us"] * 1e-6, cols["p_excited"], int(shots[0]))
    r = run.config["rabi"]
    model = run.args.model or r["fit_model"]
    try:
        fit = fit_rabi_curve(curve, _rabi_modes(run), model, n_starts=int(r["n_starts"]), seed=run.args.seed)
    except RabiFitError as exc:
        raise NumericFailure(str(exc)) from exc
    params = dict(fit.params)
    if "temperature" in params:
        params["temperature_mk"] = params["temperature"] / MK
    if "a" in params:
        params["a_mk"] = params["a"] / (KB * MK)
    write_json(run.path("rabi_fit.json"), {"model": fit.model, "params": params, "errors": fit.errors,
                                           "chi2": fit.chi2, "dof": fit.dof, "chi2_dof": fit.chi2_dof,
                                           "nll": fit.nll, "converged": fit.converged})
    print(f"{model}: " + ", ".join(f"{k} = {v:.5g}" for k, v in params.items()) + f"; chi2/dof = {fit.chi2_dof:.3g}")


def cmd_paper_defaults(run: Run):
    from .trap import default_cetina_mode, emm_energy, secular_frequencies, cetina_temperature

    cfg = cfgmod.paper_defaults()
    write_json(run.path("paper_defaults.json"), cfg)
    trap = cfgmod.trap_from_config(cfg)
    pair = cfgmod.pair_from_config(cfg)
    omega, q = default_cetina_mode(trap)
    derived = {
        "mathieu_a": list(trap.mathieu_a), "mathieu_q": list(trap.mathieu_q),
        "secular_frequencies_mhz": (secular_frequencies(trap) / (2 * np.pi * 1e6)).tolist(),
        "w0_mk": cetina_temperature(pair, omega, q) / MK,
        "emm_energy_mk": emm_energy(trap, pair.ion_mass)[1] / MK,
    }
    write_json(run.path("paper_defaults_derived.json"), derived)
    print(json.dumps(cfg, indent=2))


COMMANDS = {
    "simulate-hardsphere": cmd_simulate_hardsphere,
    "simulate-polarization": cmd_simulate_polarization,
    "histogram": cmd_histogram,
    "fit-tsallis": cmd_fit_tsallis,
    "emm-budget": cmd_emm_budget,
    "emm-beta": cmd_emm_beta,
    "rabi-signal": cmd_rabi_signal,
    "rabi-fit": cmd_rabi_fit,
    "paper-defaults": cmd_paper_defaults,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config (unit-suffixed keys) overriding the built-in defaults")
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--workers", type=int, default=default_workers(),
                        help="worker processes (default: available CPUs); results do not depend on it")
    common.add_argument("--out-dir", default="ionatom-out", help="output directory (default ionatom-out)")

    parser = _Parser(prog="ionatom", description="Trapped-ion / ultracold-atom collision simulators and analysis.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)

    for name, helptext in (("simulate-hardsphere", "hard-sphere Langevin-collision Monte Carlo"),
                           ("simulate-polarization", "polarization-potential molecular dynamics")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--realizations", type=int, help="override the configured realization count")
        p.add_argument("--first-index", type=int, default=0,
                       help="index of the first realization (split long runs into reproducible blocks)")

    for name, helptext in (("histogram", "log-binned energy histogram of a simulation CSV"),
                           ("fit-tsallis", "Tsallis tail and full fits of a simulation CSV")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--input", help="energies.csv from a simulate-* run")

    p = sub.add_parser("emm-budget", parents=[common], help="EMM budget table")
    p.add_argument("--entries", help="JSON list of {label, amplitude_nm, temperature_uk} (default: configured rows)")

    p = sub.add_parser("emm-beta", parents=[common], help="modulation index from geometry, ratio or beta")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--ratio", type=float, help="measured sideband/carrier coupling ratio")
    g.add_argument("--beta", type=float, help="modulation index")

    p = sub.add_parser("rabi-signal", parents=[common], help="carrier Rabi curve for a configured distribution")
    p.add_argument("--noisy", action="store_true", help="add binomial shot noise")

    p = sub.add_parser("rabi-fit", parents=[common], help="fit a carrier Rabi curve CSV")
    p.add_argument("--input", help="CSV with time_us, p_excited, shots")
    p.add_argument("--model", choices=("thermal", "maxwell_boltzmann", "tsallis"))

    sub.add_parser("paper-defaults", parents=[common], help="write the default trap/species configuration")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("ionatom: error: a subcommand is required", file=sys.stderr)
        return EXIT_USER
    if getattr(args, "realizations", None) is not None and args.realizations <= 0:
        print("ionatom: error: --realizations must be positive", file=sys.stderr)
        return EXIT_USER
    if args.workers < 1:
        print("ionatom: error: --workers must be at least 1", file=sys.stderr)
        return EXIT_USER
    try:
        config = cfgmod.load_config(args.config)
        run = Run(args, config)
        COMMANDS[args.command](run)
        run.finish(argv)
    except (UserError, cfgmod.ConfigError) as exc:
        print(f"ionatom: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (NumericFailure, ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"ionatom: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # invalid physical parameters surface as ValueError from the library
        print(f"ionatom: error: {exc}", file=sys.stderr)
        return EXIT_USER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
