"""
Memory Experiment Runner - Run configured experiments and write result files

Usage:
    python memory_runner.py run configs/storage.cfg
    python memory_runner.py validate configs/
    python memory_runner.py version

Every run writes a CSV (header row, '.' decimals, '\\n' line endings) and a
sidecar <output>.meta.json holding the full config, the seed, the artifact
version and a short summary. Identical configs give identical bytes.

Exit status: 0 success, 1 invalid config, 2 runtime failure.
"""

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from composite_pulses import Pulse, fidelity_scan, rabi_population, site_fidelity_profile, sk1_phase
from decay_fitting import (
    FIT_MODELS,
    FitError,
    FitResult,
    fit_exponential_offset,
    fit_pure_exponential,
    read_result_csv,
    sigma_floor,
    write_fit_csv,
    write_result_csv,
)
from ion_crystal import (
    CrystalConfiguration,
    axial_span,
    classify_structure,
    cooling_ions,
    normal_modes,
    solve_equilibrium,
    transverse_extent,
)
from photon_readout import CountState, mean_counts, optimal_threshold, readout_error_curve
from run_config import ConfigError, RunConfig, load_config, substream, validate_config
from storage_memory import ExperimentResult, relaxation_curve, storage_curve

try:
    from colorama import Fore, Style, init
    init(autoreset=True)
    COLORAMA_AVAILABLE = True
except ImportError:
    COLORAMA_AVAILABLE = False

logger = logging.getLogger(__name__)

ARTIFACT_VERSION = "1.0.0"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

STORAGE_HEADER = ("time_s", "fidelity", "stderr", "reps")

Table = Tuple[Sequence[str], Optional[List[Sequence[Any]]], Dict[str, Any]]


def print_colored(text: str, color: str = ""):
    """Print colored text if colorama is available."""
    if COLORAMA_AVAILABLE and color:
        print(f"{color}{text}{Style.RESET_ALL}")
    else:
        print(text)


def _color(name: str) -> str:
    return getattr(Fore, name) if COLORAMA_AVAILABLE else ""


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def _fit_summary(fit: FitResult) -> Dict[str, Any]:
    return {
        "params": dict(fit.params),
        "stderr": dict(fit.stderr),
        "flags": list(fit.flags),
        "converged": fit.converged,
    }


def _curve_rows(result: ExperimentResult) -> List[Sequence[Any]]:
    return [
        (float(t), float(v), float(s), int(result.repetitions))
        for t, v, s in zip(result.times, result.estimates, result.stderr)
    ]


def _scan_grid(start: float, stop: float, step: float) -> np.ndarray:
    if stop < start:
        raise ValueError(f"scan end {stop} lies below its start {start}")
    return np.linspace(start, stop, int(round((stop - start) / step)) + 1)


class ExperimentRunner:
    """Runs one validated config and writes its CSV and metadata."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.handlers: Dict[str, Callable[[], Table]] = {
            "crystal": self._run_crystal,
            "modes": self._run_modes,
            "sk1-scan": self._run_sk1_scan,
            "rabi-scan": self._run_rabi_scan,
            "storage": self._run_storage,
            "relaxation": self._run_relaxation,
            "readout": self._run_readout,
            "fit": self._run_fit,
        }

    @property
    def meta_path(self) -> str:
        return self.config.output + ".meta.json"

    def run(self) -> Dict[str, Any]:
        """
        Execute the experiment.

        Returns:
            The summary stored in the metadata file
        """
        directory = os.path.dirname(self.config.output)
        if directory:
            os.makedirs(directory, exist_ok=True)
        header, rows, summary = self.handlers[self.config.experiment]()
        if rows is not None:
            write_result_csv(self.config.output, header, rows)
        self._write_meta(summary)
        logger.info("%s: wrote %s", self.config.experiment, self.config.output)
        return summary

    def _write_meta(self, summary: Dict[str, Any]):
        meta = {
            "artifact_version": ARTIFACT_VERSION,
            "experiment": self.config.experiment,
            "seed": self.config.seed,
            "config": self.config.as_dict(),
            "summary": summary,
        }
        with open(self.meta_path, "w", encoding="utf-8", newline="\n") as handle:
            json.dump(meta, handle, indent=2, sort_keys=True, default=_jsonable)
            handle.write("\n")

    # ------------------------------------------------------------------
    # crystal
    # ------------------------------------------------------------------

    def _solve_crystal(self) -> CrystalConfiguration:
        settings = self.config.section("crystal")
        solver_seed = int(substream(self.config.seed, "crystal").integers(2 ** 32))
        return solve_equilibrium(
            self.config.trap,
            settings["n_ions"],
            seed=solver_seed,
            tol=settings["gradient_tol"],
            max_iterations=settings["max_iterations"],
        )

    def _crystal_summary(self, crystal: CrystalConfiguration) -> Dict[str, Any]:
        structure = classify_structure(crystal, self.config.section("crystal")["structure_tol"])
        return {
            "structure": structure.kind.value,
            "n_ions": crystal.n_ions,
            "axial_span_m": axial_span(crystal),
            "transverse_extent_m": transverse_extent(crystal),
            "energy_j": crystal.energy,
            "reduced_gradient_norm": crystal.reduced_gradient_norm,
            "iterations": crystal.iterations,
            "cooling_ions": cooling_ions(crystal),
            "cooling_detuning_rad_s": self.config.trap.cooling_detuning,
        }

    def _run_crystal(self) -> Table:
        crystal = self._solve_crystal()
        order = np.argsort(crystal.positions[:, 2], kind="stable")
        rows = [(i, *map(float, crystal.positions[k])) for i, k in enumerate(order)]
        return ("ion", "x", "y", "z"), rows, self._crystal_summary(crystal)

    def _run_modes(self) -> Table:
        crystal = self._solve_crystal()
        spectrum = normal_modes(self.config.trap, crystal)
        rows = [(k, float(w)) for k, w in enumerate(spectrum.frequencies)]
        summary = self._crystal_summary(crystal)
        summary.update({
            "mode_count": len(rows),
            "lowest_mode_rad_s": float(spectrum.frequencies[0]),
            "highest_mode_rad_s": float(spectrum.frequencies[-1]),
        })
        return ("mode", "angular_frequency_rad_s"), rows, summary

    # ------------------------------------------------------------------
    # pulses
    # ------------------------------------------------------------------

    def _run_sk1_scan(self) -> Table:
        s = self.config.section("pulses")
        target = Pulse(s["theta"], s["phi"])
        epsilons = _scan_grid(s["epsilon_min"], s["epsilon_max"], s["epsilon_step"])
        eps, single, sk1 = fidelity_scan(epsilons, target, s["spam_error"])
        rows = [(float(e), float(a), float(b)) for e, a, b in zip(eps, single, sk1)]
        summary = {
            "sk1_phase_rad": sk1_phase(target.theta),
            "min_single_pulse_fidelity": float(np.min(single)),
            "min_sk1_fidelity": float(np.min(sk1)),
        }
        return ("epsilon", "single_pulse_fidelity", "sk1_fidelity"), rows, summary

    def _run_rabi_scan(self) -> Table:
        s = self.config.section("rabi")
        profile = self.config.rabi
        sites = sorted(set(s["sites"]))
        durations = _scan_grid(0.0, s["duration_max"], s["duration_step"])
        rows = [
            (site, float(t), rabi_population(profile, site, float(t)))
            for site in sites
            for t in durations
        ]
        _, single, sk1 = site_fidelity_profile(profile, sites)
        span = sites[-1] - sites[0]
        summary = {
            "gradient_per_site": profile.gradient_per_site,
            "aggregate_change": (1 + profile.gradient_per_site) ** span - 1,
            "site_rabi_frequency_hz": {
                str(site): profile.omega0 * (1 + profile.gradient_per_site) ** site / (2 * math.pi)
                for site in sites
            },
            "min_single_pulse_fidelity": float(np.min(single)),
            "min_sk1_fidelity": float(np.min(sk1)),
        }
        return ("site", "time_s", "population"), rows, summary

    # ------------------------------------------------------------------
    # memory
    # ------------------------------------------------------------------

    def _run_storage(self) -> Table:
        s = self.config.section("storage")
        result = storage_curve(
            self.config.noise, s["times"], s["reps"], s["epsilon"],
            rng=substream(self.config.seed, "storage"), echo=s["echo"],
        )
        summary: Dict[str, Any] = {"points": len(result), "reps": result.repetitions}
        try:
            fit = fit_exponential_offset(result.times, result.estimates,
                                         sigma_floor(result.stderr, result.repetitions))
            summary["fit"] = _fit_summary(fit)
        except FitError as e:
            summary["fit_error"] = str(e)
        return STORAGE_HEADER, _curve_rows(result), summary

    def _run_relaxation(self) -> Table:
        s = self.config.section("relaxation")
        result = relaxation_curve(self.config.noise, s["times"], s["reps"],
                                  rng=substream(self.config.seed, "relaxation"))
        summary: Dict[str, Any] = {"points": len(result), "reps": result.repetitions}
        try:
            fit = fit_pure_exponential(result.times, result.estimates,
                                       sigma_floor(result.stderr, result.repetitions))
            summary["fit"] = _fit_summary(fit)
        except FitError as e:
            summary["fit_error"] = str(e)
        return STORAGE_HEADER, _curve_rows(result), summary

    # ------------------------------------------------------------------
    # detection
    # ------------------------------------------------------------------

    def _run_readout(self) -> Table:
        s = self.config.section("detection")
        model = self.config.detection
        threshold, error_t0 = optimal_threshold(model.bright_rate, model.dark_rate)
        if s["threshold"] is not None:
            threshold = s["threshold"]
        curve = readout_error_curve(model, s["times"], fixed_threshold=threshold)
        counts = [mean_counts(model, float(t), CountState.BRIGHT) for t in curve.times]
        rows = [(float(t), float(n), float(e)) for t, n, e in zip(curve.times, counts, curve.estimates)]
        summary: Dict[str, Any] = {
            "threshold": int(threshold),
            "optimal_error_t0": error_t0,
            "max_readout_error": float(np.max(curve.estimates)),
        }
        if not model.cooling_on and len(curve) >= 2:
            summary["fit"] = _fit_summary(fit_pure_exponential(curve.times, counts))
        return ("time_s", "mean_bright_counts", "readout_error"), rows, summary

    # ------------------------------------------------------------------
    # analysis
    # ------------------------------------------------------------------

    def _run_fit(self) -> Table:
        s = self.config.section("fit")
        data = read_result_csv(s["input"])
        sigma_column = s["sigma_column"]
        if sigma_column.lower() == "none":
            sigma_column = None
        needed = [s["time_column"], s["value_column"]] + ([sigma_column] if sigma_column else [])
        if s["site"] is not None:
            needed.append("site")
        missing = [name for name in needed if name not in data]
        if missing:
            raise FitError(f"{s['input']}: missing column(s) {', '.join(missing)}")

        mask = np.ones(len(data[s["time_column"]]), dtype=bool)
        if s["site"] is not None:
            mask = data["site"] == s["site"]
        times = data[s["time_column"]][mask]
        values = data[s["value_column"]][mask]
        sigmas = None
        if sigma_column:
            sigmas = data[sigma_column][mask]
            if "reps" in data:
                sigmas = sigma_floor(sigmas, data["reps"][mask])
            elif np.any(sigmas <= 0):
                raise FitError(f"{s['input']}: zero uncertainties and no reps column to floor them")

        fit = FIT_MODELS[s["model"]](times, values, sigmas)
        write_fit_csv(self.config.output, fit)
        summary = {"model": s["model"], "input": s["input"], "points": int(len(times))}
        summary.update(_fit_summary(fit))
        return ("param", "value", "stderr"), None, summary


# ============================================================================
# ENTRY POINTS
# ============================================================================

def _print_summary(config: RunConfig, summary: Dict[str, Any]):
    print("=" * 80)
    print_colored(f"🔬 {config.experiment} (seed {config.seed})", _color("CYAN"))
    print("=" * 80)
    for key in sorted(summary):
        value = summary[key]
        if isinstance(value, dict) and "params" in value:
            print(f"  {key}:")
            for name, estimate in value["params"].items():
                print(f"    {name} = {estimate:.6g} ± {value['stderr'][name]:.2g}")
            if value["flags"]:
                print_colored(f"    ⚠️  {', '.join(value['flags'])}", _color("YELLOW"))
        elif key == "params":
            for name, estimate in value.items():
                print(f"  {name} = {estimate:.6g} ± {summary['stderr'][name]:.2g}")
        elif key not in ("stderr",):
            print(f"  {key}: {value}")
    print_colored(f"✓ wrote {config.output}", _color("GREEN"))


def run(config: RunConfig, quiet: bool = False) -> int:
    """
    Run a validated config.

    Returns:
        EXIT_OK on success, EXIT_RUNTIME when a solver, fit or file
        operation fails
    """
    try:
        summary = ExperimentRunner(config).run()
    except (RuntimeError, ValueError, OSError) as e:
        logger.error("%s run failed: %s", config.experiment, e)
        print_colored(f"❌ {config.experiment} failed: {type(e).__name__}: {e}", _color("RED"))
        return EXIT_RUNTIME
    if not quiet:
        _print_summary(config, summary)
    return EXIT_OK


def run_file(path: str, output: Optional[str] = None, quiet: bool = False) -> int:
    """Load, validate and run a config file."""
    try:
        config = load_config(path)
    except ConfigError as e:
        print_colored(f"❌ {path}: invalid config", _color("RED"))
        for message in e.errors:
            print(f"   • {message}")
        return EXIT_CONFIG
    except OSError as e:
        print_colored(f"❌ cannot read {path}: {e}", _color("RED"))
        return EXIT_CONFIG
    if output:
        config = replace(config, output=output)
    return run(config, quiet=quiet)


def validate_path(path: str, pattern: str = "*.cfg") -> int:
    """
    Validate one config file or every matching file in a directory.

    Returns:
        EXIT_OK when every file is valid, EXIT_CONFIG otherwise
    """
    target = Path(path)
    if target.is_file():
        files = [target]
    elif target.is_dir():
        files = sorted(target.glob(pattern))
    else:
        print_colored(f"❌ Path not found: {target}", _color("RED"))
        return EXIT_CONFIG

    invalid = 0
    for file in files:
        is_valid, config, errors = validate_config(file.read_text(encoding="utf-8"))
        if is_valid:
            print_colored(f"✓ {file}: {config.experiment}", _color("GREEN"))
        else:
            invalid += 1
            print_colored(f"❌ {file}", _color("RED"))
            for message in errors:
                print(f"   • {message}")

    print("=" * 80)
    print(f"Files: {len(files)}  Valid: {len(files) - invalid}  Invalid: {invalid}")
    return EXIT_OK if invalid == 0 else EXIT_CONFIG


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Ion-crystal quantum memory experiment runner")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="Log progress (-v info, -vv debug)")
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", help="Run the experiment in a config file")
    run_parser.add_argument("config", help="Config file path")
    run_parser.add_argument("-o", "--output", help="Override the CSV output path")
    run_parser.add_argument("-q", "--quiet", action="store_true", help="Do not print the summary")

    validate_parser = commands.add_parser("validate", help="Validate a config file or directory")
    validate_parser.add_argument("path", help="File or directory path to validate")
    validate_parser.add_argument("-p", "--pattern", default="*.cfg",
                                 help="File pattern for directory validation (default: *.cfg)")

    commands.add_parser("version", help="Print the artifact version")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Command-line entry point."""
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "run":
        return run_file(args.config, args.output, args.quiet)
    if args.command == "validate":
        return validate_path(args.path, args.pattern)
    print(f"memory_runner {ARTIFACT_VERSION}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
