"""
Run Configuration

Parser and validator for experiment config files.

Grammar (one statement per line):
    # comment                      ignored, also after a value
    key = value                    top-level setting
    [section]                      opens a block; following keys belong to it
    key = value                    setting inside the current block

Values:
    1.5e-3, -2, inf                numbers
    2*pi*1.6e6, pi/2               products and quotients of numbers and pi
    true, false                    booleans
    0, 0.1, 0.2                    comma-separated lists
    0:0.8:8                        start:stop:count grid (count points, ends included)
    anything else                  bare string

Top level: experiment (required), seed (required, 0 <= seed < 2^64),
output (default results/<experiment>.csv). Unknown sections, unknown keys
and repeated keys are errors. Validation reports every problem it finds,
each with its line number.
"""

import logging
import math
import re
import zlib
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from composite_pulses import RabiProfile, gradient_from_endpoints
from ion_crystal import (
    DEFAULT_GRADIENT_TOL,
    DEFAULT_MAX_ITERATIONS,
    ELEMENTARY_CHARGE,
    YB171_MASS,
    HarmonicAxial,
    PolynomialAxial,
    TrapConfig,
)
from photon_readout import DetectionModel
from storage_memory import NoiseModel, OrnsteinUhlenbeckDephasing, PhenomenologicalDephasing

logger = logging.getLogger(__name__)

EXPERIMENTS = ("crystal", "modes", "sk1-scan", "rabi-scan", "storage", "relaxation", "readout", "fit")
MAX_SEED = 2 ** 64

REQUIRED_SECTIONS: Dict[str, Tuple[str, ...]] = {
    "crystal": ("trap", "crystal"),
    "modes": ("trap", "crystal"),
    "sk1-scan": ("pulses",),
    "rabi-scan": ("rabi",),
    "storage": ("noise", "storage"),
    "relaxation": ("noise", "relaxation"),
    "readout": ("detection",),
    "fit": ("fit",),
}

# key -> (kind, default); a default of REQUIRED marks a mandatory key
REQUIRED = object()

SCHEMA: Dict[Optional[str], Dict[str, Tuple[Any, Any]]] = {
    None: {
        "experiment": (EXPERIMENTS, REQUIRED),
        "seed": ("seed", REQUIRED),
        "output": ("str", None),
    },
    "trap": {
        "omega_x": ("positive", REQUIRED),
        "omega_y": ("positive", REQUIRED),
        "axial": (("harmonic", "polynomial"), "harmonic"),
        "omega_z": ("positive", None),
        "axial_coefficients": ("float_list", None),
        "mass": ("positive", YB171_MASS),
        "charge": ("float", ELEMENTARY_CHARGE),
        "omega_ref": ("positive", None),
        "cooling_detuning": ("float", None),
    },
    "crystal": {
        "n_ions": ("positive_int", REQUIRED),
        "structure_tol": ("positive", None),
        "max_iterations": ("positive_int", DEFAULT_MAX_ITERATIONS),
        "gradient_tol": ("positive", DEFAULT_GRADIENT_TOL),
    },
    "pulses": {
        "theta": ("positive", math.pi),
        "phi": ("float", 0.0),
        "epsilon_min": ("float", -0.2),
        "epsilon_max": ("float", 0.2),
        "epsilon_step": ("positive", 0.01),
        "spam_error": ("spam", 0.0),
    },
    "rabi": {
        "omega0": ("positive", REQUIRED),
        "gradient_per_site": ("float", None),
        "omega_end": ("positive", None),
        "end_site": ("positive_int", None),
        "sites": ("int_list", [0, 80]),
        "duration_max": ("positive", 300e-6),
        "duration_step": ("positive", 5e-6),
    },
    "noise": {
        "dephasing": (("phenomenological", "ornstein-uhlenbeck"), "phenomenological"),
        "t2": ("positive", None),
        "sigma": ("nonneg", None),
        "tau_c": ("positive", None),
        "relaxation_time": ("positive", math.inf),
        "spam_error": ("spam", 0.0),
        "t2_drift": ("nonneg", 0.0),
    },
    "storage": {
        "times": ("grid", REQUIRED),
        "reps": ("positive_int", 200),
        "epsilon": ("float", 0.0),
        "echo": ("bool", True),
    },
    "relaxation": {
        "times": ("grid", REQUIRED),
        "reps": ("positive_int", 200),
    },
    "detection": {
        "bright_rate": ("positive", 20.0),
        "dark_rate": ("nonneg", 1.0),
        "heating_tau": ("positive", 0.256),
        "cooling_on": ("bool", False),
        "times": ("grid", REQUIRED),
        "threshold": ("nonneg_int", None),
    },
    "fit": {
        "input": ("str", REQUIRED),
        "model": (("exponential-offset", "pure-exponential", "rabi"), "exponential-offset"),
        "time_column": ("str", "time_s"),
        "value_column": ("str", "fidelity"),
        "sigma_column": ("str", "stderr"),
        "site": ("nonneg_int", None),
    },
}

_SECTION_RE = re.compile(r"^\[\s*([A-Za-z0-9_-]+)\s*\]$")
_ASSIGN_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*)$")
_INT_RE = re.compile(r"^[+-]?\d+$")
_NUMBER_RE = re.compile(r"^[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?$")


class ConfigError(ValueError):
    """Invalid config; ``errors`` lists every problem with its line number."""

    def __init__(self, errors: List[str]):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


@dataclass(frozen=True)
class RunConfig:
    """
    A validated experiment config.

    ``sections`` maps each block present in the file to its settings with
    defaults filled in; the typed blocks are built from the matching
    sections when those are present.
    """

    experiment: str
    seed: int
    output: str
    sections: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    trap: Optional[TrapConfig] = None
    noise: Optional[NoiseModel] = None
    detection: Optional[DetectionModel] = None
    rabi: Optional[RabiProfile] = None

    def section(self, name: str) -> Dict[str, Any]:
        return self.sections.get(name, {})

    def as_dict(self) -> Dict[str, Any]:
        """Plain mapping of every setting, suitable for JSON."""
        result: Dict[str, Any] = {"experiment": self.experiment, "seed": self.seed, "output": self.output}
        for name, values in self.sections.items():
            result[name] = dict(values)
        return result


# ============================================================================
# VALUE PARSING
# ============================================================================

def parse_number(text: str) -> Optional[float]:
    """
    Parse a number, ``inf`` or a product/quotient of numbers and ``pi``.

    Returns None when the text is not numeric. Integers come back as int.
    """
    t = text.strip().lower()
    if t in ("inf", "+inf"):
        return math.inf
    if t == "-inf":
        return -math.inf
    if _INT_RE.match(t):
        return int(t)
    parts = re.split(r"\s*([*/])\s*", t)
    value = 1.0
    op = "*"
    for i, part in enumerate(parts):
        if i % 2 == 1:
            op = part
            continue
        sign = 1.0
        if part.startswith("-"):
            sign, part = -1.0, part[1:]
        if part == "pi":
            term = math.pi
        elif _NUMBER_RE.match(part):
            term = float(part)
        else:
            return None
        term *= sign
        if op == "*":
            value *= term
        elif term == 0:
            return None
        else:
            value /= term
    return value


def _split_list(raw: str) -> List[str]:
    return [item.strip() for item in raw.split(",")]


def _as_float(raw: str) -> float:
    value = parse_number(raw)
    if value is None:
        raise ValueError(f"expected a number, got {raw!r}")
    return float(value)


def _as_int(raw: str) -> int:
    if not _INT_RE.match(raw.strip()):
        raise ValueError(f"expected an integer, got {raw!r}")
    return int(raw.strip())


def _as_grid(raw: str) -> List[float]:
    if ":" in raw:
        pieces = [p.strip() for p in raw.split(":")]
        if len(pieces) != 3:
            raise ValueError(f"grid must be start:stop:count, got {raw!r}")
        start, stop, count = _as_float(pieces[0]), _as_float(pieces[1]), _as_int(pieces[2])
        if count < 1:
            raise ValueError("grid count must be >= 1")
        values = [float(v) for v in np.linspace(start, stop, count)]
    else:
        values = [_as_float(item) for item in _split_list(raw)]
    if any(not (math.isfinite(v) and v >= 0) for v in values):
        raise ValueError("times must be finite and >= 0")
    return values


def coerce_value(kind: Any, raw: str) -> Any:
    """Convert raw text to the schema kind; raises ValueError naming the constraint."""
    if isinstance(kind, tuple):
        value = raw.strip().lower()
        if value not in kind:
            raise ValueError(f"must be one of {', '.join(kind)}")
        return value
    if kind == "str":
        return raw.strip()
    if kind == "bool":
        value = raw.strip().lower()
        if value not in ("true", "false"):
            raise ValueError("must be true or false")
        return value == "true"
    if kind == "float":
        return _as_float(raw)
    if kind == "positive":
        value = _as_float(raw)
        if not value > 0:
            raise ValueError("must be > 0")
        return value
    if kind == "nonneg":
        value = _as_float(raw)
        if not value >= 0:
            raise ValueError("must be >= 0")
        return value
    if kind == "spam":
        value = _as_float(raw)
        if not 0 <= value < 0.5:
            raise ValueError("must lie in [0, 0.5)")
        return value
    if kind == "positive_int":
        value = _as_int(raw)
        if value < 1:
            raise ValueError("must be >= 1")
        return value
    if kind == "nonneg_int":
        value = _as_int(raw)
        if value < 0:
            raise ValueError("must be >= 0")
        return value
    if kind == "seed":
        value = _as_int(raw)
        if not 0 <= value < MAX_SEED:
            raise ValueError("must satisfy 0 <= seed < 2^64")
        return value
    if kind == "float_list":
        return [_as_float(item) for item in _split_list(raw)]
    if kind == "int_list":
        return [_as_int(item) for item in _split_list(raw)]
    if kind == "grid":
        return _as_grid(raw)
    raise ValueError(f"unknown value kind {kind!r}")


# ============================================================================
# TYPED BLOCKS
# ============================================================================

def build_trap(values: Dict[str, Any]) -> TrapConfig:
    """TrapConfig from a [trap] block."""
    if values.get("axial", "harmonic") == "harmonic":
        if values.get("omega_z") is None:
            raise ValueError("omega_z required for axial = harmonic")
        axial = HarmonicAxial(values["omega_z"])
    else:
        if values.get("axial_coefficients") is None:
            raise ValueError("axial_coefficients required for axial = polynomial")
        axial = PolynomialAxial(tuple(values["axial_coefficients"]))
    return TrapConfig(
        omega_x=values["omega_x"],
        omega_y=values["omega_y"],
        axial=axial,
        mass=values.get("mass", YB171_MASS),
        charge=values.get("charge", ELEMENTARY_CHARGE),
        omega_ref=values.get("omega_ref"),
        cooling_detuning=values.get("cooling_detuning"),
    )


def build_noise(values: Dict[str, Any]) -> NoiseModel:
    """NoiseModel from a [noise] block."""
    if values.get("dephasing", "phenomenological") == "phenomenological":
        if values.get("t2") is None:
            raise ValueError("t2 required for dephasing = phenomenological")
        dephasing = PhenomenologicalDephasing(values["t2"])
    else:
        missing = [k for k in ("sigma", "tau_c") if values.get(k) is None]
        if missing:
            raise ValueError(f"{missing[0]} required for dephasing = ornstein-uhlenbeck")
        dephasing = OrnsteinUhlenbeckDephasing(values["sigma"], values["tau_c"])
    return NoiseModel(
        dephasing,
        relaxation_time=values.get("relaxation_time", math.inf),
        spam_error=values.get("spam_error", 0.0),
        t2_drift=values.get("t2_drift", 0.0),
    )


def build_detection(values: Dict[str, Any]) -> DetectionModel:
    """DetectionModel from a [detection] block."""
    return DetectionModel(
        bright_rate=values.get("bright_rate", 20.0),
        dark_rate=values.get("dark_rate", 1.0),
        heating_tau=values.get("heating_tau", 0.256),
        cooling_on=values.get("cooling_on", False),
    )


def build_rabi_profile(values: Dict[str, Any]) -> RabiProfile:
    """
    RabiProfile from a [rabi] block.

    The gradient is either given directly or derived from the Rabi
    frequency ``omega_end`` measured ``end_site`` spacings away.
    """
    gradient = values.get("gradient_per_site")
    endpoints = values.get("omega_end"), values.get("end_site")
    if gradient is not None and any(v is not None for v in endpoints):
        raise ValueError("gradient_per_site conflicts with omega_end/end_site")
    if gradient is None:
        if all(v is not None for v in endpoints):
            gradient = gradient_from_endpoints(values["omega0"], endpoints[0], endpoints[1])
        elif any(v is not None for v in endpoints):
            raise ValueError("omega_end and end_site must be given together")
        else:
            gradient = 0.0
    return RabiProfile(values["omega0"], gradient)


BUILDERS = {
    "trap": ("trap", build_trap),
    "noise": ("noise", build_noise),
    "detection": ("detection", build_detection),
    "rabi": ("rabi", build_rabi_profile),
}


# ============================================================================
# CHECKER
# ============================================================================

Entries = Dict[str, Tuple[str, int]]


class ConfigChecker:
    """Line-oriented config parser that collects every error before failing."""

    def check_config(self, text: str) -> Tuple[bool, Optional[RunConfig], List[str]]:
        """
        Parse and validate a config.

        Args:
            text: Config file contents

        Returns:
            Tuple of (is_valid, run_config, error_messages)
        """
        errors: List[str] = []
        top, blocks, headers = self._split_lines(text, errors)

        top_values = self._coerce_block(None, top, errors, 1)
        experiment = top_values.get("experiment")
        seed = top_values.get("seed")
        if "experiment" not in top:
            errors.append("line 1: experiment required")
        if "seed" not in top:
            errors.append("line 1: seed required")

        sections: Dict[str, Dict[str, Any]] = {}
        failed = set()
        for name, entries in blocks.items():
            count = len(errors)
            sections[name] = self._coerce_block(name, entries, errors, headers[name])
            if len(errors) > count:
                failed.add(name)

        if experiment in REQUIRED_SECTIONS:
            experiment_line = top["experiment"][1]
            for name in REQUIRED_SECTIONS[experiment]:
                if name not in blocks:
                    errors.append(f"line {experiment_line}: [{name}] section required for experiment {experiment}")

        typed: Dict[str, Any] = {}
        for name, (attribute, builder) in BUILDERS.items():
            if name not in sections or name in failed:
                continue
            try:
                typed[attribute] = builder(sections[name])
            except ValueError as e:
                line = self._line_of(str(e), blocks[name], headers[name])
                errors.append(f"line {line}: [{name}] {e}")

        if errors:
            logger.debug("config rejected with %d errors", len(errors))
            return False, None, errors

        output = top_values.get("output") or f"results/{experiment}.csv"
        config = RunConfig(experiment=experiment, seed=seed, output=output, sections=sections, **typed)
        return True, config, errors

    def _split_lines(self, text: str, errors: List[str]) -> Tuple[Entries, Dict[str, Entries], Dict[str, int]]:
        top: Entries = {}
        blocks: Dict[str, Entries] = {}
        headers: Dict[str, int] = {}
        current: Optional[str] = None
        skipping = False

        for line_no, raw_line in enumerate(text.splitlines(), start=1):
            line = raw_line.split("#", 1)[0].strip()
            if not line:
                continue

            header = _SECTION_RE.match(line)
            if header:
                name = header.group(1).lower()
                if name not in SCHEMA:
                    errors.append(f"line {line_no}: unknown section [{name}]")
                    skipping = True
                    continue
                if name in blocks:
                    errors.append(f"line {line_no}: duplicate section [{name}]")
                    skipping = True
                    continue
                current, skipping = name, False
                blocks[name] = {}
                headers[name] = line_no
                continue

            assign = _ASSIGN_RE.match(line)
            if not assign:
                errors.append(f"line {line_no}: expected 'key = value' or '[section]', got {line!r}")
                continue
            if skipping:
                continue
            key, value = assign.group(1).lower(), assign.group(2).strip()
            where = f"[{current}] " if current else ""
            target = blocks[current] if current else top
            if key not in SCHEMA[current]:
                errors.append(f"line {line_no}: unknown key {where}{key}")
            elif key in target:
                errors.append(f"line {line_no}: duplicate key {where}{key} (first set on line {target[key][1]})")
            elif not value:
                errors.append(f"line {line_no}: {where}{key} has no value")
            else:
                target[key] = (value, line_no)

        return top, blocks, headers

    def _coerce_block(
        self, section: Optional[str], entries: Entries, errors: List[str], header_line: int
    ) -> Dict[str, Any]:
        schema = SCHEMA[section]
        where = f"[{section}] " if section else ""
        values: Dict[str, Any] = {}
        for key, (kind, default) in schema.items():
            if key in entries:
                raw, line_no = entries[key]
                try:
                    values[key] = coerce_value(kind, raw)
                except ValueError as e:
                    errors.append(f"line {line_no}: {where}{key} {e}")
            elif default is REQUIRED:
                if section is not None:
                    errors.append(f"line {header_line}: [{section}] {key} required")
            else:
                values[key] = default
        return values

    @staticmethod
    def _line_of(message: str, entries: Entries, header_line: int) -> int:
        key = message.split(" ", 1)[0]
        return entries[key][1] if key in entries else header_line


def validate_config(text: str) -> Tuple[bool, Optional[RunConfig], List[str]]:
    """(is_valid, run_config, error_messages) for a config text."""
    return ConfigChecker().check_config(text)


def parse_config(text: str) -> RunConfig:
    """
    Parse a config text.

    Raises:
        ConfigError: carrying every validation error
    """
    is_valid, config, errors = validate_config(text)
    if not is_valid:
        raise ConfigError(errors)
    return config


def load_config(path: str) -> RunConfig:
    """Read and parse a config file."""
    with open(path, encoding="utf-8") as handle:
        return parse_config(handle.read())


def substream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Independent generator for a named use of the run seed."""
    key = (zlib.crc32(name.encode("utf-8")),) + tuple(int(i) for i in indices)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))
