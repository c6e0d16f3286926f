"""
Decay and Oscillation Fitting

Weighted nonlinear least squares for the fit forms used on storage,
relaxation, readout and Rabi data:
- F = A + B exp(-t / T)            (storage fidelity, T = T2)
- N = C exp(-t / tau)              (photon-count decay, relaxation)
- P = offset + amplitude sin^2(Omega t / 2)   (Rabi oscillation)

Fits run Levenberg-Marquardt with analytic Jacobians. Standard errors come
from the linearized covariance (J^T J)^-1 of the sigma-weighted residuals,
i.e. sigmas are taken as absolute one-standard-deviation errors. Without
sigmas the covariance is rescaled by the reduced chi-square.

Also provides the binomial standard error and the CSV reader/writers shared
by the experiment runner.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 500
STEP_TOLERANCE = 1e-10
MAX_EXPONENT = 700.0
CONDITION_LIMIT = 1e10
PEAK_TO_MEDIAN = 4.0
ZERO_PADDING = 16

FLAG_T_AT_BOUND = "T at bound"
FLAG_NON_IDENTIFIABLE = "non-identifiable"
FLAG_NOT_CONVERGED = "not converged"


class FitError(ValueError):
    """Raised when a fit cannot be attempted (too few points, no signal)."""


@dataclass(frozen=True)
class FitResult:
    """
    Outcome of a fit.

    params and stderr share keys; flags collects soft warnings that do not
    stop the fit ("T at bound", "non-identifiable", "not converged").
    """

    params: Dict[str, float]
    stderr: Dict[str, float]
    residual_norm: float
    converged: bool
    flags: Tuple[str, ...] = field(default_factory=tuple)

    @property
    def identifiable(self) -> bool:
        return FLAG_NON_IDENTIFIABLE not in self.flags


# ============================================================================
# MODELS AND JACOBIANS
# ============================================================================

def _decay(t: np.ndarray, scale: float) -> np.ndarray:
    if scale == 0:
        return np.where(t == 0, 1.0, 0.0)
    return np.exp(np.clip(-t / scale, -MAX_EXPONENT, MAX_EXPONENT))


def _rate_term(t: np.ndarray, e: np.ndarray, scale: float) -> np.ndarray:
    if scale == 0:
        return np.zeros_like(t)
    return e * t / scale ** 2


def exponential_offset_model(t: np.ndarray, a: float, b: float, T: float) -> np.ndarray:
    return a + b * _decay(np.asarray(t, dtype=float), T)


def exponential_offset_jacobian(t: np.ndarray, a: float, b: float, T: float) -> np.ndarray:
    """Columns d/dA, d/dB, d/dT."""
    t = np.asarray(t, dtype=float)
    e = _decay(t, T)
    return np.column_stack([np.ones_like(t), e, b * _rate_term(t, e, T)])


def pure_exponential_model(t: np.ndarray, c: float, tau: float) -> np.ndarray:
    return c * _decay(np.asarray(t, dtype=float), tau)


def pure_exponential_jacobian(t: np.ndarray, c: float, tau: float) -> np.ndarray:
    """Columns d/dC, d/dtau."""
    t = np.asarray(t, dtype=float)
    e = _decay(t, tau)
    return np.column_stack([e, c * _rate_term(t, e, tau)])


def rabi_model(t: np.ndarray, omega: float, amplitude: float, offset: float) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return offset + amplitude * np.sin(omega * t / 2) ** 2


def rabi_jacobian(t: np.ndarray, omega: float, amplitude: float, offset: float) -> np.ndarray:
    """Columns d/dOmega, d/damplitude, d/doffset."""
    t = np.asarray(t, dtype=float)
    return np.column_stack([
        amplitude * np.sin(omega * t) * t / 2,
        np.sin(omega * t / 2) ** 2,
        np.ones_like(t),
    ])


# ============================================================================
# HELPERS
# ============================================================================

def binomial_stderr(p_hat, n: int):
    """
    Standard error sqrt(p (1 - p) / n) of a binomial proportion.

    Args:
        p_hat: Estimated probability (scalar or array) in [0, 1]
        n: Number of trials, n >= 1
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    p = np.asarray(p_hat, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p_hat must lie in [0, 1]")
    result = np.sqrt(p * (1 - p) / n)
    return float(result) if result.ndim == 0 else result


def sigma_floor(stderr: Sequence[float], reps: Sequence[int]) -> np.ndarray:
    """Replace zero binomial errors with 1 / (2 reps) so every point keeps a finite weight."""
    stderr = np.asarray(stderr, dtype=float)
    reps = np.broadcast_to(np.asarray(reps, dtype=float), stderr.shape)
    floor = np.where(reps > 0, 1.0 / (2.0 * np.maximum(reps, 1.0)), 1.0)
    return np.where(stderr > 0, stderr, floor)


def _prepare(times, values, sigmas, min_points: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    if t.shape != y.shape or t.ndim != 1:
        raise ValueError("times and values must be 1D arrays of equal length")
    if len(t) < min_points:
        raise FitError(f"underdetermined: {len(t)} points, need at least {min_points}")
    s = np.ones_like(y) if sigmas is None else np.asarray(sigmas, dtype=float)
    if s.shape != y.shape:
        raise ValueError("sigmas must match values")
    if np.any(~(s > 0)):
        raise ValueError("sigmas must be > 0")
    order = np.argsort(t, kind="stable")
    return t[order], y[order], s[order]


def _weighted_fit(
    model: Callable[..., np.ndarray],
    jacobian: Callable[..., np.ndarray],
    names: Sequence[str],
    t: np.ndarray,
    y: np.ndarray,
    sigma: np.ndarray,
    initial: Sequence[float],
    absolute_sigma: bool = True,
) -> Tuple[np.ndarray, np.ndarray, float, bool, np.ndarray]:
    """Run Levenberg-Marquardt; returns (params, stderr, residual_norm, converged, weighted J)."""

    def residuals(p: np.ndarray) -> np.ndarray:
        return (model(t, *p) - y) / sigma

    def weighted_jacobian(p: np.ndarray) -> np.ndarray:
        return jacobian(t, *p) / sigma[:, None]

    result = least_squares(
        residuals, np.asarray(initial, dtype=float), jac=weighted_jacobian, method="lm",
        xtol=STEP_TOLERANCE, ftol=1e-12, max_nfev=MAX_ITERATIONS,
    )
    jac = weighted_jacobian(result.x)
    covariance = np.linalg.pinv(jac.T @ jac)
    dof = len(y) - len(initial)
    if not absolute_sigma and dof > 0:
        covariance *= float(result.fun @ result.fun) / dof
    stderr = np.sqrt(np.clip(np.diag(covariance), 0.0, None))
    converged = bool(result.success) and bool(np.all(np.isfinite(result.x)))
    logger.debug("fit %s -> %s (%s)", list(names), result.x, result.message)
    return result.x, stderr, float(np.linalg.norm(result.fun)), converged, jac


def _condition(jac: np.ndarray) -> float:
    singular = np.linalg.svd(jac, compute_uv=False)
    if singular[-1] <= 0:
        return math.inf
    return float(singular[0] / singular[-1])


def log_linear_fit(times: Sequence[float], values: Sequence[float]) -> Tuple[float, float]:
    """
    Closed-form fit of C exp(-t / tau) by a straight line through ln(y).

    Returns:
        (C, tau)

    Raises:
        FitError: if fewer than two points, any value <= 0 or no decay
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    if len(t) < 2:
        raise FitError("underdetermined: need at least 2 points")
    if np.any(y <= 0):
        raise FitError("log-linear fit needs strictly positive values")
    slope, intercept = np.polyfit(t, np.log(y), 1)
    if slope >= 0:
        raise FitError("data do not decay")
    return float(math.exp(intercept)), float(-1.0 / slope)


# ============================================================================
# FITS
# ============================================================================

def _offset_initial_guess(t: np.ndarray, y: np.ndarray) -> List[float]:
    n_edge = max(1, len(t) // 4)
    a0 = float(np.mean(y[-n_edge:]))
    b0 = float(np.mean(y[:n_edge]) - a0)
    span = float(t[-1] - t[0]) or 1.0
    t0 = span / 2
    if b0 != 0:
        excess = (y - a0) / b0
        usable = excess > 0.05
        if np.count_nonzero(usable) >= 2:
            slope = np.polyfit(t[usable], np.log(excess[usable]), 1)[0]
            if slope < 0:
                t0 = -1.0 / slope
    return [a0, b0, t0]


def fit_exponential_offset(times: Sequence[float], values: Sequence[float],
                           sigmas: Optional[Sequence[float]] = None) -> FitResult:
    """
    Fit F = A + B exp(-t / T).

    Args:
        times: Sample times (s)
        values: Observed values
        sigmas: One-sigma errors (> 0); unit weights when omitted

    Returns:
        FitResult with params {A, B, T}; flagged "T at bound" when T leaves
        (min spacing / 100, 100 x span) and "non-identifiable" when B is
        within two standard errors of zero or the Jacobian is singular

    Raises:
        FitError: with fewer than 4 points ("underdetermined")
    """
    t, y, s = _prepare(times, values, sigmas, 4)
    initial = _offset_initial_guess(t, y)
    params, stderr, norm, converged, jac = _weighted_fit(
        exponential_offset_model, exponential_offset_jacobian, ("A", "B", "T"), t, y, s, initial, sigmas is not None,
    )
    a, b, T = params
    span = float(t[-1] - t[0])
    spacing = np.diff(np.unique(t))
    min_dt = float(np.min(spacing)) if len(spacing) else span
    flags: List[str] = []
    if not converged:
        flags.append(FLAG_NOT_CONVERGED)
    if not (T > 0 and min_dt / 100 < T < 100 * span):
        flags.append(FLAG_T_AT_BOUND)
    if not abs(b) > 2 * stderr[1] or _condition(jac) > CONDITION_LIMIT:
        flags.append(FLAG_NON_IDENTIFIABLE)
    if flags:
        logger.warning("exponential fit flagged: %s", ", ".join(flags))
    return FitResult(
        params={"A": float(a), "B": float(b), "T": float(T)},
        stderr={"A": float(stderr[0]), "B": float(stderr[1]), "T": float(stderr[2])},
        residual_norm=norm,
        converged=converged,
        flags=tuple(flags),
    )


def fit_pure_exponential(times: Sequence[float], values: Sequence[float],
                         sigmas: Optional[Sequence[float]] = None) -> FitResult:
    """
    Fit N = C exp(-t / tau), seeded by the log-linear closed form.

    Raises:
        FitError: with fewer than 2 points ("underdetermined")
    """
    t, y, s = _prepare(times, values, sigmas, 2)
    positive = y > 0
    try:
        initial = list(log_linear_fit(t[positive], y[positive]))
    except FitError:
        initial = [float(y[0]) or 1.0, float(t[-1] - t[0]) / 2 or 1.0]
    params, stderr, norm, converged, jac = _weighted_fit(
        pure_exponential_model, pure_exponential_jacobian, ("C", "tau"), t, y, s, initial, sigmas is not None,
    )
    c, tau = params
    flags: List[str] = []
    if not converged:
        flags.append(FLAG_NOT_CONVERGED)
    if not tau > 0:
        flags.append(FLAG_T_AT_BOUND)
    if _condition(jac) > CONDITION_LIMIT:
        flags.append(FLAG_NON_IDENTIFIABLE)
    return FitResult(
        params={"C": float(c), "tau": float(tau)},
        stderr={"C": float(stderr[0]), "tau": float(stderr[1])},
        residual_norm=norm,
        converged=converged,
        flags=tuple(flags),
    )


def dominant_angular_frequency(times: Sequence[float], values: Sequence[float]) -> float:
    """
    Angular frequency of the largest peak in the zero-padded spectrum of the
    mean-removed data.

    Raises:
        FitError: "no oscillation detected" when the peak does not stand
            above PEAK_TO_MEDIAN times the median spectral amplitude
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    dt = float(np.median(np.diff(t)))
    if not dt > 0:
        raise FitError("no oscillation detected: degenerate time grid")
    detrended = y - np.mean(y)
    n_fft = ZERO_PADDING * len(y)
    spectrum = np.abs(np.fft.rfft(detrended, n=n_fft))[1:]
    frequencies = np.fft.rfftfreq(n_fft, d=dt)[1:]
    peak = int(np.argmax(spectrum))
    scale = max(float(np.max(np.abs(y))), 1.0)
    if spectrum[peak] <= 1e-9 * scale * len(y) or spectrum[peak] < PEAK_TO_MEDIAN * np.median(spectrum):
        raise FitError("no oscillation detected")
    return 2 * math.pi * float(frequencies[peak])


def fit_rabi(times: Sequence[float], populations: Sequence[float],
             sigmas: Optional[Sequence[float]] = None) -> FitResult:
    """
    Fit P = offset + amplitude sin^2(Omega t / 2).

    The initial Omega comes from the dominant spectral peak; amplitude and
    offset start from the data range.

    Raises:
        FitError: with fewer than 6 points or when no oscillation is found
    """
    t, y, s = _prepare(times, populations, sigmas, 6)
    omega0 = dominant_angular_frequency(t, y)
    initial = [omega0, float(np.max(y) - np.min(y)), float(np.min(y))]
    params, stderr, norm, converged, jac = _weighted_fit(
        rabi_model, rabi_jacobian, ("Omega", "amplitude", "offset"), t, y, s, initial, sigmas is not None,
    )
    flags: List[str] = [] if converged else [FLAG_NOT_CONVERGED]
    if _condition(jac) > CONDITION_LIMIT:
        flags.append(FLAG_NON_IDENTIFIABLE)
    omega, amplitude, offset = params
    return FitResult(
        params={"Omega": float(abs(omega)), "amplitude": float(amplitude), "offset": float(offset)},
        stderr={"Omega": float(stderr[0]), "amplitude": float(stderr[1]), "offset": float(stderr[2])},
        residual_norm=norm,
        converged=converged,
        flags=tuple(flags),
    )


FIT_MODELS: Dict[str, Callable[..., FitResult]] = {
    "exponential-offset": fit_exponential_offset,
    "pure-exponential": fit_pure_exponential,
    "rabi": fit_rabi,
}


# ============================================================================
# CSV I/O
# ============================================================================

def format_value(value) -> str:
    """12 significant digits, '.' decimal separator."""
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return format(float(value), ".12g")


def write_result_csv(path: str, header: Sequence[str], rows) -> None:
    """Write rows under a mandatory header with '\\n' line endings."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])


def write_fit_csv(path: str, fit: FitResult) -> None:
    """Write a fit as `param,value,stderr`."""
    write_result_csv(path, ("param", "value", "stderr"),
                     ((name, fit.params[name], fit.stderr[name]) for name in fit.params))


def read_result_csv(path: str) -> Dict[str, np.ndarray]:
    """
    Read a numeric CSV written by the runner into one array per column.

    Raises:
        ValueError: on a missing header, ragged rows or non-numeric cells
    """
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if not header:
            raise ValueError(f"{path}: missing header row")
        columns: Dict[str, List[float]] = {name: [] for name in header}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: line {line_no}: expected {len(header)} fields, got {len(row)}")
            for name, cell in zip(header, row):
                try:
                    columns[name].append(float(cell))
                except ValueError:
                    raise ValueError(f"{path}: line {line_no}: non-numeric value {cell!r} in column {name}")
    return {name: np.asarray(values) for name, values in columns.items()}
