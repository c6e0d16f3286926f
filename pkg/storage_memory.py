"""
Spin-Echo Storage Memory

Shot-by-shot simulation of the storage experiment on one qubit of the
crystal:
- SK1 pi/2 preparation in one of four equatorial bases
- Storage for t/2, SK1 pi echo pulse, storage for t/2
- SK1 pi/2 reversal and bright/dark measurement with SPAM flips

Dephasing is either phenomenological (e^{-t/T2}) or Ornstein-Uhlenbeck
frequency noise with analytic Ramsey and echo coherence functions.
Relaxation moves bright population to dark only. Per shot, dephasing is a
single Gaussian phase whose variance reproduces the coherence factor, and
relaxation is an amplitude-damping quantum jump over each storage interval.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import trapezoid

from composite_pulses import KET_0, Pulse, sequence_unitary, sk1_sequence
from decay_fitting import binomial_stderr

logger = logging.getLogger(__name__)

DEFAULT_REPS = 200
DEFAULT_TRAJECTORIES = 10_000
MIN_COHERENCE = 1e-300
SERIES_CUTOFF = 1e-3


# ============================================================================
# NOISE MODEL
# ============================================================================

@dataclass(frozen=True)
class PhenomenologicalDephasing:
    """Coherence e^{-t/T2}, identical with and without echo."""

    t2: float

    def __post_init__(self):
        if not self.t2 > 0:
            raise ValueError("t2 must be > 0")


@dataclass(frozen=True)
class OrnsteinUhlenbeckDephasing:
    """Stationary Gaussian detuning noise with rms sigma (rad/s) and correlation time tau_c (s)."""

    sigma: float
    tau_c: float

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError("sigma must be >= 0")
        if not self.tau_c > 0:
            raise ValueError("tau_c must be > 0")


Dephasing = Union[PhenomenologicalDephasing, OrnsteinUhlenbeckDephasing]


@dataclass(frozen=True)
class NoiseModel:
    """
    Storage noise.

    relaxation_time is the bright -> dark decay constant (s, may be inf);
    spam_error flips each measured bit with that probability; t2_drift is
    an optional fractional per-point Gaussian jitter of a phenomenological
    T2 (0 disables it).
    """

    dephasing: Dephasing
    relaxation_time: float = math.inf
    spam_error: float = 0.0
    t2_drift: float = 0.0

    def __post_init__(self):
        if not isinstance(self.dephasing, (PhenomenologicalDephasing, OrnsteinUhlenbeckDephasing)):
            raise ValueError("dephasing must be PhenomenologicalDephasing or OrnsteinUhlenbeckDephasing")
        if not self.relaxation_time > 0:
            raise ValueError("relaxation_time must be > 0")
        if not 0 <= self.spam_error < 0.5:
            raise ValueError("spam_error must lie in [0, 0.5)")
        if not self.t2_drift >= 0:
            raise ValueError("t2_drift must be >= 0")


class StorageBasis(Enum):
    """Equatorial storage basis, valued by the microwave phase that prepares it."""

    PLUS = 0.0
    MINUS = math.pi
    L = math.pi / 2
    R = 3 * math.pi / 2

    @property
    def phase(self) -> float:
        return float(self.value)


BASIS_CYCLE: Tuple[StorageBasis, ...] = (StorageBasis.PLUS, StorageBasis.MINUS, StorageBasis.L, StorageBasis.R)


@dataclass(frozen=True)
class ExperimentResult:
    """
    One measured curve: per-time estimate with its standard error.

    repetitions is the shot count behind every point (0 for analytic curves).
    """

    times: np.ndarray
    estimates: np.ndarray
    stderr: np.ndarray
    repetitions: int

    def __post_init__(self):
        for name in ("times", "estimates", "stderr"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not len(self.times) == len(self.estimates) == len(self.stderr):
            raise ValueError("times, estimates and stderr must have equal lengths")
        if np.any((self.estimates < 0) | (self.estimates > 1)):
            raise ValueError("estimates must lie in [0, 1]")
        if np.any(self.stderr < 0):
            raise ValueError("stderr must be >= 0")
        if self.repetitions < 0:
            raise ValueError("repetitions must be >= 0")

    def __len__(self) -> int:
        return len(self.times)


# ============================================================================
# COHERENCE
# ============================================================================

def _ramsey_exponent(x: np.ndarray) -> np.ndarray:
    """x - 1 + e^{-x}."""
    series = x ** 2 / 2 - x ** 3 / 6 + x ** 4 / 24
    return np.where(x < SERIES_CUTOFF, series, x + np.expm1(-x))


def _echo_exponent(x: np.ndarray) -> np.ndarray:
    """x - 3 + 4 e^{-x/2} - e^{-x}."""
    series = x ** 3 / 12 - x ** 4 / 32 + 7 * x ** 5 / 960
    return np.where(x < SERIES_CUTOFF, series, x + 4 * np.expm1(-x / 2) - np.expm1(-x))


def _dephasing_coherence(dephasing: Dephasing, t, echo: bool):
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("t must be >= 0")
    if isinstance(dephasing, PhenomenologicalDephasing):
        value = np.exp(-t_arr / dephasing.t2)
    else:
        x = t_arr / dephasing.tau_c
        exponent = _echo_exponent(x) if echo else _ramsey_exponent(x)
        value = np.exp(-(dephasing.sigma * dephasing.tau_c) ** 2 * exponent)
    value = np.clip(value, 0.0, 1.0)
    return float(value) if value.ndim == 0 else value


def coherence_factor(noise: NoiseModel, t, echo: bool = True):
    """
    Storage coherence C(t) in [0, 1].

    Phenomenological: e^{-t/T2} with or without echo. Ornstein-Uhlenbeck
    with x = t / tau_c:
        Ramsey: exp(-sigma^2 tau_c^2 (x - 1 + e^{-x}))
        Echo:   exp(-sigma^2 tau_c^2 (x - 3 + 4 e^{-x/2} - e^{-x}))

    Args:
        noise: Noise model
        t: Storage time(s) in s, >= 0
        echo: Whether a refocusing pi pulse sits at t/2
    """
    return _dephasing_coherence(noise.dephasing, t, echo)


def simulate_ou_coherence(
    noise: NoiseModel,
    times: Sequence[float],
    echo: bool,
    rng: np.random.Generator,
    n_trajectories: int = DEFAULT_TRAJECTORIES,
    steps: Optional[int] = None,
    batch_size: int = 2000,
) -> np.ndarray:
    """
    Monte Carlo coherence of Ornstein-Uhlenbeck noise by path integration.

    Each trajectory samples a stationary OU detuning path with the exact
    discrete update, integrates the phase with the trapezoid rule (sign
    flipped after t/2 when echo is set) and contributes cos(phase).

    Args:
        noise: Noise model with OrnsteinUhlenbeckDephasing
        times: Storage times (s)
        echo: Flip the phase sign at t/2
        rng: Random generator
        n_trajectories: Paths per time point
        steps: Grid intervals per path (even); default resolves tau_c / 10
        batch_size: Paths integrated at once

    Returns:
        Array of mean cos(phase), one per time
    """
    dephasing = noise.dephasing
    if not isinstance(dephasing, OrnsteinUhlenbeckDephasing):
        raise ValueError("Monte Carlo oracle needs Ornstein-Uhlenbeck dephasing")
    sigma, tau_c = dephasing.sigma, dephasing.tau_c
    results = []
    for t in np.asarray(times, dtype=float):
        if t <= 0:
            results.append(1.0)
            continue
        n_steps = steps if steps is not None else max(200, int(math.ceil(10 * t / tau_c)))
        n_steps += n_steps % 2
        dt = t / n_steps
        decay = math.exp(-dt / tau_c)
        kick = sigma * math.sqrt(-math.expm1(-2 * dt / tau_c))
        mid = n_steps // 2
        total = 0.0
        remaining = n_trajectories
        while remaining > 0:
            batch = min(batch_size, remaining)
            path = np.empty((batch, n_steps + 1))
            path[:, 0] = sigma * rng.standard_normal(batch)
            for k in range(n_steps):
                path[:, k + 1] = decay * path[:, k] + kick * rng.standard_normal(batch)
            if echo:
                phase = trapezoid(path[:, :mid + 1], dx=dt, axis=1) - trapezoid(path[:, mid:], dx=dt, axis=1)
            else:
                phase = trapezoid(path, dx=dt, axis=1)
            total += float(np.sum(np.cos(phase)))
            remaining -= batch
        results.append(total / n_trajectories)
    return np.asarray(results)


# ============================================================================
# SHOT SIMULATION
# ============================================================================

@lru_cache(maxsize=256)
def _shot_unitaries(phase: float, epsilon: float, echo: bool) -> Tuple[np.ndarray, Optional[np.ndarray], np.ndarray]:
    """(preparation, echo or None, reversal) SK1 unitaries at one area error."""
    prepare = sequence_unitary(sk1_sequence(Pulse(math.pi / 2, phase)), epsilon)
    refocus = sequence_unitary(sk1_sequence(Pulse(math.pi, phase)), epsilon) if echo else None
    reverse_phase = phase + math.pi if echo else phase
    reverse = sequence_unitary(sk1_sequence(Pulse(math.pi / 2, reverse_phase)), epsilon)
    return prepare, refocus, reverse


def _dephase(psi: np.ndarray, coherence: float, rng: np.random.Generator) -> np.ndarray:
    if coherence >= 1.0:
        return psi
    if coherence <= MIN_COHERENCE:
        alpha = rng.uniform(0.0, 2 * math.pi)
    else:
        alpha = math.sqrt(-2.0 * math.log(coherence)) * rng.standard_normal()
    return psi * np.array([np.exp(-0.5j * alpha), np.exp(0.5j * alpha)])


def _relax(psi: np.ndarray, duration: float, relaxation_time: float, rng: np.random.Generator) -> np.ndarray:
    """Amplitude-damping quantum jump over ``duration``."""
    if duration <= 0 or math.isinf(relaxation_time):
        return psi
    gamma = -math.expm1(-duration / relaxation_time)
    bright = abs(psi[1]) ** 2
    if rng.random() < gamma * bright:
        return KET_0.copy()
    damped = np.array([psi[0], psi[1] * math.sqrt(1 - gamma)])
    return damped / np.linalg.norm(damped)


def _measure(psi: np.ndarray, spam_error: float, rng: np.random.Generator) -> int:
    bit = int(rng.random() < abs(psi[1]) ** 2)
    if spam_error and rng.random() < spam_error:
        bit ^= 1
    return bit


def _storage_shot(noise: NoiseModel, coherence: float, t: float, basis: StorageBasis,
                  epsilon: float, rng: np.random.Generator, echo: bool) -> int:
    prepare, refocus, reverse = _shot_unitaries(basis.phase, float(epsilon), bool(echo))
    psi = prepare @ KET_0
    psi = _dephase(psi, coherence, rng)
    if echo:
        psi = _relax(psi, t / 2, noise.relaxation_time, rng)
        psi = refocus @ psi
        psi = _relax(psi, t / 2, noise.relaxation_time, rng)
    else:
        psi = _relax(psi, t, noise.relaxation_time, rng)
    psi = reverse @ psi
    return _measure(psi, noise.spam_error, rng)


def run_storage_shot(
    noise: NoiseModel,
    t: float,
    basis: StorageBasis,
    epsilon: float,
    rng: np.random.Generator,
    echo: bool = True,
) -> int:
    """
    Simulate one storage shot and return 1 for bright, 0 for dark.

    With echo: SK1(pi/2, phi) from |0>, storage t/2, SK1(pi, phi), storage
    t/2, SK1(pi/2, phi + pi). Without echo the storage lasts t and the
    closing pulse keeps phase phi, so an ideal shot still ends bright.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    coherence = coherence_factor(noise, t, echo)
    return _storage_shot(noise, coherence, t, basis, epsilon, rng, echo)


def expected_storage_fidelity(noise: NoiseModel, t, echo: bool = True):
    """Analytic bright probability s + (1 - 2s) (1 + C(t) e^{-t / (2 T1)}) / 2 at zero area error."""
    t_arr = np.asarray(t, dtype=float)
    relaxation = np.exp(-t_arr / (2 * noise.relaxation_time))
    p = 0.5 * (1 + coherence_factor(noise, t_arr, echo) * relaxation)
    value = noise.spam_error + (1 - 2 * noise.spam_error) * p
    return float(value) if np.ndim(value) == 0 else value


def expected_relaxation_population(noise: NoiseModel, t):
    """Analytic bright probability s + (1 - 2s) e^{-t / T1} of the relaxation sequence."""
    t_arr = np.asarray(t, dtype=float)
    value = noise.spam_error + (1 - 2 * noise.spam_error) * np.exp(-t_arr / noise.relaxation_time)
    return float(value) if np.ndim(value) == 0 else value


def _validate_grid(times: Sequence[float], reps: int) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    if t.ndim != 1 or len(t) == 0:
        raise ValueError("times must be a non-empty list")
    if np.any(t < 0):
        raise ValueError("times must be >= 0")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    return t


def _point_noise(noise: NoiseModel, rng: np.random.Generator) -> NoiseModel:
    """Apply the optional slow-drift jitter of T2 for one time point."""
    if noise.t2_drift <= 0 or not isinstance(noise.dephasing, PhenomenologicalDephasing):
        return noise
    factor = max(1.0 + noise.t2_drift * rng.standard_normal(), 1e-3)
    return NoiseModel(
        PhenomenologicalDephasing(noise.dephasing.t2 * factor),
        noise.relaxation_time, noise.spam_error, noise.t2_drift,
    )


def storage_curve(
    noise: NoiseModel,
    times: Sequence[float],
    reps: int = DEFAULT_REPS,
    epsilon: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    echo: bool = True,
) -> ExperimentResult:
    """
    Storage fidelity versus time.

    Every time point draws from its own child generator and cycles the four
    bases evenly (shot j uses basis j mod 4), so a point depends only on the
    seed, its index and the shot index.

    Args:
        noise: Noise model
        times: Storage times (s)
        reps: Shots per point
        epsilon: Pulse-area error shared by all pulses
        rng: Random generator (seeded by the caller)
        echo: Spin echo (default) or Ramsey storage
    """
    t = _validate_grid(times, reps)
    rng = rng if rng is not None else np.random.default_rng(0)
    estimates = np.empty(len(t))
    for i, (t_i, point_rng) in enumerate(zip(t, rng.spawn(len(t)))):
        point_noise = _point_noise(noise, point_rng)
        coherence = coherence_factor(point_noise, t_i, echo)
        bright = sum(
            _storage_shot(point_noise, coherence, t_i, BASIS_CYCLE[j % len(BASIS_CYCLE)], epsilon, point_rng, echo)
            for j in range(reps)
        )
        estimates[i] = bright / reps
    logger.info("storage curve: %d points x %d shots (echo=%s, epsilon=%g)", len(t), reps, echo, epsilon)
    return ExperimentResult(t, estimates, binomial_stderr(estimates, reps), reps)


def relaxation_curve(
    noise: NoiseModel,
    times: Sequence[float],
    reps: int = DEFAULT_REPS,
    rng: Optional[np.random.Generator] = None,
) -> ExperimentResult:
    """
    Bright-state population versus time without echo.

    |1> is prepared with an SK1 pi pulse from |0>, left for t and measured.
    """
    t = _validate_grid(times, reps)
    rng = rng if rng is not None else np.random.default_rng(0)
    prepare = sequence_unitary(sk1_sequence(Pulse(math.pi, 0.0)))
    estimates = np.empty(len(t))
    for i, (t_i, point_rng) in enumerate(zip(t, rng.spawn(len(t)))):
        bright = 0
        for _ in range(reps):
            psi = _relax(prepare @ KET_0, t_i, noise.relaxation_time, point_rng)
            bright += _measure(psi, noise.spam_error, point_rng)
        estimates[i] = bright / reps
    logger.info("relaxation curve: %d points x %d shots", len(t), reps)
    return ExperimentResult(t, estimates, binomial_stderr(estimates, reps), reps)
