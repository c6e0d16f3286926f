"""
Photon-Count Readout

State-dependent fluorescence statistics and threshold discrimination:
- Mean counts per detection window for bright and dark ions
- Exponential decay of the bright counts while sympathetic cooling is off
- Poisson shot noise and the misclassification-minimizing threshold
- Readout-error curves at a threshold fixed at its t = 0 optimum
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.stats import poisson

from decay_fitting import binomial_stderr
from storage_memory import ExperimentResult

logger = logging.getLogger(__name__)

DEFAULT_BRIGHT_RATE = 20.0
DEFAULT_DARK_RATE = 1.0
DEFAULT_HEATING_TAU = 0.256
SCAN_WIDTH = 10.0


class CountState(Enum):
    BRIGHT = "Bright"
    DARK = "Dark"


@dataclass(frozen=True)
class DetectionModel:
    """
    Count rates per detection window and the heating time constant.

    With cooling_on the rates are time independent; otherwise the bright
    mean decays as e^{-t / heating_tau} while the dark mean stays put.
    """

    bright_rate: float = DEFAULT_BRIGHT_RATE
    dark_rate: float = DEFAULT_DARK_RATE
    heating_tau: float = DEFAULT_HEATING_TAU
    cooling_on: bool = False

    def __post_init__(self):
        if not self.dark_rate >= 0:
            raise ValueError("dark_rate must be >= 0")
        if not self.bright_rate > self.dark_rate:
            raise ValueError("bright_rate must be > dark_rate")
        if not self.heating_tau > 0:
            raise ValueError("heating_tau must be > 0")


@dataclass(frozen=True)
class ReadoutOutcome:
    counts: int
    classified: CountState


def mean_counts(model: DetectionModel, t: float, true_state: CountState = CountState.BRIGHT) -> float:
    """Mean photon count of an ion in ``true_state`` after t seconds."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if true_state is CountState.DARK:
        return model.dark_rate
    if model.cooling_on:
        return model.bright_rate
    return model.bright_rate * math.exp(-t / model.heating_tau)


def sample_counts(mean: float, rng: np.random.Generator, size: Optional[int] = None):
    """Poisson-distributed count(s) with the given mean."""
    if not mean >= 0:
        raise ValueError("mean must be >= 0")
    return rng.poisson(mean, size)


def classify_counts(counts: int, threshold: int) -> ReadoutOutcome:
    """Bright when counts reach the threshold."""
    state = CountState.BRIGHT if counts >= threshold else CountState.DARK
    return ReadoutOutcome(int(counts), state)


def _below(n, mean: float):
    """P(N < n) for N ~ Poisson(mean)."""
    n = np.asarray(n)
    if mean == 0:
        return np.where(n > 0, 1.0, 0.0)
    return poisson.cdf(n - 1, mean)


def readout_error(bright_mean: float, dark_mean: float, threshold):
    """
    Average misclassification 1/2 [P(N < n | bright) + P(N >= n | dark)].

    Args:
        bright_mean: Mean counts of a bright ion
        dark_mean: Mean counts of a dark ion
        threshold: Threshold n (scalar or array); counts >= n read as bright
    """
    value = 0.5 * (_below(threshold, bright_mean) + 1.0 - _below(threshold, dark_mean))
    return float(value) if np.ndim(value) == 0 else value


def optimal_threshold(bright_rate: float, dark_rate: float) -> Tuple[int, float]:
    """
    Exhaustive threshold scan over 0..ceil(bright + 10 sqrt(bright)).

    Returns:
        (threshold, error) with the lowest threshold among ties
    """
    if not dark_rate >= 0 or not bright_rate > dark_rate:
        raise ValueError("need bright_rate > dark_rate >= 0")
    upper = int(math.ceil(bright_rate + SCAN_WIDTH * math.sqrt(bright_rate)))
    thresholds = np.arange(0, upper + 1)
    errors = readout_error(bright_rate, dark_rate, thresholds)
    best = int(np.argmin(errors))
    return int(thresholds[best]), float(errors[best])


def readout_error_curve(model: DetectionModel, times: Sequence[float],
                        fixed_threshold: Optional[int] = None) -> ExperimentResult:
    """
    Misclassification probability versus time at a fixed threshold.

    The threshold defaults to the optimum for the t = 0 count rates.
    """
    t = np.asarray(times, dtype=float)
    if t.ndim != 1 or len(t) == 0:
        raise ValueError("times must be a non-empty list")
    if fixed_threshold is None:
        fixed_threshold, _ = optimal_threshold(
            mean_counts(model, 0.0, CountState.BRIGHT), mean_counts(model, 0.0, CountState.DARK)
        )
    errors = np.array([
        readout_error(mean_counts(model, t_i, CountState.BRIGHT), mean_counts(model, t_i, CountState.DARK),
                      fixed_threshold)
        for t_i in t
    ])
    logger.info("readout error curve at threshold %d over %d times", fixed_threshold, len(t))
    return ExperimentResult(t, errors, np.zeros_like(errors), 0)


def simulate_readout(model: DetectionModel, t: float, threshold: int, reps: int,
                     rng: np.random.Generator) -> Tuple[float, float]:
    """
    Monte Carlo misclassification rate with reps bright and reps dark shots.

    Returns:
        (error, stderr)
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    bright = sample_counts(mean_counts(model, t, CountState.BRIGHT), rng, reps)
    dark = sample_counts(mean_counts(model, t, CountState.DARK), rng, reps)
    wrong = np.count_nonzero(bright < threshold) + np.count_nonzero(dark >= threshold)
    error = wrong / (2 * reps)
    return error, binomial_stderr(error, 2 * reps)
