"""
SK1 Composite Pulses

SU(2) rotation algebra for a single qubit driven by a global microwave:
- Rotation unitaries R(theta, phi) about an equatorial axis
- Pulse-area error modeling, theta -> theta (1 + epsilon)
- SK1 composite-pulse construction and state-transfer fidelity
- Rabi oscillations with a geometric per-site Rabi-frequency profile

Pulses in a sequence are applied left to right in time, so the sequence
unitary is U = R_n ... R_2 R_1.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

KET_0 = np.array([1.0, 0.0], dtype=complex)
KET_1 = np.array([0.0, 1.0], dtype=complex)

Unitary2 = np.ndarray


class SK1PhaseError(ValueError):
    """Raised when the SK1 correction phase arccos(-theta / 4 pi) is undefined."""

    def __init__(self, theta: float):
        super().__init__(f"SK1 phase undefined for theta = {theta:.6g} rad (must be <= 4 pi)")
        self.theta = theta


@dataclass(frozen=True)
class Pulse:
    """
    Rotation by ``theta`` about the equatorial axis at phase ``phi``.

    A negative angle is stored as its positive counterpart with phi + pi.
    """

    theta: float
    phi: float = 0.0

    def __post_init__(self):
        if self.theta < 0:
            object.__setattr__(self, "theta", -float(self.theta))
            object.__setattr__(self, "phi", float(self.phi) + math.pi)


@dataclass(frozen=True)
class PulseSequence:
    pulses: Tuple[Pulse, ...]

    def __post_init__(self):
        object.__setattr__(self, "pulses", tuple(self.pulses))
        if not self.pulses:
            raise ValueError("pulse sequence must not be empty")

    def __len__(self) -> int:
        return len(self.pulses)

    def __iter__(self):
        return iter(self.pulses)


@dataclass(frozen=True)
class RabiProfile:
    """
    Spatial Rabi-frequency profile of a global drive.

    omega0 is the angular Rabi frequency at the reference ion (rad/s);
    gradient_per_site is the fractional change per ion spacing, so site k
    sees omega0 (1 + gradient_per_site)^k.
    """

    omega0: float
    gradient_per_site: float = 0.0

    def __post_init__(self):
        if not self.omega0 > 0:
            raise ValueError("omega0 must be > 0")
        if not abs(self.gradient_per_site) < 1:
            raise ValueError("|gradient_per_site| must be < 1")


# ============================================================================
# ROTATIONS
# ============================================================================

def rotation_unitary(pulse: Pulse) -> Unitary2:
    """
    R(theta, phi) = [[cos(theta/2), -i e^{-i phi} sin(theta/2)],
                     [-i e^{i phi} sin(theta/2), cos(theta/2)]]
    """
    c = math.cos(pulse.theta / 2)
    s = math.sin(pulse.theta / 2)
    return np.array(
        [[c, -1j * np.exp(-1j * pulse.phi) * s],
         [-1j * np.exp(1j * pulse.phi) * s, c]],
        dtype=complex,
    )


def sequence_unitary(sequence: PulseSequence, epsilon: float = 0.0) -> Unitary2:
    """
    Product of the sequence's rotations with a common fractional area error.

    Every pulse sees the same epsilon: the error is a per-ion Rabi-frequency
    miscalibration shared by all pulses in one shot.
    """
    if not epsilon > -1:
        raise ValueError("epsilon must be > -1")
    unitary = np.eye(2, dtype=complex)
    for pulse in sequence:
        unitary = rotation_unitary(Pulse(pulse.theta * (1 + epsilon), pulse.phi)) @ unitary
    return unitary


def is_unitary(u: Unitary2, tol: float = 1e-12) -> bool:
    return bool(np.linalg.norm(u.conj().T @ u - np.eye(2), ord="fro") < tol)


def phase_insensitive_overlap(u: Unitary2, v: Unitary2) -> float:
    """|Tr(U^dagger V)| / 2, equal to 1 iff U and V agree up to a global phase."""
    return float(abs(np.trace(u.conj().T @ v)) / 2)


def average_gate_fidelity(u: Unitary2, v: Unitary2) -> float:
    """Average gate fidelity (|Tr(U^dagger V)|^2 + 2) / 6 between two qubit unitaries."""
    return float((abs(np.trace(u.conj().T @ v)) ** 2 + 2) / 6)


# ============================================================================
# SK1
# ============================================================================

def sk1_phase(theta: float) -> float:
    """Correction phase phi1 = arccos(-theta / (4 pi))."""
    if theta > 4 * math.pi:
        raise SK1PhaseError(theta)
    return math.acos(-theta / (4 * math.pi))


def sk1_sequence(target: Pulse) -> PulseSequence:
    """
    SK1 implementation of ``target``: R(theta, phi), R(2pi, phi - phi1),
    R(2pi, phi + phi1). At zero area error the product equals the target
    rotation; the first-order area error cancels.

    Raises:
        SK1PhaseError: for theta > 4 pi
    """
    phi1 = sk1_phase(target.theta)
    return PulseSequence((
        Pulse(target.theta, target.phi),
        Pulse(2 * math.pi, target.phi - phi1),
        Pulse(2 * math.pi, target.phi + phi1),
    ))


def single_sequence(target: Pulse) -> PulseSequence:
    return PulseSequence((target,))


# ============================================================================
# FIDELITY
# ============================================================================

def transfer_fidelity(u: Unitary2, target: Pulse, initial_state: Optional[Sequence[complex]] = None) -> float:
    """
    State-transfer fidelity |<psi_target| U |psi_init>|^2 where
    psi_target = R(target) psi_init.

    Args:
        u: Implemented unitary
        target: Intended rotation
        initial_state: Normalized qubit state (default |0>)
    """
    psi = KET_0 if initial_state is None else np.asarray(initial_state, dtype=complex)
    if abs(np.vdot(psi, psi) - 1) > 1e-9:
        raise ValueError("initial_state must be normalized")
    ideal = rotation_unitary(target) @ psi
    overlap = abs(np.vdot(ideal, u @ psi)) ** 2
    return float(min(max(overlap, 0.0), 1.0))


def apply_spam(fidelity: np.ndarray, spam_error: float) -> np.ndarray:
    """Measured fidelity when each outcome is flipped with probability spam_error."""
    if not 0 <= spam_error < 0.5:
        raise ValueError("spam_error must lie in [0, 0.5)")
    return fidelity * (1 - spam_error) + (1 - fidelity) * spam_error


def fidelity_scan(
    epsilons: Iterable[float],
    target: Pulse = Pulse(math.pi, 0.0),
    spam_error: float = 0.0,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Transfer fidelity from |0> of a single pulse and of its SK1 version
    across a sweep of area errors.

    Returns:
        (epsilons, single_pulse_fidelity, sk1_fidelity)
    """
    eps = np.asarray(list(epsilons), dtype=float)
    single = single_sequence(target)
    composite = sk1_sequence(target)
    single_f = np.array([transfer_fidelity(sequence_unitary(single, e), target) for e in eps])
    sk1_f = np.array([transfer_fidelity(sequence_unitary(composite, e), target) for e in eps])
    if spam_error:
        single_f = apply_spam(single_f, spam_error)
        sk1_f = apply_spam(sk1_f, spam_error)
    return eps, single_f, sk1_f


# ============================================================================
# RABI NONUNIFORMITY
# ============================================================================

def site_rabi_frequency(profile: RabiProfile, site: float) -> float:
    """Angular Rabi frequency omega0 (1 + g)^site at an index offset from the reference ion."""
    return profile.omega0 * (1 + profile.gradient_per_site) ** site


def site_area_error(profile: RabiProfile, site: float) -> float:
    """Area error at ``site`` of a pulse calibrated on the reference ion."""
    return (1 + profile.gradient_per_site) ** site - 1


def gradient_from_endpoints(omega_a: float, omega_b: float, sites: int) -> float:
    """Per-site gradient g with omega_b = omega_a (1 + g)^sites."""
    if omega_a <= 0 or omega_b <= 0 or sites <= 0:
        raise ValueError("frequencies and site separation must be positive")
    return (omega_b / omega_a) ** (1.0 / sites) - 1


def rabi_population(profile: RabiProfile, site: float, duration: float) -> float:
    """Bright population sin^2(Omega_site t / 2) after driving |0> for ``duration`` seconds."""
    if duration < 0:
        raise ValueError("duration must be >= 0")
    omega = site_rabi_frequency(profile, site)
    return float(math.sin(omega * duration / 2) ** 2)


def site_fidelity_profile(
    profile: RabiProfile,
    sites: Iterable[int],
    target: Pulse = Pulse(math.pi, 0.0),
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Single-pulse and SK1 transfer fidelity of a global pulse at each site.

    Returns:
        (sites, single_pulse_fidelity, sk1_fidelity)
    """
    site_array = np.asarray(list(sites), dtype=int)
    errors = [site_area_error(profile, int(k)) for k in site_array]
    _, single_f, sk1_f = fidelity_scan(errors, target)
    logger.debug("site fidelity profile over %d sites", len(site_array))
    return site_array, single_f, sk1_f
