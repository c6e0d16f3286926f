"""
Ion Crystal Equilibrium Solver

This module computes the potential energy landscape of an N-ion crystal in an
anisotropic trap and everything that follows from it:
- Total energy and its analytic gradient and Hessian
- Equilibrium configurations (quasi-Newton descent plus a Newton polish)
- Structural classification (linear chain, planar zigzag, other)
- Normal-mode spectrum of a stable equilibrium

The transverse confinement is harmonic (omega_x, omega_y). The axial
confinement is either harmonic or an even polynomial, which stands in for a
potential engineered with segmented electrodes.

Internally every length is measured in units of
    l = (q^2 / (4 pi eps0 m omega_ref^2))^(1/3)
and every energy in units of m omega_ref^2 l^2, so the reduced potential reads
    U = sum_i [(wx^2 x_i^2 + wy^2 y_i^2) / 2 + v(z_i)] + sum_{i<j} 1 / r_ij
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import constants
from scipy.linalg import eigh
from scipy.optimize import brentq, minimize

logger = logging.getLogger(__name__)

YB171_MASS = 170.936323 * constants.atomic_mass
ELEMENTARY_CHARGE = constants.e
COULOMB_CONSTANT = 1.0 / (4.0 * math.pi * constants.epsilon_0)

DEFAULT_GRADIENT_TOL = 1e-9
DEFAULT_MAX_ITERATIONS = 100_000
DEFAULT_STRUCTURE_TOL = 1e-4
DEFAULT_MODE_TOL = 1e-8

INITIAL_JITTER = 1e-3
MIN_SEPARATION = 1e-12
MAX_SADDLE_ESCAPES = 5
SADDLE_KICK = 1e-2
NEWTON_STEPS = 50


class DegenerateConfigurationError(ValueError):
    """Raised when two ions occupy the same position."""

    def __init__(self, message: str = "degenerate configuration"):
        super().__init__(message)


class ConvergenceError(RuntimeError):
    """Raised when the equilibrium search hits its iteration cap.

    The best configuration found so far is kept on ``best``.
    """

    def __init__(self, message: str, best: "CrystalConfiguration"):
        super().__init__(message)
        self.best = best


class UnstableConfigurationError(RuntimeError):
    """Raised when a configuration has a negative Hessian eigenvalue."""

    def __init__(self, min_eigenvalue: float):
        super().__init__(
            f"unstable configuration (most negative eigenvalue {min_eigenvalue:.6g} rad^2/s^2)"
        )
        self.min_eigenvalue = min_eigenvalue


# ============================================================================
# TRAP MODEL
# ============================================================================

@dataclass(frozen=True)
class HarmonicAxial:
    """Harmonic axial confinement with angular frequency omega_z (rad/s)."""

    omega_z: float

    def __post_init__(self):
        if not self.omega_z > 0:
            raise ValueError("omega_z must be > 0")

    def as_polynomial(self, mass: float) -> "PolynomialAxial":
        """Return the equivalent polynomial model, c2 = m omega_z^2 / 2."""
        return PolynomialAxial((0.5 * mass * self.omega_z ** 2,))


@dataclass(frozen=True)
class PolynomialAxial:
    """
    Even polynomial axial potential V(z) = c2 z^2 + c4 z^4 + c6 z^6 + ...

    ``coefficients`` holds (c2, c4, c6, ...) in J/m^k. The highest-order
    non-zero coefficient must be positive so that the potential confines.
    """

    coefficients: Tuple[float, ...]

    def __post_init__(self):
        coeffs = tuple(float(c) for c in self.coefficients)
        object.__setattr__(self, "coefficients", coeffs)
        if not coeffs:
            raise ValueError("axial polynomial needs at least one coefficient")
        if not all(math.isfinite(c) for c in coeffs):
            raise ValueError("axial coefficients must be finite")
        nonzero = [c for c in coeffs if c != 0.0]
        if not nonzero or nonzero[-1] <= 0:
            raise ValueError("axial potential is not confining: highest-order coefficient must be > 0")

    @property
    def powers(self) -> Tuple[int, ...]:
        return tuple(2 * (k + 1) for k in range(len(self.coefficients)))

    def energy(self, z: np.ndarray) -> np.ndarray:
        """Axial potential energy (J) at coordinates z (m)."""
        z = np.asarray(z, dtype=float)
        return sum(c * z ** p for c, p in zip(self.coefficients, self.powers))


AxialModel = Union[HarmonicAxial, PolynomialAxial]


@dataclass(frozen=True)
class TrapConfig:
    """
    Static trap description.

    omega_x, omega_y are transverse angular frequencies (rad/s); ``axial`` is
    the axial model; mass in kg, charge in C. ``omega_ref`` sets the unit of
    the internal dimensionless coordinates and defaults to omega_z for a
    harmonic axial model and to min(omega_x, omega_y) otherwise.
    ``cooling_detuning`` (rad/s) is recorded for documentation only.
    """

    omega_x: float
    omega_y: float
    axial: AxialModel
    mass: float = YB171_MASS
    charge: float = ELEMENTARY_CHARGE
    omega_ref: Optional[float] = None
    cooling_detuning: Optional[float] = None

    def __post_init__(self):
        if not self.omega_x > 0:
            raise ValueError("omega_x must be > 0")
        if not self.omega_y > 0:
            raise ValueError("omega_y must be > 0")
        if not self.mass > 0:
            raise ValueError("mass must be > 0")
        if self.charge == 0:
            raise ValueError("charge must be non-zero")
        if self.omega_ref is not None and not self.omega_ref > 0:
            raise ValueError("omega_ref must be > 0")
        if not isinstance(self.axial, (HarmonicAxial, PolynomialAxial)):
            raise ValueError("axial must be HarmonicAxial or PolynomialAxial")

    @property
    def reference_frequency(self) -> float:
        if self.omega_ref is not None:
            return self.omega_ref
        if isinstance(self.axial, HarmonicAxial):
            return self.axial.omega_z
        return min(self.omega_x, self.omega_y)

    @property
    def length_scale(self) -> float:
        """Characteristic length l (m)."""
        w = self.reference_frequency
        return (COULOMB_CONSTANT * self.charge ** 2 / (self.mass * w ** 2)) ** (1.0 / 3.0)

    @property
    def energy_scale(self) -> float:
        """Energy unit m omega_ref^2 l^2 (J)."""
        return self.mass * self.reference_frequency ** 2 * self.length_scale ** 2

    def axial_polynomial(self) -> PolynomialAxial:
        if isinstance(self.axial, HarmonicAxial):
            return self.axial.as_polynomial(self.mass)
        return self.axial


def characteristic_length(trap: TrapConfig) -> float:
    """Length unit l = (q^2 / (4 pi eps0 m omega_ref^2))^(1/3) in meters."""
    return trap.length_scale


# ============================================================================
# REDUCED POTENTIAL
# ============================================================================

class _ReducedPotential:
    """Energy, gradient and Hessian in dimensionless units on flat 3N vectors."""

    def __init__(self, trap: TrapConfig):
        w = trap.reference_frequency
        length = trap.length_scale
        self.wx2 = (trap.omega_x / w) ** 2
        self.wy2 = (trap.omega_y / w) ** 2
        polynomial = trap.axial_polynomial()
        self.powers = np.array(polynomial.powers, dtype=int)
        self.coefficients = np.array(
            [c * length ** p / trap.energy_scale for c, p in zip(polynomial.coefficients, polynomial.powers)]
        )

    # -- axial helpers -------------------------------------------------------

    def axial_energy(self, z: np.ndarray) -> np.ndarray:
        return np.sum(self.coefficients[:, None] * z[None, :] ** self.powers[:, None], axis=0)

    def axial_force_constant(self, z: np.ndarray) -> np.ndarray:
        """First derivative v'(z)."""
        return np.sum(
            (self.coefficients * self.powers)[:, None] * z[None, :] ** (self.powers[:, None] - 1), axis=0
        )

    def axial_curvature(self, z: np.ndarray) -> np.ndarray:
        """Second derivative v''(z)."""
        return np.sum(
            (self.coefficients * self.powers * (self.powers - 1))[:, None]
            * z[None, :] ** (self.powers[:, None] - 2),
            axis=0,
        )

    # -- pair geometry -------------------------------------------------------

    @staticmethod
    def _pairs(r: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        # diff_ijk = r_ik - r_jk
        diff = r[:, np.newaxis, :] - r[np.newaxis, :, :]
        dist = np.sqrt(np.sum(diff ** 2, axis=2))
        n = r.shape[0]
        if n > 1 and np.min(dist[~np.eye(n, dtype=bool)]) <= MIN_SEPARATION:
            raise DegenerateConfigurationError()
        np.fill_diagonal(dist, 1.0)
        invdist = 1.0 / dist
        np.fill_diagonal(invdist, 0.0)
        return diff, invdist

    # -- energy, gradient, Hessian -------------------------------------------

    def energy(self, x: np.ndarray) -> float:
        r = np.reshape(x, (-1, 3))
        _, invdist = self._pairs(r)
        trap = 0.5 * (self.wx2 * np.sum(r[:, 0] ** 2) + self.wy2 * np.sum(r[:, 1] ** 2))
        return float(trap + np.sum(self.axial_energy(r[:, 2])) + 0.5 * np.sum(invdist))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        r = np.reshape(x, (-1, 3))
        diff, invdist = self._pairs(r)
        grad = -np.sum(diff * (invdist ** 3)[:, :, np.newaxis], axis=1)
        grad[:, 0] += self.wx2 * r[:, 0]
        grad[:, 1] += self.wy2 * r[:, 1]
        grad[:, 2] += self.axial_force_constant(r[:, 2])
        return grad.ravel()

    def hessian(self, x: np.ndarray) -> np.ndarray:
        r = np.reshape(x, (-1, 3))
        n = r.shape[0]
        diff, invdist = self._pairs(r)
        hess = -3.0 * diff[:, :, :, np.newaxis] * diff[:, :, np.newaxis, :] \
            * (invdist ** 5)[:, :, np.newaxis, np.newaxis]
        hess[:, :, range(3), range(3)] += (invdist ** 3)[:, :, np.newaxis]
        hess[range(n), range(n), :, :] = -np.sum(hess, axis=1)
        hess[range(n), range(n), 0, 0] += self.wx2
        hess[range(n), range(n), 1, 1] += self.wy2
        hess[range(n), range(n), 2, 2] += self.axial_curvature(r[:, 2])
        return np.swapaxes(hess, 1, 2).reshape((3 * n, 3 * n))

    def density_half_length(self, n_ions: int) -> float:
        """
        Half-span estimate from a 1D local-density balance.

        The local ion density follows lambda(z) = (v(L) - v(z)) / (2 Lambda)
        with Lambda ~ ln N, and L is chosen so that it integrates to N.
        """
        if n_ions <= 1:
            return 0.0
        log_factor = max(math.log(n_ions), 1.0)

        def excess(half: float) -> float:
            count = np.sum(self.coefficients * half ** (self.powers + 1) * self.powers / (self.powers + 1))
            return float(count / log_factor - n_ions)

        upper = 1.0
        while excess(upper) < 0:
            upper *= 2.0
        return brentq(excess, 1e-9, upper)


def _as_positions(positions: Sequence) -> np.ndarray:
    r = np.asarray(positions, dtype=float)
    if r.size == 0 or r.size % 3 != 0:
        raise ValueError("positions must be an N x 3 array with N >= 1")
    return r.reshape(-1, 3)


# ============================================================================
# ENERGY AND DERIVATIVES (SI UNITS)
# ============================================================================

def total_energy(trap: TrapConfig, positions: Sequence) -> float:
    """
    Trap plus mutual Coulomb energy of the ions.

    Args:
        trap: Trap description
        positions: N x 3 ion coordinates (m)

    Returns:
        Energy in J

    Raises:
        DegenerateConfigurationError: if two ions coincide
    """
    length = trap.length_scale
    reduced = _ReducedPotential(trap).energy(_as_positions(positions).ravel() / length)
    return reduced * trap.energy_scale


def energy_gradient(trap: TrapConfig, positions: Sequence) -> np.ndarray:
    """
    Analytic gradient of total_energy.

    Args:
        trap: Trap description
        positions: N x 3 ion coordinates (m)

    Returns:
        N x 3 array in J/m
    """
    r = _as_positions(positions)
    length = trap.length_scale
    grad = _ReducedPotential(trap).gradient(r.ravel() / length)
    return grad.reshape(r.shape) * trap.energy_scale / length


def hessian(trap: TrapConfig, positions: Sequence) -> np.ndarray:
    """Analytic 3N x 3N Hessian of total_energy in J/m^2."""
    r = _as_positions(positions)
    length = trap.length_scale
    return _ReducedPotential(trap).hessian(r.ravel() / length) * trap.energy_scale / length ** 2


# ============================================================================
# EQUILIBRIUM SEARCH
# ============================================================================

@dataclass(frozen=True)
class CrystalConfiguration:
    """
    Equilibrium ion positions with convergence metadata.

    positions are in meters (N x 3), energy in J, gradient_norm in J/m.
    reduced_gradient_norm is the same norm in dimensionless units, the
    quantity the solver tolerance applies to.
    """

    positions: np.ndarray
    energy: float
    gradient_norm: float
    iterations: int
    length_scale: float
    reduced_gradient_norm: float

    @property
    def n_ions(self) -> int:
        return int(self.positions.shape[0])


def _initial_positions(potential: _ReducedPotential, n_ions: int, rng: np.random.Generator) -> np.ndarray:
    half = potential.density_half_length(n_ions)
    r = np.zeros((n_ions, 3))
    if n_ions > 1:
        r[:, 2] = np.linspace(-half, half, n_ions)
    # alternating signs seed the zigzag mode
    signs = (-1.0) ** np.arange(n_ions)
    magnitudes = INITIAL_JITTER * (0.5 + 0.5 * rng.random((n_ions, 2)))
    r[:, 0] = signs * magnitudes[:, 0]
    r[:, 1] = signs * magnitudes[:, 1]
    return r


def _newton_polish(potential: _ReducedPotential, x: np.ndarray, tol: float) -> Tuple[np.ndarray, int, np.ndarray, np.ndarray]:
    """
    Refine a near-stationary point with Newton steps on |eigenvalue|-scaled
    curvature, backtracking until the gradient norm drops.

    Returns:
        (x, steps, eigenvalues, eigenvectors) with the spectrum evaluated at x
    """
    g = potential.gradient(x)
    gnorm = np.linalg.norm(g)
    steps = 0
    while steps < NEWTON_STEPS and gnorm > 1e-3 * tol:
        eigvals, eigvecs = eigh(potential.hessian(x))
        floor = 1e-12 * max(np.max(np.abs(eigvals)), 1.0)
        step = -eigvecs @ ((eigvecs.T @ g) / np.maximum(np.abs(eigvals), floor))
        alpha = 1.0
        improved = False
        for _ in range(30):
            trial = x + alpha * step
            try:
                g_trial = potential.gradient(trial)
            except DegenerateConfigurationError:
                alpha *= 0.5
                continue
            if np.linalg.norm(g_trial) < gnorm:
                x, g, gnorm = trial, g_trial, np.linalg.norm(g_trial)
                improved = True
                break
            alpha *= 0.5
        steps += 1
        if not improved:
            break
    eigvals, eigvecs = eigh(potential.hessian(x))
    return x, steps, eigvals, eigvecs


def solve_equilibrium(
    trap: TrapConfig,
    n_ions: int,
    seed: int = 0,
    initial: Optional[Sequence] = None,
    tol: float = DEFAULT_GRADIENT_TOL,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
) -> CrystalConfiguration:
    """
    Find a local minimum of total_energy.

    BFGS descent (Wolfe backtracking line search) brings the crystal close to
    a stationary point; Newton steps with the analytic Hessian then drive the
    dimensionless gradient norm below ``tol``. A stationary point with a
    negative Hessian eigenvalue is a saddle: the crystal is kicked along the
    unstable direction and minimized again.

    Args:
        trap: Trap description
        n_ions: Number of ions N >= 1
        seed: Seed for the initial transverse jitter
        initial: Optional N x 3 starting positions (m)
        tol: Gradient-norm tolerance in dimensionless units
        max_iterations: Iteration cap across all descent rounds

    Returns:
        CrystalConfiguration with reduced_gradient_norm < tol

    Raises:
        ConvergenceError: if the cap is reached first (``best`` holds the
            best configuration found)
    """
    if n_ions < 1:
        raise ValueError("n_ions must be >= 1")
    potential = _ReducedPotential(trap)
    length = trap.length_scale

    if initial is None:
        r0 = _initial_positions(potential, n_ions, np.random.default_rng(seed))
    else:
        r0 = _as_positions(initial) / length
        if r0.shape[0] != n_ions:
            raise ValueError(f"initial positions hold {r0.shape[0]} ions, expected {n_ions}")

    x = r0.ravel()
    iterations = 0
    stable = False
    for attempt in range(MAX_SADDLE_ESCAPES + 1):
        budget = max(max_iterations - iterations, 1)
        result = minimize(
            potential.energy, x, jac=potential.gradient, method="BFGS",
            options={"gtol": tol, "maxiter": budget, "norm": 2},
        )
        iterations += int(result.nit)
        logger.info("BFGS round %d: %d iterations, |grad| = %.3e (%s)",
                    attempt, result.nit, np.linalg.norm(result.jac), result.message)
        x, newton_steps, eigvals, eigvecs = _newton_polish(potential, result.x, tol)
        iterations += newton_steps

        threshold = -DEFAULT_MODE_TOL * max(np.max(eigvals), 1e-300)
        if eigvals[0] >= threshold:
            stable = True
            break
        if iterations >= max_iterations:
            break
        logger.warning("saddle point reached (min eigenvalue %.3e); kicking along unstable mode", eigvals[0])
        x = x + SADDLE_KICK * eigvecs[:, 0]

    reduced_norm = float(np.linalg.norm(potential.gradient(x)))
    crystal = CrystalConfiguration(
        positions=x.reshape(-1, 3) * length,
        energy=potential.energy(x) * trap.energy_scale,
        gradient_norm=reduced_norm * trap.energy_scale / length,
        iterations=iterations,
        length_scale=length,
        reduced_gradient_norm=reduced_norm,
    )
    if reduced_norm >= tol or not stable:
        raise ConvergenceError(
            f"equilibrium search stopped after {iterations} iterations with "
            f"|grad| = {reduced_norm:.3e} (stable={stable})",
            best=crystal,
        )
    logger.info("equilibrium for %d ions after %d iterations", n_ions, iterations)
    return crystal


# ============================================================================
# NORMAL MODES
# ============================================================================

@dataclass(frozen=True)
class ModeSpectrum:
    """Sorted angular mode frequencies (rad/s) and orthonormal eigenvectors (columns)."""

    frequencies: np.ndarray
    eigenvectors: np.ndarray

    def axial_weights(self) -> np.ndarray:
        """Fraction of each mode's norm carried by z coordinates."""
        return np.sum(self.eigenvectors[2::3, :] ** 2, axis=0)


def normal_modes(trap: TrapConfig, crystal: CrystalConfiguration, tol: float = DEFAULT_MODE_TOL) -> ModeSpectrum:
    """
    Eigen-decomposition of the mass-scaled Hessian at an equilibrium.

    Raises:
        UnstableConfigurationError: if an eigenvalue lies below -tol times
            the largest eigenvalue (a saddle point)
    """
    potential = _ReducedPotential(trap)
    w = trap.reference_frequency
    eigvals, eigvecs = eigh(potential.hessian(crystal.positions.ravel() / trap.length_scale))
    if eigvals[0] < -tol * max(np.max(eigvals), 1e-300):
        raise UnstableConfigurationError(float(eigvals[0] * w ** 2))
    frequencies = w * np.sqrt(np.clip(eigvals, 0.0, None))
    return ModeSpectrum(frequencies=frequencies, eigenvectors=eigvecs)


# ============================================================================
# STRUCTURE
# ============================================================================

class StructureKind(Enum):
    LINEAR = "Linear"
    ZIGZAG = "Zigzag"
    OTHER = "Other"


@dataclass(frozen=True)
class StructureClass:
    kind: StructureKind
    transverse_extent: float


def transverse_extent(crystal: CrystalConfiguration) -> float:
    """Largest distance of any ion from the trap axis (m)."""
    return float(np.max(np.linalg.norm(crystal.positions[:, :2], axis=1)))


def axial_span(crystal: CrystalConfiguration) -> float:
    """Distance between the outermost ions along z (m)."""
    z = crystal.positions[:, 2]
    return float(np.max(z) - np.min(z))


def classify_structure(crystal: CrystalConfiguration, tol: Optional[float] = None) -> StructureClass:
    """
    Classify a crystal as Linear, Zigzag or Other.

    Linear: every ion within ``tol`` of the trap axis. Zigzag: the displaced
    ions (beyond ``tol``) form one contiguous run along z whose in-plane
    displacements alternate in sign, and every ion lies within ``tol`` of the
    principal transverse plane. The plane comes from a principal-component
    analysis of the transverse coordinates, which also settles degenerate
    transverse frequencies.

    Args:
        crystal: Converged configuration
        tol: Tolerance in meters (default 1e-4 l)
    """
    if tol is None:
        tol = DEFAULT_STRUCTURE_TOL * crystal.length_scale
    extent = transverse_extent(crystal)
    if extent < tol:
        return StructureClass(StructureKind.LINEAR, extent)

    order = np.argsort(crystal.positions[:, 2], kind="stable")
    transverse = crystal.positions[order, :2]
    _, axes = np.linalg.eigh(transverse.T @ transverse)
    in_plane = transverse @ axes[:, -1]
    out_of_plane = transverse @ axes[:, 0]
    if np.max(np.abs(out_of_plane)) >= tol:
        return StructureClass(StructureKind.OTHER, extent)

    displaced = np.flatnonzero(np.abs(in_plane) >= tol)
    signs = np.sign(in_plane[displaced])
    contiguous = bool(np.all(np.diff(displaced) == 1))
    alternating = bool(np.all(signs[1:] != signs[:-1]))
    if len(displaced) >= 2 and contiguous and alternating:
        return StructureClass(StructureKind.ZIGZAG, extent)
    return StructureClass(StructureKind.OTHER, extent)


def cooling_ions(crystal: CrystalConfiguration, count: int = 5) -> List[int]:
    """Indices of the ``count`` ions nearest the crystal center along z."""
    z = crystal.positions[:, 2]
    center = 0.5 * (np.max(z) + np.min(z))
    order = np.argsort(np.abs(z - center), kind="stable")
    return sorted(int(i) for i in order[:count])
