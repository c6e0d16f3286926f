"""
Unit Tests for the Ion Crystal Solver

Covers the potential model, analytic derivatives, equilibrium search,
normal modes and the structural classifier.

Run with: python -m pytest test_ion_crystal.py
Or simply: python test_ion_crystal.py
"""

import math
import unittest

import numpy as np
from scipy import constants

from ion_crystal import (
    ConvergenceError,
    CrystalConfiguration,
    DegenerateConfigurationError,
    HarmonicAxial,
    PolynomialAxial,
    StructureKind,
    TrapConfig,
    UnstableConfigurationError,
    YB171_MASS,
    axial_span,
    characteristic_length,
    classify_structure,
    cooling_ions,
    energy_gradient,
    normal_modes,
    solve_equilibrium,
    total_energy,
    transverse_extent,
)

OMEGA_Z = 2 * math.pi * 1.0e6


def harmonic_trap(wx_ratio: float, wy_ratio: float) -> TrapConfig:
    return TrapConfig(omega_x=wx_ratio * OMEGA_Z, omega_y=wy_ratio * OMEGA_Z, axial=HarmonicAxial(OMEGA_Z))


def blade_trap() -> TrapConfig:
    """Trap of configs/crystal_103.cfg and configs/crystal_218.cfg."""
    return TrapConfig(
        omega_x=2 * math.pi * 1.6e6,
        omega_y=2 * math.pi * 1.5e6,
        axial=PolynomialAxial((0.0, 2.0e-8)),
    )


def chain(trap: TrapConfig, z_reduced) -> CrystalConfiguration:
    """Linear chain at the given reduced axial coordinates."""
    length = trap.length_scale
    positions = np.zeros((len(z_reduced), 3))
    positions[:, 2] = np.asarray(z_reduced) * length
    return CrystalConfiguration(positions, 0.0, 0.0, 0, length, 0.0)


def axial_frequencies(trap: TrapConfig, crystal: CrystalConfiguration) -> np.ndarray:
    spectrum = normal_modes(trap, crystal)
    return np.sort(spectrum.frequencies[spectrum.axial_weights() > 0.5])


class TestTrapModel(unittest.TestCase):
    """Test trap construction and validation."""

    def test_rejects_non_positive_frequencies(self):
        """Test that transverse frequencies must be positive."""
        with self.assertRaises(ValueError):
            TrapConfig(omega_x=0.0, omega_y=1.0, axial=HarmonicAxial(1.0))
        with self.assertRaises(ValueError):
            TrapConfig(omega_x=1.0, omega_y=-1.0, axial=HarmonicAxial(1.0))

    def test_rejects_zero_charge(self):
        """Test that a neutral particle is rejected."""
        with self.assertRaises(ValueError):
            TrapConfig(omega_x=1.0, omega_y=1.0, axial=HarmonicAxial(1.0), charge=0.0)

    def test_non_confining_polynomial(self):
        """Test that a negative leading coefficient is rejected at construction."""
        with self.assertRaises(ValueError):
            PolynomialAxial((1.0, -1.0))
        with self.assertRaises(ValueError):
            PolynomialAxial((0.0, 0.0))

    def test_anisotropic_trap_allowed(self):
        """Test that omega_x != omega_y is accepted."""
        trap = TrapConfig(2 * math.pi * 1.6e6, 2 * math.pi * 1.5e6, PolynomialAxial((0.0, 2.0e-8)))
        self.assertAlmostEqual(trap.reference_frequency, 2 * math.pi * 1.5e6)

    def test_characteristic_length(self):
        """Test l = (q^2 / (4 pi eps0 m w^2))^(1/3)."""
        trap = harmonic_trap(5.0, 4.0)
        expected = (constants.e ** 2 / (4 * math.pi * constants.epsilon_0 * YB171_MASS * OMEGA_Z ** 2)) ** (1 / 3)
        self.assertAlmostEqual(characteristic_length(trap) / expected, 1.0, places=12)


class TestEnergyAndGradient(unittest.TestCase):
    """Test total energy and its analytic gradient."""

    def setUp(self):
        self.trap = harmonic_trap(5.0, 4.0)
        self.length = self.trap.length_scale

    def test_single_ion_at_origin(self):
        """Test that one ion at the trap center has zero energy and force."""
        origin = np.zeros((1, 3))
        self.assertEqual(total_energy(self.trap, origin), 0.0)
        np.testing.assert_array_equal(energy_gradient(self.trap, origin), np.zeros((1, 3)))

    def test_two_ion_analytic_energy(self):
        """Test the two-ion energy 3 a^2 m w^2 l^2 at a = (1/2)^(2/3)."""
        a = 0.5 ** (2 / 3)
        positions = np.array([[0, 0, -a], [0, 0, a]]) * self.length
        expected = 3 * a ** 2 * YB171_MASS * OMEGA_Z ** 2 * self.length ** 2
        self.assertAlmostEqual(total_energy(self.trap, positions) / expected, 1.0, places=12)

    def test_two_ion_equilibrium_gradient(self):
        """Test that the analytic two-ion equilibrium is force-free."""
        a = 0.5 ** (2 / 3)
        positions = np.array([[0, 0, -a], [0, 0, a]]) * self.length
        force_scale = YB171_MASS * OMEGA_Z ** 2 * self.length
        grad = energy_gradient(self.trap, positions)
        self.assertLess(np.linalg.norm(grad), 1e-9 * force_scale)

    def test_scaling_against_direct_sum(self):
        """Test that doubling coordinates scales trap terms x4 and Coulomb terms x1/2."""
        r = np.array([[0.1, -0.2, -1.1], [-0.3, 0.05, 0.2], [0.2, 0.1, 1.3]]) * self.length
        w = np.array([self.trap.omega_x, self.trap.omega_y, OMEGA_Z])
        harmonic = 0.5 * YB171_MASS * np.sum(w ** 2 * r ** 2)
        k = 1 / (4 * math.pi * constants.epsilon_0)
        coulomb = sum(
            k * constants.e ** 2 / np.linalg.norm(r[i] - r[j])
            for i in range(3) for j in range(i + 1, 3)
        )
        self.assertAlmostEqual(total_energy(self.trap, r) / (harmonic + coulomb), 1.0, places=10)
        self.assertAlmostEqual(total_energy(self.trap, 2 * r) / (4 * harmonic + coulomb / 2), 1.0, places=10)

    def test_degenerate_configuration(self):
        """Test that coincident ions raise a degenerate configuration error."""
        positions = np.array([[0, 0, 1e-6], [0, 0, 1e-6]])
        with self.assertRaises(DegenerateConfigurationError) as ctx:
            total_energy(self.trap, positions)
        self.assertIn("degenerate configuration", str(ctx.exception))
        with self.assertRaises(DegenerateConfigurationError):
            energy_gradient(self.trap, positions)

    def test_gradient_matches_finite_differences(self):
        """Test the gradient against central differences on 100 random configurations."""
        rng = np.random.default_rng(7)
        polynomial_trap = TrapConfig(
            omega_x=5 * OMEGA_Z, omega_y=4 * OMEGA_Z,
            axial=PolynomialAxial((0.5 * YB171_MASS * OMEGA_Z ** 2, 1.0e-6)),
            omega_ref=OMEGA_Z,
        )
        h = 1e-7 * self.length
        for trial in range(100):
            trap = self.trap if trial % 2 == 0 else polynomial_trap
            n = int(rng.integers(2, 11))
            r = rng.uniform(-3, 3, size=(n, 3)) * self.length
            grad = energy_gradient(trap, r)
            numeric = np.zeros_like(r)
            for i in range(n):
                for k in range(3):
                    step = np.zeros_like(r)
                    step[i, k] = h
                    numeric[i, k] = (total_energy(trap, r + step) - total_energy(trap, r - step)) / (2 * h)
            rel = np.linalg.norm(numeric - grad) / np.linalg.norm(grad)
            self.assertLess(rel, 1e-5, f"trial {trial} (N={n}) relative error {rel:.2e}")

    def test_coulomb_forces_cancel(self):
        """Test that the summed gradient equals the summed trap force alone."""
        rng = np.random.default_rng(3)
        r = rng.uniform(-2, 2, size=(6, 3)) * self.length
        w = np.array([self.trap.omega_x, self.trap.omega_y, OMEGA_Z])
        trap_force = YB171_MASS * np.sum(w ** 2 * r, axis=0)
        total = np.sum(energy_gradient(self.trap, r), axis=0)
        scale = YB171_MASS * OMEGA_Z ** 2 * self.length
        np.testing.assert_allclose(total, trap_force, atol=1e-9 * scale)

    def test_harmonic_polynomial_equivalence(self):
        """Test that Harmonic(w_z) equals Polynomial(c2 = m w_z^2 / 2)."""
        poly_trap = TrapConfig(
            omega_x=5 * OMEGA_Z, omega_y=4 * OMEGA_Z,
            axial=PolynomialAxial((0.5 * YB171_MASS * OMEGA_Z ** 2,)),
        )
        rng = np.random.default_rng(11)
        r = rng.uniform(-2, 2, size=(5, 3)) * self.length
        self.assertAlmostEqual(total_energy(poly_trap, r) / total_energy(self.trap, r), 1.0, places=10)
        np.testing.assert_allclose(
            energy_gradient(poly_trap, r), energy_gradient(self.trap, r),
            rtol=1e-9, atol=1e-12 * YB171_MASS * OMEGA_Z ** 2 * self.length,
        )


class TestEquilibrium(unittest.TestCase):
    """Test the equilibrium search against closed-form crystals."""

    def setUp(self):
        self.trap = harmonic_trap(5.0, 4.0)
        self.length = self.trap.length_scale

    def test_two_ions(self):
        """Test N=2: z = +-(1/2)^(2/3) l on the axis."""
        crystal = solve_equilibrium(self.trap, 2, seed=1)
        z = np.sort(crystal.positions[:, 2]) / self.length
        a = 0.5 ** (2 / 3)
        np.testing.assert_allclose(z, [-a, a], rtol=1e-8, atol=1e-8)
        self.assertLess(np.max(np.abs(crystal.positions[:, :2])), 1e-6 * self.length)
        self.assertLess(crystal.reduced_gradient_norm, 1e-9)

    def test_three_ions(self):
        """Test N=3: z = {-(5/4)^(1/3), 0, (5/4)^(1/3)} l."""
        crystal = solve_equilibrium(self.trap, 3, seed=2)
        z = np.sort(crystal.positions[:, 2]) / self.length
        b = 1.25 ** (1 / 3)
        np.testing.assert_allclose(z, [-b, 0.0, b], rtol=1e-8, atol=1e-8)

    def test_deterministic_for_seed(self):
        """Test that the same seed reproduces the same crystal."""
        first = solve_equilibrium(self.trap, 6, seed=5)
        second = solve_equilibrium(self.trap, 6, seed=5)
        np.testing.assert_array_equal(first.positions, second.positions)
        self.assertEqual(first.iterations, second.iterations)

    def test_initial_positions_respected(self):
        """Test that a supplied start converges to the same chain."""
        initial = np.array([[0, 0, -2.0], [1e-3, 0, 0.1], [0, 0, 2.0]]) * self.length
        crystal = solve_equilibrium(self.trap, 3, initial=initial)
        z = np.sort(crystal.positions[:, 2]) / self.length
        b = 1.25 ** (1 / 3)
        np.testing.assert_allclose(z, [-b, 0.0, b], rtol=1e-8, atol=1e-8)

    def test_initial_shape_mismatch(self):
        """Test that an initial array with the wrong ion count is rejected."""
        with self.assertRaises(ValueError):
            solve_equilibrium(self.trap, 4, initial=np.zeros((3, 3)))

    def test_symmetric_axial_potential(self):
        """Test z -> -z antisymmetry of the equilibrium in a quartic trap."""
        trap = TrapConfig(
            omega_x=6 * OMEGA_Z, omega_y=5 * OMEGA_Z,
            axial=PolynomialAxial((0.5 * YB171_MASS * OMEGA_Z ** 2, 2.0e-8)),
            omega_ref=OMEGA_Z,
        )
        crystal = solve_equilibrium(trap, 7, seed=3)
        z = np.sort(crystal.positions[:, 2])
        z = z - np.mean(z)
        np.testing.assert_allclose(z + z[::-1], 0.0, atol=1e-6 * trap.length_scale)

    def test_convergence_error_carries_best(self):
        """Test that an unreachable tolerance raises with the best configuration."""
        with self.assertRaises(ConvergenceError) as ctx:
            solve_equilibrium(self.trap, 10, seed=0, tol=1e-30, max_iterations=5)
        self.assertEqual(ctx.exception.best.n_ions, 10)

    def test_rejects_empty_crystal(self):
        """Test that N must be at least one."""
        with self.assertRaises(ValueError):
            solve_equilibrium(self.trap, 0)


class TestNormalModes(unittest.TestCase):
    """Test the normal-mode spectrum."""

    def test_single_ion_frequencies(self):
        """Test N=1: the trap frequencies themselves."""
        trap = TrapConfig(omega_x=1.5 * OMEGA_Z, omega_y=0.5 * OMEGA_Z, axial=HarmonicAxial(OMEGA_Z))
        crystal = solve_equilibrium(trap, 1)
        spectrum = normal_modes(trap, crystal)
        np.testing.assert_allclose(spectrum.frequencies, [0.5 * OMEGA_Z, OMEGA_Z, 1.5 * OMEGA_Z], rtol=1e-10)

    def test_breathing_mode(self):
        """Test center-of-mass w_z and breathing sqrt(3) w_z for N up to 30."""
        trap = harmonic_trap(30.0, 28.0)
        for n in (2, 5, 10, 20, 30):
            crystal = solve_equilibrium(trap, n, seed=n)
            axial = axial_frequencies(trap, crystal)
            self.assertEqual(len(axial), n)
            self.assertAlmostEqual(axial[0] / OMEGA_Z, 1.0, delta=1e-6, msg=f"N={n}")
            self.assertAlmostEqual(axial[1] / (math.sqrt(3) * OMEGA_Z), 1.0, delta=1e-6, msg=f"N={n}")

    def test_eigenvectors_orthonormal(self):
        """Test that mode eigenvectors are orthonormal."""
        trap = harmonic_trap(5.0, 4.0)
        spectrum = normal_modes(trap, solve_equilibrium(trap, 6, seed=1))
        v = spectrum.eigenvectors
        np.testing.assert_allclose(v.T @ v, np.eye(v.shape[0]), atol=1e-10)
        self.assertTrue(np.all(np.diff(spectrum.frequencies) >= 0))

    def test_three_ion_zigzag_mode(self):
        """Test the transverse zigzag mode w^2 = w_x^2 - (12/5) w_z^2."""
        trap = harmonic_trap(2.0, 3.0)
        b = 1.25 ** (1 / 3)
        spectrum = normal_modes(trap, chain(trap, [-b, 0.0, b]))
        expected = math.sqrt(4.0 - 2.4) * OMEGA_Z
        self.assertTrue(np.any(np.abs(spectrum.frequencies - expected) < 1e-6 * expected))

    def test_unstable_linear_chain(self):
        """Test that a linear chain past the zigzag threshold is reported unstable."""
        trap = harmonic_trap(1.3, 3.0)
        b = 1.25 ** (1 / 3)
        with self.assertRaises(UnstableConfigurationError) as ctx:
            normal_modes(trap, chain(trap, [-b, 0.0, b]))
        self.assertIn("unstable configuration", str(ctx.exception))
        self.assertLess(ctx.exception.min_eigenvalue, 0)


class TestStructure(unittest.TestCase):
    """Test the structural classifier."""

    def test_two_ions_linear(self):
        """Test that two ions are always linear."""
        trap = TrapConfig(omega_x=1.1 * OMEGA_Z, omega_y=1.05 * OMEGA_Z, axial=HarmonicAxial(OMEGA_Z))
        crystal = solve_equilibrium(trap, 2, seed=4)
        self.assertEqual(classify_structure(crystal).kind, StructureKind.LINEAR)

    def test_three_ions_zigzag(self):
        """Test that N=3 below the soft-mode threshold forms a zigzag."""
        trap = harmonic_trap(1.3, 3.0)
        crystal = solve_equilibrium(trap, 3, seed=0)
        result = classify_structure(crystal)
        self.assertEqual(result.kind, StructureKind.ZIGZAG)
        self.assertGreater(result.transverse_extent, 1e-2 * trap.length_scale)
        self.assertLess(np.max(np.abs(crystal.positions[:, 1])), 1e-4 * trap.length_scale)

    def test_degenerate_transverse_frequencies(self):
        """Test that omega_x == omega_y still yields a planar zigzag."""
        trap = harmonic_trap(1.3, 1.3)
        crystal = solve_equilibrium(trap, 3, seed=9)
        self.assertEqual(classify_structure(crystal).kind, StructureKind.ZIGZAG)

    def test_zigzag_threshold_bisection(self):
        """Test that N=3 flips Linear -> Zigzag at w_x = sqrt(12/5) w_z."""
        critical = math.sqrt(12 / 5)

        def is_zigzag(ratio: float) -> bool:
            trap = harmonic_trap(ratio, 3.0)
            return classify_structure(solve_equilibrium(trap, 3, seed=0)).kind == StructureKind.ZIGZAG

        lo, hi = 1.3, 2.0
        self.assertTrue(is_zigzag(lo))
        self.assertFalse(is_zigzag(hi))
        while (hi - lo) / critical > 5e-4:
            mid = 0.5 * (lo + hi)
            if is_zigzag(mid):
                lo = mid
            else:
                hi = mid
        self.assertLessEqual(lo, critical)
        self.assertGreaterEqual(hi, critical)
        self.assertLess((hi - lo) / critical, 1e-3)

    def test_103_ions_linear_in_blade_trap(self):
        """Test that 103 ions stay a linear chain in the 218-ion zigzag trap."""
        crystal = solve_equilibrium(blade_trap(), 103, seed=103)
        result = classify_structure(crystal)
        self.assertEqual(result.kind, StructureKind.LINEAR)
        self.assertGreater(axial_span(crystal), 500e-6)
        self.assertLess(axial_span(crystal), 800e-6)

    def test_cooling_ions_central(self):
        """Test that the cooling ions are the ones nearest the center."""
        trap = harmonic_trap(30.0, 28.0)
        crystal = solve_equilibrium(trap, 11, seed=1)
        order = np.argsort(crystal.positions[:, 2])
        self.assertEqual(cooling_ions(crystal, 5), sorted(int(i) for i in order[3:8]))


class TestLargeCrystal(unittest.TestCase):
    """Test the 218-ion crystal of the shipped example configuration."""

    def test_218_ion_zigzag(self):
        """Test that 218 ions form an ~800 um quasi-1D zigzag."""
        trap = blade_trap()
        crystal = solve_equilibrium(trap, 218, seed=1)
        result = classify_structure(crystal)
        self.assertEqual(result.kind, StructureKind.ZIGZAG)
        span = axial_span(crystal)
        self.assertGreater(span, 640e-6)
        self.assertLess(span, 960e-6)
        self.assertLess(transverse_extent(crystal), 0.05 * span)
        self.assertEqual(len(cooling_ions(crystal)), 5)
        spectrum = normal_modes(trap, crystal)
        self.assertTrue(np.all(spectrum.frequencies >= 0))


def run_tests():
    """Run all tests and display results."""
    loader = unittest.TestLoader()
    suite = unittest.TestSuite()
    for case in (TestTrapModel, TestEnergyAndGradient, TestEquilibrium,
                 TestNormalModes, TestStructure, TestLargeCrystal):
        suite.addTests(loader.loadTestsFromTestCase(case))

    runner = unittest.TextTestRunner(verbosity=2)
    result = runner.run(suite)

    print("\n" + "=" * 70)
    print("TEST SUMMARY")
    print("=" * 70)
    print(f"Tests run: {result.testsRun}")
    print(f"Successes: {result.testsRun - len(result.failures) - len(result.errors)}")
    print(f"Failures: {len(result.failures)}")
    print(f"Errors: {len(result.errors)}")
    print("=" * 70)

    return result.wasSuccessful()


if __name__ == "__main__":
    import sys
    success = run_tests()
    sys.exit(0 if success else 1)
