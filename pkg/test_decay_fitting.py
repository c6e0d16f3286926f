"""
Unit Tests for Decay and Oscillation Fitting

Covers model Jacobians, exact recovery on noiseless data, degenerate
inputs, interval coverage and the CSV helpers.

Run with: python -m pytest test_decay_fitting.py
Or simply: python test_decay_fitting.py
"""

import math
import os
import tempfile
import unittest

import numpy as np

from decay_fitting import (
    FLAG_NON_IDENTIFIABLE,
    FLAG_T_AT_BOUND,
    FitError,
    binomial_stderr,
    exponential_offset_jacobian,
    exponential_offset_model,
    fit_exponential_offset,
    fit_pure_exponential,
    fit_rabi,
    log_linear_fit,
    pure_exponential_jacobian,
    pure_exponential_model,
    rabi_jacobian,
    rabi_model,
    read_result_csv,
    sigma_floor,
    write_fit_csv,
    write_result_csv,
)


class TestBinomialStderr(unittest.TestCase):
    """Test the binomial standard error."""

    def test_reference_values(self):
        """Test p = 0.5, 1 and 0.8 at n = 200."""
        self.assertAlmostEqual(binomial_stderr(0.5, 200), 0.0354, places=4)
        self.assertEqual(binomial_stderr(1.0, 200), 0.0)
        self.assertAlmostEqual(binomial_stderr(0.8, 200), 0.0283, places=4)

    def test_invalid_inputs(self):
        """Test that out-of-range inputs are rejected."""
        with self.assertRaises(ValueError):
            binomial_stderr(1.2, 10)
        with self.assertRaises(ValueError):
            binomial_stderr(0.5, 0)

    def test_vectorized(self):
        """Test array input."""
        np.testing.assert_allclose(binomial_stderr(np.array([0.5, 0.8]), 200), [0.0353553, 0.0282843], atol=1e-7)

    def test_sigma_floor(self):
        """Test that zero errors are replaced by 1 / (2 reps)."""
        np.testing.assert_allclose(sigma_floor([0.0, 0.03], 200), [0.0025, 0.03])


class TestJacobians(unittest.TestCase):
    """Test analytic Jacobians against finite differences."""

    def check(self, model, jacobian, params, t):
        analytic = jacobian(t, *params)
        for k in range(len(params)):
            h = 1e-6 * max(abs(params[k]), 1e-3)
            up = list(params)
            down = list(params)
            up[k] += h
            down[k] -= h
            numeric = (model(t, *up) - model(t, *down)) / (2 * h)
            scale = max(np.max(np.abs(analytic[:, k])), 1e-12)
            self.assertLess(np.max(np.abs(numeric - analytic[:, k])) / scale, 1e-6)

    def test_random_parameter_points(self):
        """Test all three models at random parameter points."""
        rng = np.random.default_rng(0)
        t = np.linspace(0, 0.8, 9)
        t_rabi = np.linspace(0, 300e-6, 61)
        for _ in range(20):
            self.check(exponential_offset_model, exponential_offset_jacobian,
                       [rng.uniform(0, 1), rng.uniform(0.2, 1) * rng.choice([-1, 1]), rng.uniform(0.05, 2)], t)
            self.check(pure_exponential_model, pure_exponential_jacobian,
                       [rng.uniform(1, 30), rng.uniform(0.05, 2)], t)
            self.check(rabi_model, rabi_jacobian,
                       [2 * math.pi * rng.uniform(5e3, 15e3), rng.uniform(0.5, 1), rng.uniform(0, 0.2)], t_rabi)


class TestExponentialOffset(unittest.TestCase):
    """Test F = A + B exp(-t / T)."""

    def setUp(self):
        self.times = np.arange(0, 0.81, 0.1)
        self.values = exponential_offset_model(self.times, 0.5, 0.45, 0.4)

    def test_exact_recovery(self):
        """Test recovery of A = 0.5, B = 0.45, T = 400 ms to 1e-6."""
        fit = fit_exponential_offset(self.times, self.values)
        self.assertTrue(fit.converged)
        for name, truth in (("A", 0.5), ("B", 0.45), ("T", 0.4)):
            self.assertAlmostEqual(fit.params[name] / truth, 1.0, delta=1e-6)
        self.assertTrue(fit.identifiable)
        self.assertEqual(fit.flags, ())

    def test_residual_not_above_truth(self):
        """Test that the optimum is at least as good as the truth."""
        rng = np.random.default_rng(1)
        noisy = self.values + rng.normal(0, 0.01, len(self.times))
        sigmas = np.full(len(self.times), 0.01)
        fit = fit_exponential_offset(self.times, noisy, sigmas)
        truth_norm = np.linalg.norm((noisy - self.values) / sigmas)
        self.assertLessEqual(fit.residual_norm, truth_norm + 1e-9)

    def test_underdetermined(self):
        """Test that fewer than four points raise underdetermined."""
        with self.assertRaises(FitError) as ctx:
            fit_exponential_offset(self.times[:3], self.values[:3])
        self.assertIn("underdetermined", str(ctx.exception))

    def test_constant_data(self):
        """Test that flat data are flagged non-identifiable."""
        fit = fit_exponential_offset(self.times, np.full(len(self.times), 0.5))
        self.assertIn(FLAG_NON_IDENTIFIABLE, fit.flags)
        self.assertFalse(fit.identifiable)
        self.assertAlmostEqual(fit.params["A"] + fit.params["B"], 0.5, places=6)

    def test_time_constant_at_bound(self):
        """Test that a decay far longer than the window is flagged."""
        values = exponential_offset_model(self.times, 0.0, 1.0, 1e4)
        fit = fit_exponential_offset(self.times, values + np.array([0, 1, -1, 1, -1, 1, -1, 1, -1]) * 1e-3,
                                     np.full(len(self.times), 1e-3))
        self.assertTrue(FLAG_T_AT_BOUND in fit.flags or FLAG_NON_IDENTIFIABLE in fit.flags)

    def test_invalid_sigmas(self):
        """Test that non-positive sigmas are rejected."""
        with self.assertRaises(ValueError):
            fit_exponential_offset(self.times, self.values, np.zeros(len(self.times)))

    def test_unsorted_input(self):
        """Test that point order does not matter."""
        order = np.random.default_rng(2).permutation(len(self.times))
        fit = fit_exponential_offset(self.times[order], self.values[order])
        self.assertAlmostEqual(fit.params["T"], 0.4, places=6)

    def test_coverage(self):
        """Test that 1-sigma intervals cover the truth in 60-76% of 500 trials."""
        rng = np.random.default_rng(3)
        sigmas = np.full(len(self.times), 0.01)
        covered = 0
        for _ in range(500):
            noisy = self.values + rng.normal(0, 0.01, len(self.times))
            fit = fit_exponential_offset(self.times, noisy, sigmas)
            if abs(fit.params["T"] - 0.4) <= fit.stderr["T"]:
                covered += 1
        self.assertGreaterEqual(covered, 300)
        self.assertLessEqual(covered, 380)


class TestPureExponential(unittest.TestCase):
    """Test N = C exp(-t / tau)."""

    def setUp(self):
        self.times = np.linspace(0, 0.8, 9)
        self.values = pure_exponential_model(self.times, 20.0, 0.256)

    def test_exact_recovery(self):
        """Test recovery of C = 20, tau = 256 ms to 1e-6."""
        fit = fit_pure_exponential(self.times, self.values)
        self.assertAlmostEqual(fit.params["C"] / 20.0, 1.0, delta=1e-6)
        self.assertAlmostEqual(fit.params["tau"] / 0.256, 1.0, delta=1e-6)

    def test_single_point(self):
        """Test that one point is underdetermined."""
        with self.assertRaises(FitError) as ctx:
            fit_pure_exponential([0.0], [20.0])
        self.assertIn("underdetermined", str(ctx.exception))

    def test_log_linear_agrees(self):
        """Test the closed-form log-linear fit against the iterative one."""
        c, tau = log_linear_fit(self.times, self.values)
        fit = fit_pure_exponential(self.times, self.values)
        self.assertAlmostEqual(c / fit.params["C"], 1.0, delta=1e-9)
        self.assertAlmostEqual(tau / fit.params["tau"], 1.0, delta=1e-9)

    def test_log_linear_rejects_non_positive(self):
        """Test that log-linear fitting needs positive values."""
        with self.assertRaises(FitError):
            log_linear_fit([0.0, 1.0], [1.0, 0.0])


class TestRabiFit(unittest.TestCase):
    """Test P = offset + amplitude sin^2(Omega t / 2)."""

    def setUp(self):
        self.times = np.arange(0, 300e-6 + 1e-12, 5e-6)

    def test_fitted_frequencies(self):
        """Test recovery of 2 pi x 10.3 kHz and 2 pi x 7.4 kHz to 0.1%."""
        for freq in (10.3e3, 7.4e3):
            omega = 2 * math.pi * freq
            fit = fit_rabi(self.times, rabi_model(self.times, omega, 1.0, 0.0))
            self.assertAlmostEqual(fit.params["Omega"] / omega, 1.0, delta=1e-3)
            self.assertAlmostEqual(fit.params["amplitude"], 1.0, places=6)

    def test_noisy_oscillation(self):
        """Test a reduced-contrast oscillation with binomial noise."""
        omega = 2 * math.pi * 10.3e3
        rng = np.random.default_rng(4)
        truth = rabi_model(self.times, omega, 0.9, 0.05)
        observed = rng.binomial(100, truth) / 100
        fit = fit_rabi(self.times, observed, sigma_floor(binomial_stderr(observed, 100), 100))
        self.assertAlmostEqual(fit.params["Omega"] / omega, 1.0, delta=1e-2)

    def test_flat_data(self):
        """Test that flat data raise no oscillation detected."""
        with self.assertRaises(FitError) as ctx:
            fit_rabi(self.times, np.full(len(self.times), 0.3))
        self.assertIn("no oscillation detected", str(ctx.exception))

    def test_too_few_points(self):
        """Test that fewer than six points are underdetermined."""
        with self.assertRaises(FitError):
            fit_rabi(self.times[:5], rabi_model(self.times[:5], 1e4, 1.0, 0.0))


class TestResultCsv(unittest.TestCase):
    """Test CSV helpers."""

    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmpdir.cleanup()

    def test_write_and_read_columns(self):
        """Test that written columns read back by header name."""
        path = os.path.join(self.tmpdir.name, "curve.csv")
        write_result_csv(path, ("time_s", "fidelity", "stderr", "reps"), [(0.0, 1.0, 0.0, 200), (0.1, 0.875, 0.02, 200)])
        with open(path, newline="", encoding="utf-8") as handle:
            text = handle.read()
        self.assertEqual(text, "time_s,fidelity,stderr,reps\n0,1,0,200\n0.1,0.875,0.02,200\n")
        columns = read_result_csv(path)
        np.testing.assert_array_equal(columns["fidelity"], [1.0, 0.875])

    def test_fit_csv(self):
        """Test the param,value,stderr layout."""
        path = os.path.join(self.tmpdir.name, "fit.csv")
        times = np.linspace(0, 0.8, 9)
        write_fit_csv(path, fit_pure_exponential(times, pure_exponential_model(times, 20.0, 0.256)))
        with open(path, encoding="utf-8") as handle:
            lines = handle.read().splitlines()
        self.assertEqual(lines[0], "param,value,stderr")
        self.assertTrue(lines[1].startswith("C,"))
        name, value, _ = lines[2].split(",")
        self.assertEqual(name, "tau")
        self.assertAlmostEqual(float(value), 0.256, places=9)

    def test_malformed_csv(self):
        """Test that ragged or non-numeric rows are reported with a line number."""
        path = os.path.join(self.tmpdir.name, "bad.csv")
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("time_s,fidelity\n0,1\n0.1,abc\n")
        with self.assertRaises(ValueError) as ctx:
            read_result_csv(path)
        self.assertIn("line 3", str(ctx.exception))


def run_tests():
    """Run all tests and display results."""
    loader = unittest.TestLoader()
    suite = unittest.TestSuite()
    for case in (TestBinomialStderr, TestJacobians, TestExponentialOffset,
                 TestPureExponential, TestRabiFit, TestResultCsv):
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
