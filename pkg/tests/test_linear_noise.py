import math
import unittest

import numpy as np

from predprey_ensemble.errors import FitError, InfeasibleEquilibriumError, ResamplingError, StabilityError
from predprey_ensemble.lattice_model import ModelParams, scale_params
from predprey_ensemble.linear_noise import (
    analytical_spectrum,
    build_linear_model,
    empirical_spectrum,
    fit_envelope_decay,
    jacobian,
    noise_matrix,
    peak_frequency,
    relative_l2_error,
    simulate_langevin_full,
    simulate_langevin_linear,
    theta_lambda,
    theta_lambda_monte_carlo,
)
from predprey_ensemble.meanfield import rhs_homogeneous
from predprey_ensemble.samplers import EngineConfig, Trajectory


class TestLinearModel(unittest.TestCase):

    def setUp(self):
        self.sp = scale_params(ModelParams.reference_homogeneous(), homogeneous=True)
        self.model = build_linear_model(self.sp, 1000)

    def test_jacobian_at_equilibrium(self):
        """
        Psi at (0.2, 0.2) has a zero predator diagonal, so the oscillator form applies.
        """
        np.testing.assert_allclose(self.model.Psi, [[0.0, 0.05], [-0.08, -0.02]], atol=1e-12)
        self.assertAlmostEqual(self.model.omega0_squared, 0.004, places=12)
        self.assertAlmostEqual(self.model.gamma, 0.02, places=12)
        self.assertAlmostEqual(self.model.sigma, 1.0 / math.sqrt(1000))

    def test_jacobian_matches_finite_differences(self):
        """
        The analytic Jacobian agrees with central differences of the right-hand side.
        """
        f, g, h = 0.15, 0.35, 1e-6
        numeric = np.empty((2, 2))
        for column, (df, dg) in enumerate(((h, 0.0), (0.0, h))):
            plus = rhs_homogeneous(f + df, g + dg, self.sp)
            minus = rhs_homogeneous(f - df, g - dg, self.sp)
            numeric[:, column] = (np.array(plus) - np.array(minus)) / (2 * h)
        np.testing.assert_allclose(jacobian(self.sp, f, g), numeric, atol=1e-6)

    def test_noise_matrix_entries(self):
        """
        Square roots of the event rates at equilibrium, signed by their effect.
        """
        phi = self.model.Phi
        self.assertAlmostEqual(phi[0, 1], 0.1, places=12)
        self.assertAlmostEqual(phi[0, 3], -0.1, places=12)
        self.assertAlmostEqual(phi[1, 0], math.sqrt(0.012), places=12)
        self.assertAlmostEqual(phi[1, 1], -0.1, places=12)
        self.assertAlmostEqual(phi[1, 2], -math.sqrt(0.002), places=12)

    def test_noise_matrix_infeasible(self):
        """
        A point outside the simplex gives a negative radicand.
        """
        with self.assertRaises(InfeasibleEquilibriumError):
            noise_matrix(self.sp, 1.2, 0.2)

    def test_infeasible_equilibrium(self):
        """
        A high predator death rate pushes g* beyond 1.
        """
        sp = scale_params(ModelParams.reference_homogeneous().replace(d1_r=1.0), homogeneous=True)
        with self.assertRaises(InfeasibleEquilibriumError):
            build_linear_model(sp, 1000)

    def test_theta_lambda_closed_form(self):
        """
        Theta / sigma^2 = 4.8e-5 and Lambda / sigma^2 = 0.02 for the homogeneous rates.
        """
        theta, lam = theta_lambda(self.model)
        var = self.model.sigma ** 2
        self.assertAlmostEqual(theta / var, 4.8e-5, places=12)
        self.assertAlmostEqual(lam / var, 0.02, places=12)

    def test_theta_lambda_monte_carlo(self):
        """
        The sampled expectations agree with the closed form to within 1%.
        """
        theta, lam = theta_lambda(self.model)
        theta_mc, lam_mc = theta_lambda_monte_carlo(self.model, draws=10 ** 6, seed=5)
        self.assertAlmostEqual(theta_mc / theta, 1.0, delta=0.01)
        self.assertAlmostEqual(lam_mc / lam, 1.0, delta=0.01)

    def test_noise_free_model(self):
        """
        N = inf gives sigma = 0 and a vanishing spectrum numerator.
        """
        model = build_linear_model(self.sp, math.inf)
        self.assertEqual(model.sigma, 0.0)
        self.assertEqual(theta_lambda(model), (0.0, 0.0))


class TestSpectra(unittest.TestCase):

    def setUp(self):
        self.sp = scale_params(ModelParams.reference_homogeneous(), homogeneous=True)
        self.model = build_linear_model(self.sp, 1000)

    def test_analytical_peak(self):
        """
        The analytical spectrum peaks close to Omega0 = sqrt(0.004).
        """
        spectrum = analytical_spectrum(self.model, np.linspace(0.001, 0.3, 3000))
        self.assertAlmostEqual(peak_frequency(spectrum), 0.0626, delta=0.001)
        self.assertTrue(np.all(spectrum.power > 0))
        self.assertEqual(spectrum.to_dict()["kind"], "analytical")

    def test_empirical_spectrum_of_sinusoid(self):
        """
        A pure oscillation on a DFT bin puts the periodogram peak on that bin.
        """
        n, dt = 256, 1.0
        times = dt * np.arange(n)
        omega0 = 2 * np.pi * 8 / (n * dt)
        f = np.sin(omega0 * times)[:, None]
        traj = Trajectory(times=times, f=f, g=np.zeros_like(f))
        spectrum = empirical_spectrum([traj, traj])
        self.assertAlmostEqual(peak_frequency(spectrum), omega0, places=12)
        self.assertEqual(spectrum.realizations, 2)
        np.testing.assert_allclose(spectrum.power_stderr, 0.0, atol=1e-12)

    def test_empirical_spectrum_cell_mean(self):
        """
        The cell-averaged series of two opposite cells is constant and has no power after detrending.
        """
        times = np.arange(16.0)
        wave = 0.1 + 0.05 * np.sin(times)
        f = np.stack([wave, 0.2 - wave], axis=1)
        traj = Trajectory(times=times, f=f, g=np.zeros_like(f))
        spectrum = empirical_spectrum([traj], cell="mean")
        np.testing.assert_allclose(spectrum.power, 0.0, atol=1e-20)
        self.assertIsNone(spectrum.power_stderr)

    def test_empirical_spectrum_needs_uniform_grid(self):
        """
        Irregular sampling is rejected.
        """
        times = np.array([0.0, 1.0, 2.5, 3.0, 4.0])
        traj = Trajectory(times=times, f=np.zeros((5, 1)), g=np.zeros((5, 1)))
        with self.assertRaises(ResamplingError):
            empirical_spectrum([traj])

    def test_relative_l2_error_of_identical_spectra(self):
        """
        A spectrum compared with itself has zero error.
        """
        spectrum = analytical_spectrum(self.model, np.linspace(0.01, 1.0, 200))
        self.assertAlmostEqual(relative_l2_error(spectrum, spectrum), 0.0, places=12)


class TestLangevin(unittest.TestCase):

    def setUp(self):
        self.sp = scale_params(ModelParams.reference_homogeneous(), homogeneous=True)

    def test_noise_free_envelope_decays_at_half_gamma(self):
        """
        Without noise the deviation is a damped oscillation with decay rate Gamma / 2.
        """
        model = build_linear_model(self.sp, math.inf)
        traj = simulate_langevin_linear(model, EngineConfig(t_final=600.0, record_stride=1.0), noise=False)
        self.assertAlmostEqual(fit_envelope_decay(traj), model.gamma / 2, delta=0.0005)
        self.assertTrue(traj.metadata["deviation"])

    def test_linear_step_too_large(self):
        """
        dt times the spectral radius of Psi must stay below 1.
        """
        model = build_linear_model(self.sp, 1000)
        with self.assertRaises(StabilityError):
            simulate_langevin_linear(model, EngineConfig(t_final=100.0, tau=40.0))

    def test_linear_runs_are_seeded(self):
        """
        Equal seeds reproduce the noisy linear run.
        """
        model = build_linear_model(self.sp, 1000)
        cfg = EngineConfig(seed=7, t_final=50.0, record_stride=1.0)
        first = simulate_langevin_linear(model, cfg)
        second = simulate_langevin_linear(model, cfg)
        np.testing.assert_array_equal(first.f, second.f)

    def test_full_langevin_without_noise(self):
        """
        N = inf reduces the full system to the mean-field ODE, which settles at (0.2, 0.2).
        """
        traj = simulate_langevin_full(self.sp, math.inf, EngineConfig(t_final=1500.0, record_stride=10.0))
        self.assertAlmostEqual(traj.f[-1, 0], 0.2, places=3)
        self.assertAlmostEqual(traj.g[-1, 0], 0.2, places=3)
        self.assertEqual(traj.metadata["clamped_densities"], 0)

    def test_full_langevin_stays_on_simplex(self):
        """
        Strong noise is projected back so recorded densities remain valid.
        """
        traj = simulate_langevin_full(self.sp, 20, EngineConfig(seed=3, t_final=200.0, record_stride=1.0))
        traj.check_invariants()

    def test_envelope_fit_needs_maxima(self):
        """
        A monotone series has no maxima to fit.
        """
        times = np.arange(20.0)
        traj = Trajectory(times=times, f=np.exp(-times)[:, None], g=np.zeros((20, 1)))
        with self.assertRaises(FitError):
            fit_envelope_decay(traj)


if __name__ == '__main__':
    unittest.main()
