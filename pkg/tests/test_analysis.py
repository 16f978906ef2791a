import itertools
import math
import unittest
from unittest import mock

import numpy as np
from scipy.linalg import expm

from predprey_ensemble.analysis import (
    accuracy_study,
    benchmark_cost,
    convergence_study,
    empirical_distribution,
    error_vs_meanfield,
    final_counts,
    fit_power_law,
    generator_matrix,
    master_equation_exact,
    meanfield_reference,
    total_variation,
)
from predprey_ensemble.errors import (
    FitError,
    InvalidParameterError,
    MeasurementError,
    ResamplingError,
    StateSpaceTooLargeError,
)
from predprey_ensemble.lattice_model import LatticeState, ModelParams
from predprey_ensemble.meanfield import SolverConfig
from predprey_ensemble.samplers import EngineConfig, Trajectory, run_realizations


def _constant(times, values) -> Trajectory:
    values = np.asarray(values, dtype=float)
    f = np.tile(values, (len(times), 1))
    return Trajectory(times=np.asarray(times, dtype=float), f=f, g=f.copy(), metadata={"nc": 10})


class TestErrors(unittest.TestCase):

    def test_fit_power_law(self):
        """
        An exact power law is recovered from three points.
        """
        x = [10, 100, 1000]
        y = [2 * v ** -0.5 for v in x]
        slope, intercept = fit_power_law(x, y)
        self.assertAlmostEqual(slope, -0.5, places=10)
        self.assertAlmostEqual(intercept, math.log(2), places=10)

    def test_fit_power_law_needs_three_points(self):
        """
        Zero errors are dropped, which can leave too few points.
        """
        with self.assertRaises(FitError):
            fit_power_law([10, 100, 1000], [0.1, 0.0, 0.01])

    def test_homogeneous_error(self):
        """
        The homogeneous error is the largest deviation over time.
        """
        traj = _constant([0, 1, 2], [0.3])
        traj.f[1, 0] = 0.45
        e_f, e_g = error_vs_meanfield(traj, _constant([0, 1, 2], [0.2]))
        self.assertAlmostEqual(e_f, 0.25)
        self.assertAlmostEqual(e_g, 0.1)

    def test_spatial_error_averages_cells(self):
        """
        Spatial mode averages the per-cell sup over the lattice.
        """
        traj = _constant([0, 1], [0.3, 0.5])
        e_f, _ = error_vs_meanfield(traj, _constant([0, 1], [0.2, 0.2]))
        self.assertAlmostEqual(e_f, 0.2)

    def test_reference_is_interpolated(self):
        """
        A reference on a finer grid is interpolated onto the trajectory times.
        """
        reference = Trajectory(times=np.linspace(0, 2, 5), f=np.linspace(0, 2, 5)[:, None],
                               g=np.zeros((5, 1)))
        traj = Trajectory(times=np.array([0.0, 1.0, 2.0]), f=np.array([[0.0], [1.0], [2.0]]), g=np.zeros((3, 1)))
        self.assertEqual(error_vs_meanfield(traj, reference), (0.0, 0.0))

    def test_reference_must_cover_range(self):
        """
        Extrapolation beyond the reference is refused, as are differing lattices.
        """
        with self.assertRaises(ResamplingError):
            error_vs_meanfield(_constant([0, 1, 3], [0.1]), _constant([0, 1, 2], [0.1]))
        with self.assertRaises(ResamplingError):
            error_vs_meanfield(_constant([0, 1], [0.1]), _constant([0, 1], [0.1, 0.1]))

    def test_meanfield_reference_follows_engine_grid(self):
        """
        The reference shares the engine output grid even when a solver is given.
        """
        cfg = EngineConfig(t_final=4.0, record_stride=0.5)
        state = LatticeState.homogeneous(100, 20, 20)
        reference = meanfield_reference(state, ModelParams.reference_homogeneous(), cfg,
                                        solver=SolverConfig(method="rk45", t_final=1.0))
        np.testing.assert_allclose(reference.times, 0.5 * np.arange(9))
        self.assertAlmostEqual(reference.f[0, 0], 0.2)


class TestMasterEquation(unittest.TestCase):

    def setUp(self):
        self.p = ModelParams.reference_homogeneous()
        self.state = LatticeState.homogeneous(3, 1, 1)

    def test_generator_columns_sum_to_zero(self):
        """
        Q conserves probability: every column sums to zero.
        """
        Q, states = generator_matrix(self.state, self.p)
        self.assertEqual(len(states), 10)
        np.testing.assert_allclose(np.asarray(Q.sum(axis=0)).ravel(), 0.0, atol=1e-12)

    def test_matches_matrix_exponential(self):
        """
        RK4 on the master equation agrees with exp(Q t) P0.
        """
        Q, states = generator_matrix(self.state, self.p)
        exact = master_equation_exact(self.state, self.p, t_final=5.0)
        p0 = np.zeros(len(states))
        p0[exact.index_of([1, 1])] = 1.0
        np.testing.assert_allclose(exact.probabilities, expm(5.0 * Q.toarray()) @ p0, atol=1e-9)
        self.assertAlmostEqual(exact.probabilities.sum(), 1.0, places=10)

    def test_two_cell_lattice(self):
        """
        Lattices enumerate the product of per-cell states.
        """
        state = LatticeState.from_counts([1, 0], [0, 1], 2)
        exact = master_equation_exact(state, ModelParams.reference_heterogeneous(), t_final=2.0)
        self.assertEqual(exact.states.shape, (36, 4))
        self.assertAlmostEqual(exact.probabilities.sum(), 1.0, places=10)
        self.assertTrue(np.all(exact.probabilities > -1e-12))

    def test_state_space_cap(self):
        """
        N = 100 has 5151 states, above the default cap.
        """
        with self.assertRaises(StateSpaceTooLargeError):
            generator_matrix(LatticeState.homogeneous(100, 10, 10), self.p)

    def test_unknown_state(self):
        """
        Looking up a count outside the enumeration is an error.
        """
        exact = master_equation_exact(self.state, self.p, t_final=0.0)
        with self.assertRaises(InvalidParameterError):
            exact.index_of([3, 3])

    def test_total_variation(self):
        """
        Disjoint distributions are at distance 1.
        """
        self.assertEqual(total_variation([1.0, 0.0], [0.0, 1.0]), 1.0)
        self.assertEqual(total_variation([0.5, 0.5], [0.5, 0.5]), 0.0)

    def test_direct_method_distribution(self):
        """
        Final counts of the direct method follow the master equation at t = 5.
        """
        exact = master_equation_exact(self.state, self.p, t_final=5.0)
        trajs = run_realizations(self.state, self.p, EngineConfig(engine="direct", seed=11, t_final=5.0), 2000)
        samples = np.array([final_counts(traj) for traj in trajs])
        empirical = empirical_distribution(samples, exact)
        self.assertAlmostEqual(empirical.sum(), 1.0)
        self.assertLess(total_variation(empirical, exact.probabilities), 0.08)


class TestStudies(unittest.TestCase):

    def setUp(self):
        self.p = ModelParams.reference_homogeneous()

    def test_convergence_study(self):
        """
        Errors against the mean field shrink from N = 10 to N = 10000.
        """
        cfg = EngineConfig(seed=1, t_final=5.0, record_stride=1.0)
        report = convergence_study(self.p, cfg, [10, 100, 1000, 10000], realizations=4)
        self.assertEqual(report.values, [10, 100, 1000, 10000])
        self.assertEqual(len(report.e_f), 4)
        self.assertLess(report.e_g[-1], report.e_g[0])
        self.assertIsInstance(report.slope_g, float)
        self.assertEqual(report.to_dict()["reference"], "meanfield")

    def test_accuracy_study(self):
        """
        Two sample sizes give per-engine errors and wall times but no slope.
        """
        clock = itertools.count(0.0, 0.5).__next__
        cfg = EngineConfig(seed=2, t_final=2.0, record_stride=1.0)
        reports = accuracy_study(self.p, cfg, ["ensemble", "tau-leaping"], [20, 40], realizations=2, clock=clock)
        self.assertEqual(sorted(reports), ["ensemble", "tau-leaping"])
        self.assertEqual(reports["ensemble"].values, [20, 40])
        self.assertEqual(reports["ensemble"].wall_times, [0.25, 0.25])
        self.assertIsNone(reports["ensemble"].slope_f)


class TestBenchmark(unittest.TestCase):

    def setUp(self):
        self.p = ModelParams.reference_homogeneous()
        self.cfg = EngineConfig(seed=0, t_final=1.0)
        self.builder = lambda n: LatticeState.homogeneous(int(n), int(n) // 4, int(n) // 2)

    def test_medians_with_stepping_clock(self):
        """
        A clock advancing one second per call gives medians of 1s and a flat exponent.
        """
        clock = itertools.count(0.0, 1.0).__next__
        report = benchmark_cost(["ensemble"], self.p, self.cfg, [10, 20, 40], self.builder, clock=clock)
        self.assertEqual(report.medians["ensemble"], [1.0, 1.0, 1.0])
        self.assertEqual(report.events["ensemble"], [10, 10, 10])
        self.assertAlmostEqual(report.exponents["ensemble"], 0.0, places=10)
        self.assertEqual(len(report.times["ensemble"][0]), 3)

    def test_param_sweep(self):
        """
        A parameter sweep rebuilds the parameters per value and fits no exponent.
        """
        clock = itertools.count(0.0, 1.0).__next__
        report = benchmark_cost(["ensemble"], self.p, self.cfg, [0.1, 0.3, 0.5], lambda v: self.builder(20),
                                sweep="param", param_builder=lambda v: self.p.replace(p1_r=v), clock=clock)
        self.assertEqual(report.sweep, "param")
        self.assertEqual(report.exponents, {})

    def test_too_fast_to_measure(self):
        """
        A clock that never advances yields a median below the timer resolution.
        """
        with self.assertRaises(MeasurementError):
            benchmark_cost(["ensemble"], self.p, self.cfg, [10], self.builder, clock=lambda: 0.0)

    def test_event_counts_must_agree(self):
        """
        Repetitions of one configuration must perform the same work.
        """
        runs = [mock.Mock(metadata={"steps": steps}) for steps in (5, 5, 6, 5)]
        clock = itertools.count(0.0, 1.0).__next__
        with mock.patch('predprey_ensemble.analysis.run_engine', side_effect=runs):
            with self.assertRaises(MeasurementError):
                benchmark_cost(["direct"], self.p, self.cfg, [10], self.builder, clock=clock)

    def test_repetitions_and_sweep_checked(self):
        """
        Fewer than 3 repetitions and parameter sweeps without a builder are rejected.
        """
        with self.assertRaises(InvalidParameterError):
            benchmark_cost(["ensemble"], self.p, self.cfg, [10], self.builder, repetitions=2)
        with self.assertRaises(InvalidParameterError):
            benchmark_cost(["ensemble"], self.p, self.cfg, [10], self.builder, sweep="param")


if __name__ == '__main__':
    unittest.main()
