import unittest

import numpy as np

from predprey_ensemble.errors import (
    CarryingCapacityError,
    DegenerateSampleError,
    EquilibriumUndefinedError,
    InfeasibleEventError,
    InvalidDimensionError,
    InvalidParameterError,
)
from predprey_ensemble.lattice_model import (
    LatticeState,
    ModelParams,
    _shift_matrix,
    apply_event,
    build_stoichiometry,
    build_stoichiometry_heterogeneous,
    build_stoichiometry_homogeneous,
    centered_blob,
    equilibrium,
    migration_share,
    neighbor_table,
    propensities,
    scale_params,
    transition_rates,
    transition_rates_heterogeneous,
    transition_rates_homogeneous,
    uniform,
)


class TestModelParams(unittest.TestCase):

    def test_reference_defaults(self):
        """
        The homogeneous preset carries the reference rates.
        """
        p = ModelParams.reference_homogeneous()
        self.assertEqual((p.b_r, p.d1_r, p.d2_r, p.p1_r, p.p2_r, p.mu), (0.1, 0.1, 0.0, 0.25, 0.05, 0.5))

    def test_fractions_exceeding_one_rejected(self):
        """
        q1 + q2 > 1 leaves no room for deaths and is rejected.
        """
        with self.assertRaises(InvalidParameterError):
            ModelParams(q1=0.6, q2=0.6)

    def test_negative_rate_rejected(self):
        """
        Rates must be non-negative.
        """
        with self.assertRaises(InvalidParameterError):
            ModelParams(d1_r=-0.1)

    def test_probability_overflow(self):
        """
        A step that pushes a per-step probability above 1 is rejected with an overflow message.
        """
        with self.assertRaises(InvalidParameterError) as ctx:
            ModelParams(tau=5.0)
        self.assertIn("Probability overflow", str(ctx.exception))

    def test_ensemble_probabilities_weight_pairs_twice(self):
        """
        Pair events of the ensemble engines fire with twice the ordered-draw probability;
        single-individual events keep it.
        """
        p = ModelParams.reference_homogeneous()
        probs = p.ensemble_probabilities(0.1)
        ordered = p.classic_probabilities(0.1)
        self.assertAlmostEqual(probs["birth"], 0.02)
        self.assertAlmostEqual(probs["predation"], 0.06)
        self.assertAlmostEqual(probs["predator_death"], 0.01)
        for event in ("birth", "predation"):
            self.assertAlmostEqual(probs[event], 2 * ordered[event])
        for event in ("predator_death", "prey_death", "predator_migration", "prey_migration"):
            self.assertAlmostEqual(probs[event], ordered[event])

    def test_params_hash(self):
        """
        The parameter hash is stable and sensitive to every field.
        """
        p = ModelParams.reference_homogeneous()
        self.assertEqual(p.params_hash(), ModelParams.reference_homogeneous().params_hash())
        self.assertNotEqual(p.params_hash(), p.replace(mu=0.4).params_hash())
        self.assertEqual(len(p.params_hash()), 16)


class TestScaling(unittest.TestCase):

    def test_homogeneous_scaling(self):
        """
        Homogeneous scaling maps q1 to mu and q2 to 0.
        """
        sp = scale_params(ModelParams.reference_homogeneous(), homogeneous=True)
        self.assertAlmostEqual(sp.b_t, 0.05)
        self.assertAlmostEqual(sp.p1_t, 0.125)
        self.assertAlmostEqual(sp.p2_t, 0.025)
        self.assertAlmostEqual(sp.d1_t, 0.05)
        self.assertAlmostEqual(sp.alpha, 0.4)
        self.assertAlmostEqual(sp.r, 0.1)
        self.assertAlmostEqual(sp.q_cap, 1.0)
        self.assertEqual(sp.m1_t, 0.0)

    def test_heterogeneous_scaling(self):
        """
        Heterogeneous scaling uses q1 for pairs, 1 - q1 - q2 for deaths and q2 for migration.
        """
        sp = scale_params(ModelParams.reference_heterogeneous())
        self.assertAlmostEqual(sp.b_t, 0.03)
        self.assertAlmostEqual(sp.d1_t, 0.04)
        self.assertAlmostEqual(sp.m1_t, 0.15)

    def test_carrying_capacity_undefined(self):
        """
        Prey deaths without births leave the carrying capacity undefined.
        """
        with self.assertRaises(CarryingCapacityError):
            scale_params(ModelParams(b_r=0.0, d2_r=0.1), homogeneous=True)

    def test_equilibrium_reference_rates(self):
        """
        The reference rates give f* = g* = 0.2.
        """
        f_star, g_star = equilibrium(scale_params(ModelParams.reference_homogeneous(), homogeneous=True))
        self.assertAlmostEqual(f_star, 0.2, delta=1e-12)
        self.assertAlmostEqual(g_star, 0.2, delta=1e-12)

    def test_equilibrium_heterogeneous_row(self):
        """
        The heterogeneous row follows the same closed form with q1 and 1 - q1 - q2 scaling.
        """
        f_star, g_star = equilibrium(scale_params(ModelParams.reference_heterogeneous()))
        self.assertAlmostEqual(g_star, 0.04 / 0.15, places=12)
        self.assertAlmostEqual(f_star, (2 * 0.03 * 0.075 - 0.03 * 0.04) / (2 * 0.075 * (0.075 + 0.015 + 0.03)),
                               places=12)

    def test_equilibrium_undefined_without_conversion(self):
        """
        p1 = 0 makes the equilibrium undefined.
        """
        with self.assertRaises(EquilibriumUndefinedError):
            equilibrium(scale_params(ModelParams(p1_r=0.0), homogeneous=True))


class TestLatticeState(unittest.TestCase):

    def test_conservation_enforced(self):
        """
        Counts exceeding the capacity are infeasible.
        """
        with self.assertRaises(InfeasibleEventError):
            LatticeState.from_counts([6], [6], 10)

    def test_vector_layout(self):
        """
        The state vector stacks the A, B and E blocks in C order.
        """
        state = LatticeState.from_counts([[1, 2], [3, 4]], [[0, 1], [1, 0]], 5)
        x = state.as_vector()
        self.assertEqual(x.tolist(), [1, 2, 3, 4, 0, 1, 1, 0, 4, 2, 1, 1])
        self.assertEqual(LatticeState.from_vector(x, (2, 2), 5).A.tolist(), [[1, 2], [3, 4]])

    def test_shape_mismatch(self):
        """
        A and B must share the grid shape.
        """
        with self.assertRaises(InvalidDimensionError):
            LatticeState(A=np.zeros(3), B=np.zeros(2), E=np.zeros(3), nc=0)

    def test_uniform_rejects_overfull_cells(self):
        """
        Initial fractions summing above 1 are rejected.
        """
        with self.assertRaises(InvalidParameterError):
            uniform((4,), 10, 0.6, 0.6)

    def test_centered_blob_1d(self):
        """
        1-D blob puts Nc/4 predators and Nc/2 prey in the central cells.
        """
        state = centered_blob((20,), 100, width_frac=0.1)
        self.assertEqual(state.A.tolist(), [0] * 8 + [25] * 4 + [0] * 8)
        self.assertEqual(state.B.tolist(), [0] * 8 + [50] * 4 + [0] * 8)

    def test_centered_blob_2d(self):
        """
        2-D blob is a prey square inside a predator ring.
        """
        state = centered_blob((10, 10), 100, width_frac=0.1)
        self.assertEqual(int(state.B.sum()), 50)
        self.assertEqual(state.B[5, 5], 50)
        self.assertEqual(int((state.A == 25).sum()), 8)
        self.assertEqual(state.A[4, 4], 25)


class TestStoichiometry(unittest.TestCase):

    def test_homogeneous_shape(self):
        """
        The single-cell matrix is the 5 x 3 local table.
        """
        V = build_stoichiometry_homogeneous()
        self.assertEqual(V.to_dense().shape, (5, 3))
        self.assertEqual(V.row(0).tolist(), [0, 1, -1])

    def test_heterogeneous_shape(self):
        """
        Mc = 3 gives 13 Mc rows and 3 Mc columns.
        """
        V = build_stoichiometry_heterogeneous(3)
        self.assertEqual(V.to_dense().shape, (39, 9))

    def test_two_dimensional_shape(self):
        """
        2-D grids add four migration blocks: 21 rows per cell.
        """
        V = build_stoichiometry((2, 3))
        self.assertEqual(V.to_dense().shape, (126, 18))

    def test_row_sums_zero(self):
        """
        Every event conserves the per-cell total, so every row sums to zero.
        """
        for mc in (1, 2, 5, 10):
            V = build_stoichiometry_heterogeneous(mc)
            np.testing.assert_array_equal(V.row_sums(), np.zeros(13 * mc))

    def test_migration_conserves_species_totals(self):
        """
        Migration rows move individuals without changing the lattice totals of A or B.
        """
        V = build_stoichiometry_heterogeneous(5).to_dense()
        migration = V[25:]
        np.testing.assert_array_equal(migration[:, :5].sum(axis=1), 0)
        np.testing.assert_array_equal(migration[:, 5:10].sum(axis=1), 0)

    def test_shift_matrix_left(self):
        """
        The left shift matrix has -1 on the diagonal, +1 below it and an empty first row.
        """
        M = _shift_matrix(neighbor_table((3,))[0]).toarray()
        np.testing.assert_array_equal(M, [[0, 0, 0], [1, -1, 0], [0, 1, -1]])

    def test_invalid_cell_count(self):
        """
        Mc < 1 is rejected.
        """
        with self.assertRaises(InvalidDimensionError):
            build_stoichiometry_heterogeneous(0)

    def test_neighbor_table_2d(self):
        """
        Directions are (-x, +x, -y, +y) with cell index ix * Mcy + iy.
        """
        table = neighbor_table((2, 3))
        self.assertEqual(table[:, 0].tolist(), [-1, 3, -1, 1])
        self.assertEqual(table[:, 4].tolist(), [1, -1, 3, 5])
        self.assertFalse(table.flags.writeable)

    def test_apply_event(self):
        """
        Applying a birth moves one empty slot to prey; an infeasible death raises.
        """
        V = build_stoichiometry_homogeneous()
        state = LatticeState.homogeneous(4, 1, 1)
        self.assertEqual(apply_event(state, V, 0).as_vector().tolist(), [1, 2, 1])
        with self.assertRaises(InfeasibleEventError):
            apply_event(LatticeState.homogeneous(4, 0, 2), V, 3)


class TestTransitionRates(unittest.TestCase):

    def test_homogeneous_birth_rate(self):
        """
        pi_1 = 2 mu b (B/N) (E/(N-1)) for (250, 500, 250).
        """
        rates = transition_rates_homogeneous(LatticeState.homogeneous(1000, 250, 500), ModelParams.reference_homogeneous())
        self.assertAlmostEqual(rates[0], 0.05 * 250 / 999, places=12)
        self.assertAlmostEqual(rates[0], 0.012512, delta=1e-6)
        self.assertAlmostEqual(rates[3], 0.5 * 0.1 * 0.25, places=12)
        self.assertEqual(rates[4], 0.0)

    def test_degenerate_sample(self):
        """
        A single slot cannot form pairs.
        """
        with self.assertRaises(DegenerateSampleError):
            transition_rates(LatticeState.homogeneous(1, 0, 1), ModelParams())

    def test_heterogeneous_migration_rates(self):
        """
        Migration rates are m q2 X E / Nc^2 per direction and vanish through the boundary.
        """
        state = LatticeState.from_counts([2, 2, 2], [2, 2, 2], 10)
        rates = transition_rates(state, ModelParams.reference_heterogeneous())
        self.assertEqual(len(rates), 39)
        # A out of cell 0 toward the missing left neighbour
        self.assertEqual(rates[15], 0.0)
        self.assertAlmostEqual(rates[16], 0.15 / 100 * 2 * 6, places=12)
        self.assertTrue(np.all(rates >= 0))

    def test_two_dimensional_share(self):
        """
        In 2-D each of the four directions carries half the per-axis migration rate.
        """
        self.assertEqual(migration_share((4, 4)), 0.5)
        state = LatticeState.from_counts(np.full((2, 2), 2), np.full((2, 2), 2), 10)
        rates = transition_rates(state, ModelParams.reference_heterogeneous())
        self.assertEqual(len(rates), 21 * 4)
        # -x block starts after the 5 local families; cell 2 = (1, 0) has a -x neighbour
        self.assertAlmostEqual(rates[20 + 2], 0.5 * 0.15 / 100 * 2 * 6, places=12)

    def test_propensities_scale_with_capacity(self):
        """
        Propensities are Nc times the transition rates.
        """
        state = LatticeState.homogeneous(100, 20, 20)
        p = ModelParams.reference_homogeneous()
        np.testing.assert_allclose(propensities(state, p), 100 * transition_rates(state, p))

    def test_rates_follow_reflection(self):
        """
        Mirroring the lattice along an axis mirrors the rates and swaps the two directions of that axis.
        """
        rng = np.random.default_rng(3)
        p = ModelParams.reference_heterogeneous()
        cases = [((7,), 0, [1, 0]), ((4, 5), 0, [1, 0, 2, 3]), ((4, 5), 1, [0, 1, 3, 2])]
        for shape, axis, swapped in cases:
            with self.subTest(shape=shape, axis=axis):
                a = rng.integers(0, 5, size=shape)
                b = rng.integers(0, 5, size=shape)
                rates = transition_rates_heterogeneous(LatticeState.from_counts(a, b, 10), p)
                mirrored = LatticeState.from_counts(np.flip(a, axis), np.flip(b, axis), 10)
                np.testing.assert_allclose(transition_rates_heterogeneous(mirrored, p),
                                           _mirror_rates(rates, shape, axis, swapped), rtol=1e-12, atol=0)


def _mirror_rates(rates: np.ndarray, shape, axis: int, swapped) -> np.ndarray:
    blocks = rates.reshape((-1,) + tuple(shape))
    local = np.flip(blocks[:5], axis + 1)
    moves = blocks[5:].reshape((len(swapped), 4) + tuple(shape))[swapped]
    return np.concatenate([local.ravel(), np.flip(moves, axis + 2).ravel()])


if __name__ == '__main__':
    unittest.main()
