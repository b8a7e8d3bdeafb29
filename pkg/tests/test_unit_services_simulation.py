import unittest

import numpy as np
import pytest

from src.exceptions import DegenerateError, InvalidInputError
from src.schemas import FitConfig, SimulationConfig, StudyConfig, TensorStack
from src.services.simulation import (
    coarsen,
    coarsen_stack,
    generate,
    generate_parcellated,
    orthonormalize,
    parcellation_partition,
    run_recovery_study,
)


class TestOrthonormalize(unittest.TestCase):

    def test_orthonormal_columns(self):
        Q = orthonormalize(np.random.default_rng(0).gamma(1.0, 1.0, size=(8, 3)))
        np.testing.assert_allclose(Q.T @ Q, np.eye(3), atol=1e-12)

    def test_keeps_first_direction(self):
        columns = np.array([[3.0, 1.0], [4.0, 1.0], [0.0, 1.0]])
        np.testing.assert_allclose(orthonormalize(columns)[:, 0], [0.6, 0.8, 0.0], atol=1e-15)

    def test_dependent_columns(self):
        with self.assertRaises(DegenerateError):
            orthonormalize(np.array([[1.0, 2.0], [1.0, 2.0]]))


class TestGenerate(unittest.TestCase):

    def test_deterministic(self):
        config = SimulationConfig(scales=[5, 7], N=6, true_rank=2, noise="normal", seed=3)
        a, b = generate(config), generate(config)
        for x, y in zip(a.stacks, b.stacks):
            np.testing.assert_array_equal(x.values, y.values)
        np.testing.assert_array_equal(a.U, b.U)

    def test_clean_stacks_are_the_planted_model(self):
        data = generate(SimulationConfig(scales=[5, 7, 9], N=6, true_rank=3, seed=1))
        for x, modes in zip(data.clean, data.modes):
            expected = np.einsum("h,ah,bh,ih->abi", modes.d, modes.V, modes.V, data.U)
            np.testing.assert_allclose(x.values, expected, atol=1e-12)
            self.assertAlmostEqual(np.linalg.norm(x.values), 1.0, delta=1e-12)
            np.testing.assert_allclose(modes.V.T @ modes.V, np.eye(3), atol=1e-12)
        for x, y in zip(data.stacks, data.clean):
            np.testing.assert_array_equal(x.values, y.values)
        self.assertEqual([x.scale_id for x in data.stacks], ["scale_1", "scale_2", "scale_3"])

    def test_unnormalized_weights(self):
        data = generate(SimulationConfig(scales=[4], N=5, true_rank=1, normalization="none"))
        np.testing.assert_array_equal(data.modes[0].d, [1.0])

    def test_max_normalization(self):
        data = generate(SimulationConfig(scales=[6], N=4, true_rank=2, normalization="max"))
        self.assertAlmostEqual(np.max(np.abs(data.clean[0].values)), 1.0, delta=1e-12)

    def test_sparse_modes(self):
        data = generate(SimulationConfig(scales=[20], N=5, true_rank=2, structure="sparse", sparsity=0.75))
        self.assertEqual(int(np.sum(data.modes[0].V[:, 0] == 0.0)), 15)

    def test_normal_noise(self):
        data = generate(SimulationConfig(scales=[6], N=4, true_rank=2, noise="normal", seed=2))
        clean, noisy = data.clean[0].values, data.stacks[0].values
        sds = data.noise["scales"]["scale_1"]["sd"]
        self.assertEqual(data.noise["kind"], "normal")
        self.assertEqual(len(sds), 4)
        for i in range(4):
            self.assertAlmostEqual(sds[i], np.ptp(clean[:, :, i]) / 3, delta=1e-12)
        self.assertTrue(np.any(noisy != clean))
        np.testing.assert_array_equal(noisy, noisy.transpose(1, 0, 2))

    def test_rademacher_sign_flips(self):
        data = generate(SimulationConfig(scales=[8], N=3, true_rank=2, noise="rademacher", seed=4))
        clean, noisy = data.clean[0].values, data.stacks[0].values
        flips = data.noise["scales"]["scale_1"]["flips_per_subject"]
        self.assertEqual(flips, 7)
        a, b = np.triu_indices(8, k=1)
        for i in range(3):
            changed = noisy[a, b, i] != clean[a, b, i]
            self.assertEqual(int(changed.sum()), flips)
            np.testing.assert_array_equal(noisy[a, b, i][changed], -clean[a, b, i][changed])
            np.testing.assert_array_equal(np.diag(noisy[:, :, i]), np.diag(clean[:, :, i]))

    def test_rademacher_toggle(self):
        config = SimulationConfig(scales=[8], N=2, true_rank=1, noise="rademacher", flip_mode="toggle", seed=5)
        data = generate(config)
        clean, noisy = data.clean[0].values, data.stacks[0].values
        a, b = np.triu_indices(8, k=1)
        changed = noisy[a, b, 0] != clean[a, b, 0]
        np.testing.assert_allclose(noisy[a, b, 0][changed], 1.0 - clean[a, b, 0][changed], atol=1e-15)

    def test_rank_bound(self):
        with self.assertRaises(ValueError):
            SimulationConfig(scales=[3, 8], N=10, true_rank=4)


class TestCoarsen(unittest.TestCase):

    def setUp(self):
        a = np.random.default_rng(6).standard_normal((6, 6))
        self.fine = a + a.T

    def test_identity_partition(self):
        expected = self.fine.copy()
        np.fill_diagonal(expected, 0.0)
        np.testing.assert_allclose(coarsen(self.fine, np.arange(6)).values, expected, atol=1e-12)

    def test_all_to_one(self):
        np.testing.assert_array_equal(coarsen(self.fine, np.zeros(6, dtype=int)).values, [[0.0]])

    def test_matches_loops(self):
        partition = np.array([0, 0, 1, 1, 2, 2])
        coarse = coarsen(self.fine, partition).values
        for g in range(3):
            for h in range(3):
                expected = 0.0 if g == h else sum(self.fine[x, y] for x in range(6) for y in range(6)
                                                  if partition[x] == g and partition[y] == h)
                self.assertAlmostEqual(coarse[g, h], expected, delta=1e-12)

    def test_invalid_partitions(self):
        for partition in ([0, 2, 2, 0, 0, 0], [0, 1], [0.0, 0.0, 1.0, 1.0, 2.0, 2.0], [-1, 0, 0, 0, 0, 0]):
            with self.assertRaises(InvalidInputError):
                coarsen(self.fine, np.array(partition))

    def test_stack_matches_slices(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((6, 6, 3))
        x = TensorStack(scale_id="fine", values=a + a.transpose(1, 0, 2))
        partition = np.array([1, 0, 1, 2, 2, 0])
        coarse = coarsen_stack(x, partition, "coarse")
        self.assertEqual(coarse.scale_id, "coarse")
        for i in range(3):
            np.testing.assert_allclose(coarse.values[:, :, i], coarsen(x.values[:, :, i], partition).values,
                                       atol=1e-12)


class TestParcellations(unittest.TestCase):

    def test_partitions(self):
        np.testing.assert_array_equal(parcellation_partition(2, 2, 2, 1, 1), [0, 0, 1, 1, 2, 2, 3, 3])
        np.testing.assert_array_equal(parcellation_partition(2, 2, 4, 1, 2),
                                      [0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5])
        np.testing.assert_array_equal(parcellation_partition(1, 2, 2, 2, 2), [0, 1, 2, 3])

    def test_not_a_coarsening(self):
        with self.assertRaises(InvalidInputError):
            parcellation_partition(2, 3, 2, 2, 1)

    def test_nested_dataset(self):
        config = SimulationConfig(N=5, true_rank=2, seed=8)
        data = generate_parcellated(config, [(1, 1), (2, 2)], regions=3)
        self.assertEqual([x.scale_id for x in data.stacks], ["L1R1", "L2R2"])
        self.assertEqual([x.P for x in data.stacks], [6, 12])
        self.assertEqual([m.scale_id for m in data.modes], ["L2R2"])
        coarse = coarsen_stack(data.clean[1], parcellation_partition(3, 2, 2, 1, 1), "L1R1").values
        np.testing.assert_allclose(coarse / np.linalg.norm(coarse), data.clean[0].values, atol=1e-12)

    def test_rank_above_coarsest(self):
        with self.assertRaises(InvalidInputError):
            generate_parcellated(SimulationConfig(N=5, true_rank=3), [(1, 1), (2, 2)], regions=1)


class TestRecoveryStudy(unittest.TestCase):

    def test_table_layout(self):
        config = StudyConfig(simulation=SimulationConfig(scales=[6, 8], N=10, true_rank=2, noise="normal"),
                             structures=["random"], noises=["normal"], repetitions=2, max_k=2,
                             fit=FitConfig(K=2, restarts=1))
        table = run_recovery_study(config)
        self.assertEqual(list(table.columns), ["structure", "noise", "K", "method", "mean_ve", "sd_ve"])
        self.assertEqual(len(table), 6)
        self.assertEqual(set(table["method"]), {"multi", "single_scale_1", "single_scale_2"})
        self.assertTrue(table["mean_ve"].between(0.0, 1.0).all())
        self.assertEqual(table.attrs["notes"], [])

    def test_max_k_bound(self):
        with self.assertRaises(ValueError):
            StudyConfig(simulation=SimulationConfig(scales=[4, 8], N=10, true_rank=2), max_k=5)


@pytest.mark.slow
def test_multiscale_fit_matches_or_beats_every_single_scale():
    config = StudyConfig(simulation=SimulationConfig(scales=[25, 50, 75], N=100, true_rank=10),
                         structures=["random", "sparse"], noises=["normal", "rademacher"], repetitions=3, max_k=10,
                         fit=FitConfig(K=10, restarts=2))
    table = run_recovery_study(config)
    assert table.attrs["notes"] == []
    at_rank = table[table["K"] == 10]
    for (structure, noise), cell in at_rank.groupby(["structure", "noise"]):
        means = cell.set_index("method")["mean_ve"]
        best_single = means.drop("multi").max()
        if noise == "normal":
            assert means["multi"] >= best_single, (structure, noise, means.to_dict())
        else:
            assert means["multi"] >= best_single - 0.02, (structure, noise, means.to_dict())
    assert len(at_rank.groupby(["structure", "noise"])) == 4
