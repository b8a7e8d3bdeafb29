import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from src.exceptions import InvalidInputError
from src.repository.tables import (
    read_decomposition,
    read_manifest,
    read_mask,
    read_traits,
    write_decomposition,
    write_edges,
    write_mask,
    write_table,
)
from src.schemas import AvailabilityMask, Edge, KruskalDecomposition, ScaleModes


class TablesTestCase(unittest.TestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def write(self, name, text):
        path = self.tmp / name
        path.write_text(text, encoding="utf-8")
        return path


class TestMask(TablesTestCase):

    def test_round_trip(self):
        mask = AvailabilityMask(gamma=np.array([[1, 1], [1, 0], [0, 1]]), subjects=["007", "b", "a"],
                                scale_ids=["fine", "coarse"])
        loaded = read_mask(write_mask(mask, self.tmp / "mask.csv"))
        np.testing.assert_array_equal(loaded.gamma, mask.gamma)
        self.assertEqual(loaded.subjects, ["007", "b", "a"])
        self.assertEqual(loaded.scale_ids, ["fine", "coarse"])

    def test_missing_pair(self):
        path = self.write("mask.csv", "subject_id,scale_id,available\n1,a,1\n1,b,1\n2,a,1\n")
        with self.assertRaises(InvalidInputError):
            read_mask(path)

    def test_duplicated_pair(self):
        path = self.write("mask.csv", "subject_id,scale_id,available\n1,a,1\n1,a,0\n")
        with self.assertRaises(InvalidInputError):
            read_mask(path)

    def test_subject_without_scans(self):
        path = self.write("mask.csv", "subject_id,scale_id,available\n1,a,1\n2,a,0\n")
        with self.assertRaises(InvalidInputError):
            read_mask(path)

    def test_missing_columns(self):
        with self.assertRaises(InvalidInputError):
            read_mask(self.write("mask.csv", "subject_id,available\n1,1\n"))


class TestTraits(TablesTestCase):

    def test_missing_cells_and_kinds(self):
        traits = self.write("traits.csv", "subject_id,age,smoker\n01,30,1\n02,,0\n03,41.5,1\n")
        kinds = self.write("kinds.csv", "trait,kind,category\nsmoker,binary,substance use\nghost,ordinal,\n")
        table = read_traits(traits, kinds)
        self.assertEqual(table.subjects, ["01", "02", "03"])
        self.assertTrue(np.isnan(table.trait("age")[1]))
        self.assertEqual(table.trait("age")[2], 41.5)
        self.assertEqual(table.kinds, {"age": "continuous", "smoker": "binary"})
        self.assertEqual(table.categories, {"smoker": "substance use"})
        with self.assertRaises(InvalidInputError):
            table.trait("ghost")

    def test_non_numeric(self):
        with self.assertRaises(InvalidInputError):
            read_traits(self.write("traits.csv", "subject_id,age\n1,old\n2,3\n"))

    def test_invalid_binary(self):
        traits = self.write("traits.csv", "subject_id,group\n1,0\n2,1\n3,2\n")
        kinds = self.write("kinds.csv", "trait,kind\ngroup,binary\n")
        with self.assertRaises(InvalidInputError):
            read_traits(traits, kinds)


class TestOutputs(TablesTestCase):

    def test_equal_tables_give_identical_files(self):
        frame = pd.DataFrame({"trait": ["a", "b"], "p": [0.1 + 0.2, 1 / 3]})
        first = write_table(frame, self.tmp / "one.csv").read_bytes()
        second = write_table(frame.copy(), self.tmp / "two.csv").read_bytes()
        self.assertEqual(first, second)
        self.assertEqual(pd.read_csv(self.tmp / "one.csv", float_precision="round_trip")["p"].tolist(),
                         [0.1 + 0.2, 1 / 3])

    def test_edges(self):
        path = write_edges([Edge(node_a=0, node_b=3, value=-2.5), Edge(node_a=1, node_b=2, value=1.0)],
                           self.tmp / "edges.csv")
        self.assertEqual(path.read_text(encoding="utf-8"), "node_a,node_b,value\n0,3,-2.5\n1,2,1\n")


class TestDecomposition(TablesTestCase):

    def setUp(self):
        super().setUp()
        rng = np.random.default_rng(1)
        U = rng.standard_normal((5, 2))
        U /= np.linalg.norm(U, axis=0)
        scales = [ScaleModes(scale_id=f"scale_{j + 1}", d=rng.standard_normal(2),
                             V=np.linalg.qr(rng.standard_normal((P, 2)))[0]) for j, P in enumerate((4, 6))]
        self.decomp = KruskalDecomposition(scales=scales, U=U, subjects=["a", "b", "c", "d", "e"],
                                           objective_trace=[[1.0, 1.5], [0.25]], converged=[True, False],
                                           status=["component 2 hit the iteration cap"])

    def test_round_trip(self):
        directory = write_decomposition(self.decomp, self.tmp / "fit", {"config": {"K": 2}})
        loaded = read_decomposition(directory)
        np.testing.assert_array_equal(loaded.U, self.decomp.U)
        for a, b in zip(loaded.scales, self.decomp.scales):
            self.assertEqual(a.scale_id, b.scale_id)
            np.testing.assert_array_equal(a.V, b.V)
            np.testing.assert_array_equal(a.d, b.d)
        self.assertEqual(loaded.subjects, self.decomp.subjects)
        self.assertEqual(loaded.objective_trace, self.decomp.objective_trace)
        self.assertEqual(loaded.converged, [True, False])
        self.assertEqual(loaded.status, self.decomp.status)

    def test_manifest(self):
        directory = write_decomposition(self.decomp, self.tmp / "fit", {"config": {"K": 2}})
        manifest = read_manifest(directory)
        self.assertEqual(manifest["config"], {"K": 2})
        self.assertEqual(manifest["scales"], ["scale_1", "scale_2"])
        self.assertEqual(sorted(p.name for p in directory.iterdir()),
                         ["U.csv", "V_scale_1.csv", "V_scale_2.csv", "d.csv", "manifest.yaml"])

    def test_broken_invariants(self):
        directory = write_decomposition(self.decomp, self.tmp / "fit", {})
        frame = pd.read_csv(directory / "U.csv", dtype={"subject_id": str})
        frame["u1"] *= 2
        frame.to_csv(directory / "U.csv", index=False)
        with self.assertRaises(InvalidInputError):
            read_decomposition(directory)

    def test_scales_disagree(self):
        directory = write_decomposition(self.decomp, self.tmp / "fit", {})
        manifest = yaml.safe_load((directory / "manifest.yaml").read_text(encoding="utf-8"))
        manifest["scales"] = ["scale_2", "scale_1"]
        (directory / "manifest.yaml").write_text(yaml.safe_dump(manifest), encoding="utf-8")
        with self.assertRaises(InvalidInputError):
            read_decomposition(directory)


if __name__ == '__main__':
    unittest.main()
