import tempfile
import unittest
from pathlib import Path

import numpy as np
import orjson

from src.exceptions import InvalidInputError
from src.repository.tensors import MAGIC_LINE, decode_tensor, encode_tensor, read_tensor, write_tensor
from src.schemas import TensorStack


class TestTensorFile(unittest.TestCase):

    def setUp(self):
        a = np.random.default_rng(0).standard_normal((4, 4, 3))
        self.x = TensorStack(scale_id="scale_1", values=a + a.transpose(1, 0, 2), subjects=["s01", "s02", "007"])

    def test_round_trip_is_exact(self):
        data = encode_tensor(self.x)
        y = decode_tensor(data)
        np.testing.assert_array_equal(y.values, self.x.values)
        self.assertEqual(y.subjects, ["s01", "s02", "007"])
        self.assertEqual(y.scale_id, "scale_1")
        self.assertEqual(encode_tensor(y), data)

    def test_layout(self):
        data = encode_tensor(self.x)
        self.assertTrue(data.startswith(b"MGPCA1\n"))
        end = data.index(b"\n", len(MAGIC_LINE))
        header = orjson.loads(data[len(MAGIC_LINE):end])
        self.assertEqual((header["P"], header["N"], header["dtype"]), (4, 3, "<f8"))
        payload = data[end + 1:]
        self.assertEqual(len(payload), 4 * 4 * 3 * 8)
        first = np.frombuffer(payload[:4 * 4 * 8], dtype="<f8")
        np.testing.assert_array_equal(first, self.x.values[:, :, 0].ravel())

    def test_bad_magic(self):
        with self.assertRaises(InvalidInputError):
            decode_tensor(b"NOTATENSOR\n{}\n")

    def test_truncated_payload(self):
        with self.assertRaises(InvalidInputError):
            decode_tensor(encode_tensor(self.x)[:-8])

    def test_malformed_header(self):
        with self.assertRaises(InvalidInputError):
            decode_tensor(MAGIC_LINE + b"{not json\n")
        header = orjson.dumps({"magic": "MGPCA1", "scale_id": "a", "P": 2, "N": 2, "subjects": ["1"]})
        with self.assertRaises(InvalidInputError):
            decode_tensor(MAGIC_LINE + header + b"\n" + bytes(64))

    def test_asymmetric_payload(self):
        header = orjson.dumps({"magic": "MGPCA1", "scale_id": "a", "P": 2, "N": 1, "subjects": ["1"]})
        payload = np.array([0.0, 1.0, 2.0, 0.0], dtype="<f8").tobytes()
        with self.assertRaises(InvalidInputError):
            decode_tensor(MAGIC_LINE + header + b"\n" + payload)

    def test_write_and_read(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_tensor(self.x, Path(tmp) / "nested" / "scale_1.tensor")
            self.assertTrue(path.exists())
            np.testing.assert_array_equal(read_tensor(path).values, self.x.values)


if __name__ == '__main__':
    unittest.main()
