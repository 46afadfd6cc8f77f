import unittest

import numpy as np

from .errors import ParseError
from .tensor import Tensor
from .tensor_io import format_tensor, parse_tensor


class TestTensorDump(unittest.TestCase):
    def test_format(self):
        text = format_tensor(np.arange(3.0).reshape(1, 3))
        self.assertEqual(text, "2 1 3\n0.0 1.0 2.0\n")

    def test_parse_keeps_full_precision(self):
        values = np.random.default_rng(0).normal(size=(2, 3, 4))
        parsed = parse_tensor(format_tensor(Tensor(values)))
        self.assertEqual(parsed.shape, (2, 3, 4))
        np.testing.assert_array_equal(parsed.data, values)

    def test_malformed(self):
        for text in ("", "2 x 3\n", "2 3\n1 2 3\n", "1 3\n1 2\n"):
            with self.assertRaises(ParseError):
                parse_tensor(text)
        with self.assertRaises(ParseError) as ctx:
            parse_tensor("1 2\n1 y\n")
        self.assertEqual(ctx.exception.offset, 4)


if __name__ == "__main__":
    unittest.main()
