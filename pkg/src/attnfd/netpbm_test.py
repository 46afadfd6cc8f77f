import tempfile
import unittest
from pathlib import Path

import numpy as np

from .errors import MissingFileError, ParseError
from .netpbm import read_pgm, read_ppm, write_pgm, write_ppm

# 2x2 RGB: red, green / blue, white, with a header comment.
PPM_2X2 = b"P6\n# fixture\n2 2\n255\n" + bytes([255, 0, 0, 0, 255, 0, 0, 0, 255, 255, 255, 255])


class TestNetpbm(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def _file(self, name, data):
        path = self.dir / name
        path.write_bytes(data)
        return path

    def test_read_known_ppm(self):
        pixels = read_ppm(self._file("a.ppm", PPM_2X2))
        self.assertEqual(pixels.shape, (2, 2, 3))
        np.testing.assert_array_equal(pixels[0, 0], [255, 0, 0])
        np.testing.assert_array_equal(pixels[1, 0], [0, 0, 255])
        np.testing.assert_array_equal(pixels[1, 1], [255, 255, 255])

    def test_write_then_read(self):
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, size=(3, 5, 3), dtype=np.uint8)
        labels = rng.integers(0, 256, size=(3, 5), dtype=np.uint8)
        write_ppm(self.dir / "x.ppm", pixels)
        write_pgm(self.dir / "x.pgm", labels)
        np.testing.assert_array_equal(read_ppm(self.dir / "x.ppm"), pixels)
        np.testing.assert_array_equal(read_pgm(self.dir / "x.pgm"), labels)
        self.assertTrue((self.dir / "x.pgm").read_bytes().startswith(b"P5\n5 3\n255\n"))

    def test_bad_magic(self):
        with self.assertRaises(ParseError) as ctx:
            read_pgm(self._file("a.pgm", PPM_2X2))
        self.assertEqual(ctx.exception.offset, 0)

    def test_bad_token_offset(self):
        with self.assertRaises(ParseError) as ctx:
            read_ppm(self._file("a.ppm", b"P6 2 x2 255\n" + bytes(12)))
        self.assertEqual(ctx.exception.offset, 5)

    def test_unsupported_maxval(self):
        with self.assertRaises(ParseError):
            read_pgm(self._file("a.pgm", b"P5\n1 1\n65535\n\x00\x00"))

    def test_truncated(self):
        with self.assertRaises(ParseError):
            read_pgm(self._file("a.pgm", b"P5\n2 2"))
        with self.assertRaises(ParseError) as ctx:
            read_pgm(self._file("b.pgm", b"P5\n2 2\n255\n\x00"))
        self.assertEqual(ctx.exception.offset, 11)

    def test_missing_file(self):
        with self.assertRaises(MissingFileError):
            read_ppm(self.dir / "absent.ppm")


if __name__ == "__main__":
    unittest.main()
