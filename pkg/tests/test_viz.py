import numpy as np

from attnfd.attention import CbamParams
from attnfd.distillation import Projector
from attnfd.tensor import Tensor
from attnfd.viz import MID_GRAY, TapAttention, heatmaps, minmax_to_bytes


def _feature(c, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=(1, c, 4, 6)))


def test_teacher_maps():
    rng = np.random.default_rng(1)
    f = _feature(8)
    maps = heatmaps(f, TapAttention(CbamParams.initialize(8, 4, rng)))
    assert list(maps) == ["raw", "channel", "refined", "spatial"]
    np.testing.assert_array_equal(maps["raw"], f.data[0].mean(axis=0))
    assert all(m.shape == (4, 6) for m in maps.values())


def test_projected_student_keeps_its_own_feature():
    rng = np.random.default_rng(2)
    f = _feature(4)
    projector = Projector.initialize(4, 8, rng)
    maps = heatmaps(f, TapAttention(CbamParams.initialize(8, 4, rng), projector))
    assert list(maps) == ["raw", "projected", "channel", "refined", "spatial"]
    np.testing.assert_array_equal(maps["raw"], f.data[0].mean(axis=0))
    assert not np.allclose(maps["projected"], maps["raw"])


def test_every_map_spans_the_byte_range():
    rng = np.random.default_rng(3)
    maps = heatmaps(_feature(8, seed=5), TapAttention(CbamParams.initialize(8, 4, rng)))
    for values in maps.values():
        pixels, constant = minmax_to_bytes(values)
        assert not constant
        assert (pixels.min(), pixels.max()) == (0, 255)


def test_constant_map_is_mid_gray():
    pixels, constant = minmax_to_bytes(np.full((2, 3), 0.7))
    assert constant
    assert (pixels == MID_GRAY).all()
