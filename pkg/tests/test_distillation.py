import math

import numpy as np
import pytest

from attnfd import tensor as T
from attnfd.attention import CbamParams, cbam_refine
from attnfd.distillation import (
    DistillConfig,
    Projector,
    TapEntry,
    TapSet,
    align_student_feature,
    at_loss,
    attnfd_loss,
    channel_normalize,
    distillation_term,
    kd_loss,
    parse_taps,
    total_loss,
)
from attnfd.errors import ConfigurationError, ContractError, DimensionError, TapMismatchError
from attnfd.tensor import Tensor


def _entry(name="B", shape=(4, 3, 3), student=None, teacher=None):
    return TapEntry(
        name=name,
        teacher_shape=shape,
        student_shape=shape,
        student_cbam=student or CbamParams.zeros(shape[0], reduction=2),
        teacher_cbam=teacher or CbamParams.zeros(shape[0], reduction=2),
    )


def _normalized_mse_oracle(fs, ft):
    def norm(f):
        n = np.sqrt((f**2).sum(axis=(2, 3), keepdims=True))
        return f / n

    return float(((norm(fs) - norm(ft)) ** 2).mean())


def test_parse_taps():
    assert parse_taps("b, e") == ("B", "E")
    assert parse_taps("B,E,D") == ("B", "E", "D")
    for bad in ["", "X", "B,B"]:
        with pytest.raises(ConfigurationError):
            parse_taps(bad)


def test_projector_exists_exactly_when_channels_differ():
    rng = np.random.default_rng(0)
    with pytest.raises(TapMismatchError):
        TapEntry("B", (4, 2, 2), (2, 2, 2), CbamParams.zeros(4, 2), CbamParams.zeros(4, 2))
    with pytest.raises(TapMismatchError):
        TapEntry(
            "B", (4, 2, 2), (4, 2, 2), CbamParams.zeros(4, 2), CbamParams.zeros(4, 2),
            projector=Projector.initialize(4, 4, rng),
        )
    taps = TapSet.build(["B", "E"], {"B": (4, 2, 2), "E": (4, 4, 4)}, {"B": (2, 2, 2), "E": (4, 2, 2)}, 2, rng)
    assert taps.get("B").projector is not None
    assert taps.get("E").projector is None
    assert taps.get("E").teacher_cbam.frozen
    with pytest.raises(ConfigurationError):
        taps.get("D")


def test_distill_config_validation():
    with pytest.raises(ConfigurationError):
        DistillConfig(alpha=-1.0)
    with pytest.raises(ConfigurationError):
        DistillConfig(kd_temperature=0.0)
    with pytest.raises(ConfigurationError):
        DistillConfig(method="fitnet")


def test_align_identity_and_resize():
    rng = np.random.default_rng(1)
    f = Tensor(rng.normal(size=(2, 4, 3, 3)))
    np.testing.assert_array_equal(align_student_feature(f, _entry()).data, f.data)

    entry = TapEntry("D", (4, 8, 8), (4, 4, 4), CbamParams.zeros(4, 2), CbamParams.zeros(4, 2))
    small = Tensor(rng.normal(size=(1, 4, 4, 4)))
    np.testing.assert_array_equal(align_student_feature(small, entry).data, T.bilinear_resize(small, 8, 8).data)


def test_align_projects_after_resize():
    rng = np.random.default_rng(2)
    projector = Projector.initialize(2, 4, rng)
    entry = TapEntry("E", (4, 4, 4), (2, 2, 2), CbamParams.zeros(4, 2), CbamParams.zeros(4, 2), projector)
    f = Tensor(rng.normal(size=(1, 2, 2, 2)))
    expected = T.conv2d(T.bilinear_resize(f, 4, 4), projector.kernel, projector.bias)
    np.testing.assert_allclose(align_student_feature(f, entry).data, expected.data, atol=1e-12)


def test_align_errors():
    f = Tensor(np.zeros((1, 4, 3, 3)))
    with pytest.raises(ConfigurationError):
        align_student_feature(f, None)
    with pytest.raises(TapMismatchError):
        align_student_feature(Tensor(np.zeros((1, 4, 2, 2))), _entry())


def test_channel_normalize():
    f = Tensor(np.array([[[[3.0, 4.0], [0.0, 0.0]]]]))
    np.testing.assert_allclose(channel_normalize(f).data, [[[[0.6, 0.8], [0.0, 0.0]]]], atol=1e-15)

    g = Tensor(np.random.default_rng(3).normal(size=(2, 3, 4, 4)))
    once = channel_normalize(g)
    np.testing.assert_allclose(channel_normalize(once).data, once.data, atol=1e-12)
    np.testing.assert_allclose(channel_normalize(g * 3.7).data, once.data, atol=1e-12)


def test_channel_normalize_passes_zero_channels_through():
    f = np.random.default_rng(4).normal(size=(1, 2, 3, 3))
    f[0, 1] = 0.0
    out = channel_normalize(Tensor(f)).data
    assert not out[0, 1].any()
    assert math.isclose(float((out[0, 0] ** 2).sum()), 1.0, rel_tol=1e-12)


@pytest.mark.parametrize("normalize", ["channel", "pixel"])
@pytest.mark.parametrize("seed", range(20))
def test_channel_normalize_gradients(gradcheck, normalize, seed):
    rng = np.random.default_rng(seed)
    gradcheck(lambda f: channel_normalize(f, normalize), [rng.normal(size=(1, 3, 2, 2))], seed=seed)


def test_pixel_normalize_unit_vectors():
    out = channel_normalize(Tensor(np.random.default_rng(12).normal(size=(2, 3, 2, 2))), "pixel").data
    np.testing.assert_allclose((out**2).sum(axis=1), 1.0, rtol=1e-12)


def test_attnfd_loss_zero_for_shared_parameters():
    rng = np.random.default_rng(5)
    student = CbamParams.initialize(4, 2, rng)
    taps = TapSet([_entry(student=student, teacher=student.copy(frozen=True))])
    f = Tensor(rng.normal(size=(2, 4, 3, 3)))
    assert attnfd_loss([f], [Tensor(f.data.copy())], taps).item() == 0.0


def test_attnfd_loss_absorbs_positive_scale_with_zero_attention():
    rng = np.random.default_rng(6)
    f = rng.normal(size=(2, 4, 3, 3))
    loss = attnfd_loss([Tensor(f)], [Tensor(2.5 * f)], TapSet([_entry()]))
    assert abs(loss.item()) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_attnfd_loss_zero_attention_is_normalized_mse(seed):
    rng = np.random.default_rng(seed)
    fs, ft = rng.normal(size=(2, 4, 3, 3)), rng.normal(size=(2, 4, 3, 3))
    loss = attnfd_loss([Tensor(fs)], [Tensor(ft)], TapSet([_entry()]))
    assert math.isclose(loss.item(), _normalized_mse_oracle(fs, ft), abs_tol=1e-10)


def test_attnfd_loss_matches_composed_pipeline():
    rng = np.random.default_rng(7)
    taps = TapSet.build(
        ["B", "D"], {"B": (4, 2, 2), "D": (4, 4, 4)}, {"B": (2, 2, 2), "D": (4, 2, 2)}, 2, rng
    )
    s_feats = [Tensor(rng.normal(size=(2, 2, 2, 2))), Tensor(rng.normal(size=(2, 4, 2, 2)))]
    t_feats = [Tensor(rng.normal(size=(2, 4, 2, 2))), Tensor(rng.normal(size=(2, 4, 4, 4)))]

    terms = []
    for fs, ft, tap in zip(s_feats, t_feats, taps):
        x = T.bilinear_resize(fs, *tap.teacher_shape[1:]) if fs.shape[2:] != tap.teacher_shape[1:] else fs
        if tap.projector is not None:
            x = T.conv2d(x, tap.projector.kernel, tap.projector.bias)
        s = T.l2_normalize(cbam_refine(x, tap.student_cbam)[0], axes=(2, 3)).data
        t = T.l2_normalize(cbam_refine(ft, tap.teacher_cbam)[0], axes=(2, 3)).data
        terms.append(((s - t) ** 2).mean())

    loss = attnfd_loss(s_feats, t_feats, taps)
    assert math.isclose(loss.item(), sum(terms) / 2, rel_tol=1e-12, abs_tol=1e-15)
    assert loss.item() >= 0


def test_attnfd_loss_keeps_teacher_side_frozen():
    rng = np.random.default_rng(8)
    taps = TapSet.build(["E"], {"E": (4, 2, 2)}, {"E": (2, 2, 2)}, 2, rng)
    fs = Tensor.parameter(rng.normal(size=(1, 2, 2, 2)))
    ft = Tensor.parameter(rng.normal(size=(1, 4, 2, 2)))
    T.backward(attnfd_loss([fs], [ft], taps))
    entry = taps.get("E")
    assert ft.grad is None
    assert all(p.grad is None for p in entry.teacher_cbam.parameters().values())
    assert fs.grad is not None
    assert entry.projector.kernel.grad is not None
    assert entry.student_cbam.w0.grad is not None


def test_attnfd_loss_length_mismatch():
    f = Tensor(np.zeros((1, 4, 3, 3)))
    with pytest.raises(ContractError):
        attnfd_loss([f, f], [f], TapSet([_entry()]))


def test_tap_set_without_student_attention():
    rng = np.random.default_rng(13)
    taps = TapSet.build(["B"], {"B": (4, 2, 2)}, {"B": (2, 2, 2)}, 2, rng, student_attention=False)
    assert taps.get("B").student_cbam is None
    assert set(taps.parameters()) == {"B.proj.kernel", "B.proj.bias"}
    with pytest.raises(ConfigurationError):
        attnfd_loss([Tensor(np.zeros((1, 2, 2, 2)))], [Tensor(np.ones((1, 4, 2, 2)))], taps)


@pytest.mark.parametrize("seed", range(20))
def test_attnfd_loss_gradients(gradcheck, seed):
    rng = np.random.default_rng(seed)
    taps = TapSet.build(["D"], {"D": (4, 4, 4)}, {"D": (2, 2, 2)}, 2, rng)
    ft = Tensor(rng.normal(size=(1, 4, 4, 4)))
    proj = taps.get("D").projector
    cbam = taps.get("D").student_cbam

    def loss(fs, kernel, w0):
        proj.kernel, cbam.w0 = kernel, w0
        return attnfd_loss([fs], [ft], taps)

    gradcheck(loss, [rng.normal(size=(1, 2, 2, 2)), proj.kernel.data, cbam.w0.data], seed=seed)


def test_kd_loss_identical_logits():
    z = Tensor(np.random.default_rng(9).normal(size=(2, 3, 2, 2)))
    assert abs(kd_loss(z, Tensor(z.data.copy()), 4.0).item()) < 1e-12


def test_kd_loss_closed_form():
    teacher = np.zeros((1, 2, 2, 2))
    teacher[0, 0] = 3.0
    p = np.exp(3.0) / (np.exp(3.0) + 1.0)
    expected = p * math.log(p / 0.5) + (1 - p) * math.log((1 - p) / 0.5)
    loss = kd_loss(Tensor(np.zeros((1, 2, 2, 2))), Tensor(teacher), temperature=1.0)
    assert math.isclose(loss.item(), expected, rel_tol=1e-12)


def test_kd_loss_nearly_identical_logits_stay_nonnegative():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        t = rng.normal(size=(2, 4, 4, 4))
        s = t + 1e-5 * rng.normal(size=t.shape)
        value = kd_loss(Tensor(s), Tensor(t), temperature=1.0).item()
        assert 0.0 <= value < 1e-9, seed


def test_kd_loss_nonnegative_across_temperatures():
    rng = np.random.default_rng(10)
    s, t = Tensor(rng.normal(size=(1, 4, 3, 3))), Tensor(rng.normal(size=(1, 4, 3, 3)))
    assert kd_loss(s, t, 2.0).item() > 0
    assert kd_loss(s, t, 4.0).item() > 0
    with pytest.raises(DimensionError):
        kd_loss(s, Tensor(np.zeros((1, 3, 3, 3))))


@pytest.mark.parametrize("seed", range(20))
def test_kd_loss_gradients(gradcheck, seed):
    rng = np.random.default_rng(seed)
    t = Tensor(rng.normal(size=(1, 3, 2, 2)))
    gradcheck(lambda s: kd_loss(s, t, 2.0), [rng.normal(size=(1, 3, 2, 2))], seed=seed)


def test_at_loss_identities():
    rng = np.random.default_rng(11)
    f = rng.normal(size=(2, 4, 3, 3))
    taps = TapSet([_entry()])
    assert at_loss([Tensor(f)], [Tensor(f.copy())], taps).item() == 0.0
    assert abs(at_loss([Tensor(f)], [Tensor(3.0 * f)], taps).item()) < 1e-12


def test_at_loss_matches_composed_maps():
    rng = np.random.default_rng(12)
    fs, ft = rng.normal(size=(1, 4, 3, 3)), rng.normal(size=(1, 4, 3, 3))

    def at(f):
        m = (f**2).sum(axis=1, keepdims=True)
        return m / np.sqrt((m**2).sum())

    loss = at_loss([Tensor(fs)], [Tensor(ft)], TapSet([_entry()]), power=2)
    assert math.isclose(loss.item(), float(((at(fs) - at(ft)) ** 2).mean()), rel_tol=1e-10)


def test_total_loss():
    ce = Tensor(1.0)
    assert total_loss(ce, Tensor(0.5), DistillConfig(alpha=2.0)).item() == 2.0
    assert math.isclose(total_loss(ce, Tensor(0.1), DistillConfig(alpha=15.0)).item(), 2.5)
    assert total_loss(ce, Tensor(0.5), DistillConfig(alpha=0.0)) is ce
    assert total_loss(ce, None, DistillConfig()) is ce


def test_distillation_term_dispatch():
    f = Tensor(np.random.default_rng(13).normal(size=(1, 4, 3, 3)))
    z = Tensor(np.zeros((1, 2, 2, 2)))
    taps = TapSet([_entry()])
    assert distillation_term(DistillConfig(method="none"), taps, [f], [f], z, z) is None
    assert distillation_term(DistillConfig(alpha=0.0), taps, [f], [f], z, z) is None
    assert abs(distillation_term(DistillConfig(method="kd"), None, [f], [f], z, z).item()) < 1e-15
    with pytest.raises(ConfigurationError):
        distillation_term(DistillConfig(method="at", taps=("B",)), None, [f], [f], z, z)
