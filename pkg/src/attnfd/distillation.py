"""
Distillation objectives: student feature alignment, the attention-guided
feature loss, the combined objective, and the KD / attention-transfer
baselines.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .attention import CbamParams, at_map, cbam_refine
from .errors import ConfigurationError, ContractError, DimensionError, TapMismatchError
from .tensor import Tensor

logger = logging.getLogger(__name__)

TAP_NAMES = ("B", "E", "D")
METHODS = ("attnfd", "kd", "at", "none")
NORMALIZE_AXES = {"channel": (2, 3), "pixel": (1,)}

Shape = Tuple[int, int, int]


def parse_taps(text: str) -> Tuple[str, ...]:
    names = tuple(part.strip().upper() for part in text.split(",") if part.strip())
    if not names:
        raise ConfigurationError("At least one tap is required")
    unknown = [n for n in names if n not in TAP_NAMES]
    if unknown:
        raise ConfigurationError(f"Unknown taps {unknown}; choose from {','.join(TAP_NAMES)}")
    if len(set(names)) != len(names):
        raise ConfigurationError(f"Duplicate taps in {text!r}")
    return names


@dataclass
class Projector:
    """1x1 convolution mapping student channels onto teacher channels."""

    kernel: Tensor
    bias: Tensor

    @classmethod
    def initialize(cls, c_s: int, c_t: int, rng: np.random.Generator) -> "Projector":
        bound = 1.0 / np.sqrt(c_s)
        return cls(
            kernel=Tensor.parameter(rng.uniform(-bound, bound, size=(c_t, c_s, 1, 1)), name="kernel"),
            bias=Tensor.parameter(np.zeros(c_t), name="bias"),
        )

    def parameters(self) -> Dict[str, Tensor]:
        return {"kernel": self.kernel, "bias": self.bias}


@dataclass
class TapEntry:
    name: str
    teacher_shape: Shape
    student_shape: Shape
    student_cbam: Optional[CbamParams]
    teacher_cbam: CbamParams
    projector: Optional[Projector] = None

    def __post_init__(self) -> None:
        c_t, c_s = self.teacher_shape[0], self.student_shape[0]
        if (self.projector is not None) != (c_s != c_t):
            raise TapMismatchError(
                f"Tap {self.name}: projector must exist exactly when channels differ ({c_s} vs {c_t})"
            )
        if self.projector is not None and self.projector.kernel.shape != (c_t, c_s, 1, 1):
            raise TapMismatchError(
                f"Tap {self.name}: projector kernel {self.projector.kernel.shape} "
                f"does not map {c_s} to {c_t} channels"
            )
        for side, cbam in (("student", self.student_cbam), ("teacher", self.teacher_cbam)):
            if cbam is not None and cbam.channels != c_t:
                raise TapMismatchError(
                    f"Tap {self.name}: {side} attention block has {cbam.channels} channels, "
                    f"teacher feature has {c_t}"
                )
        if not self.teacher_cbam.frozen:
            self.teacher_cbam.freeze()

    def parameters(self) -> Dict[str, Tensor]:
        params = {}
        if self.student_cbam is not None:
            params.update({f"cbam.{k}": v for k, v in self.student_cbam.parameters().items()})
        if self.projector is not None:
            params.update({f"proj.{k}": v for k, v in self.projector.parameters().items()})
        return params


@dataclass
class TapSet:
    entries: List[TapEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.entries:
            raise ConfigurationError("A tap set needs at least one tap")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[TapEntry]:
        return iter(self.entries)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(e.name for e in self.entries)

    def get(self, name: str) -> TapEntry:
        for entry in self.entries:
            if entry.name == name:
                return entry
        raise ConfigurationError(f"Tap {name!r} is not registered (have {self.names})")

    @classmethod
    def build(
        cls,
        names: Sequence[str],
        teacher_shapes: Mapping[str, Shape],
        student_shapes: Mapping[str, Shape],
        reduction: int,
        rng: np.random.Generator,
        teacher_cbam: Optional[Mapping[str, CbamParams]] = None,
        student_attention: bool = True,
    ) -> "TapSet":
        """Register ``names``; without ``student_attention`` only projectors are trained."""
        entries = []
        for name in names:
            if name not in teacher_shapes or name not in student_shapes:
                raise TapMismatchError(f"Tap {name!r} has no registered feature shape")
            t_shape, s_shape = tuple(teacher_shapes[name]), tuple(student_shapes[name])
            projector = (
                Projector.initialize(s_shape[0], t_shape[0], rng) if s_shape[0] != t_shape[0] else None
            )
            if teacher_cbam is not None and name in teacher_cbam:
                frozen = teacher_cbam[name].copy(frozen=True)
            else:
                frozen = CbamParams.initialize(t_shape[0], reduction, rng).freeze()
            entries.append(
                TapEntry(
                    name=name,
                    teacher_shape=t_shape,
                    student_shape=s_shape,
                    student_cbam=(
                        CbamParams.initialize(t_shape[0], reduction, rng) if student_attention else None
                    ),
                    teacher_cbam=frozen,
                    projector=projector,
                )
            )
        return cls(entries)

    def parameters(self) -> Dict[str, Tensor]:
        """Trainable student-side parameters (projectors and attention)."""
        return {f"{e.name}.{k}": v for e in self.entries for k, v in e.parameters().items()}


@dataclass
class DistillConfig:
    alpha: float = 2.0
    taps: Tuple[str, ...] = TAP_NAMES
    method: str = "attnfd"
    kd_temperature: float = 4.0
    at_power: int = 2
    normalize: str = "channel"

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        if self.kd_temperature <= 0:
            raise ConfigurationError(f"kd_temperature must be > 0, got {self.kd_temperature}")
        if self.method not in METHODS:
            raise ConfigurationError(f"Unknown method {self.method!r}; choose from {METHODS}")
        if self.at_power < 1:
            raise ConfigurationError(f"at_power must be >= 1, got {self.at_power}")
        if self.normalize not in NORMALIZE_AXES:
            raise ConfigurationError(f"Unknown normalization {self.normalize!r}")
        self.taps = parse_taps(",".join(self.taps))


def align_student_feature(f_s: Tensor, tap: Optional[TapEntry]) -> Tensor:
    """Resize to the teacher's spatial size, then project channels if needed."""
    if tap is None:
        raise ConfigurationError("Cannot align a feature for an unregistered tap")
    if f_s.ndim != 4 or tuple(f_s.shape[1:]) != tap.student_shape:
        raise TapMismatchError(
            f"Tap {tap.name}: student feature {f_s.shape} does not match registered {tap.student_shape}"
        )
    _, h_t, w_t = tap.teacher_shape
    out = f_s
    if f_s.shape[2:] != (h_t, w_t):
        out = T.bilinear_resize(out, h_t, w_t)
    if tap.projector is not None:
        out = T.conv2d(out, tap.projector.kernel, tap.projector.bias)
    return out


def channel_normalize(f: Tensor, normalize: str = "channel") -> Tensor:
    """Unit L2 norm per channel slice (or per pixel channel vector)."""
    return T.l2_normalize(f, axes=NORMALIZE_AXES[normalize])


def _mse(a: Tensor, b: Tensor) -> Tensor:
    diff = a - b
    return T.mean(diff * diff)


def _check_lengths(student_feats, teacher_feats, taps: TapSet) -> None:
    if len(student_feats) != len(taps) or len(teacher_feats) != len(taps):
        raise ContractError(
            f"Got {len(student_feats)} student and {len(teacher_feats)} teacher features "
            f"for {len(taps)} taps"
        )


def _check_teacher(t: Tensor, tap: TapEntry) -> None:
    if t.ndim != 4 or tuple(t.shape[1:]) != tap.teacher_shape:
        raise TapMismatchError(
            f"Tap {tap.name}: teacher feature {t.shape} does not match registered {tap.teacher_shape}"
        )


def _average(terms: List[Tensor]) -> Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total / float(len(terms))


def attnfd_loss(
    student_feats: Sequence[Tensor],
    teacher_feats: Sequence[Tensor],
    taps: TapSet,
    normalize: str = "channel",
) -> Tensor:
    """Mean squared difference of channel-normalized refined features,
    averaged over taps. Teacher features and attention are constants."""
    _check_lengths(student_feats, teacher_feats, taps)
    terms = []
    for f_s, f_t, tap in zip(student_feats, teacher_feats, taps):
        _check_teacher(f_t, tap)
        if tap.student_cbam is None:
            raise ConfigurationError(f"Tap {tap.name} has no student attention block")
        refined_s, _ = cbam_refine(align_student_feature(f_s, tap), tap.student_cbam)
        with T.no_grad():
            refined_t, _ = cbam_refine(f_t.detach(), tap.teacher_cbam)
        terms.append(
            _mse(channel_normalize(refined_s, normalize), channel_normalize(refined_t, normalize))
        )
    return _average(terms)


def at_loss(
    student_feats: Sequence[Tensor],
    teacher_feats: Sequence[Tensor],
    taps: TapSet,
    power: int = 2,
) -> Tensor:
    _check_lengths(student_feats, teacher_feats, taps)
    terms = []
    for f_s, f_t, tap in zip(student_feats, teacher_feats, taps):
        _check_teacher(f_t, tap)
        s_map = at_map(align_student_feature(f_s, tap), power).map
        with T.no_grad():
            t_map = at_map(f_t.detach(), power).map
        terms.append(_mse(s_map, t_map))
    return _average(terms)


def kd_loss(student_logits: Tensor, teacher_logits: Tensor, temperature: float = 4.0) -> Tensor:
    """T^2 * mean over pixels of KL(softmax(t/T) || softmax(s/T))."""
    if student_logits.shape != teacher_logits.shape or student_logits.ndim != 4:
        raise DimensionError(
            f"kd_loss: student logits {student_logits.shape} vs teacher {teacher_logits.shape}"
        )
    if temperature <= 0:
        raise ConfigurationError(f"KD temperature must be > 0, got {temperature}")
    n, _, h, w = student_logits.shape
    scale = 1.0 / temperature
    with T.no_grad():
        log_p = T.log_softmax(teacher_logits.detach() * scale, axis=1).data
    p = np.exp(log_p)
    log_q = T.log_softmax(student_logits * scale, axis=1)
    kl = T.sum_((Tensor(log_p) - log_q) * p)
    return kl * (temperature * temperature / (n * h * w))


def total_loss(ce: Tensor, distill: Optional[Tensor], cfg: DistillConfig) -> Tensor:
    """L = L_CE + alpha * L_distill; alpha is constant for the whole run."""
    if distill is None or cfg.alpha == 0:
        return ce
    return ce + distill * cfg.alpha


def distillation_term(
    cfg: DistillConfig,
    taps: Optional[TapSet],
    student_feats: Sequence[Tensor],
    teacher_feats: Sequence[Tensor],
    student_logits: Tensor,
    teacher_logits: Tensor,
) -> Optional[Tensor]:
    """The method-specific distillation loss, or None for plain CE training."""
    if cfg.method == "none" or cfg.alpha == 0:
        return None
    if cfg.method == "kd":
        return kd_loss(student_logits, teacher_logits, cfg.kd_temperature)
    if taps is None:
        raise ConfigurationError(f"Method {cfg.method} needs a registered tap set")
    if cfg.method == "at":
        return at_loss(student_feats, teacher_feats, taps, cfg.at_power)
    return attnfd_loss(student_feats, teacher_feats, taps, cfg.normalize)
