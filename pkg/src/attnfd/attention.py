"""
Convolutional block attention: channel gate, spatial gate and their
sequential composition, plus the parameter-free attention-transfer map.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor

logger = logging.getLogger(__name__)

DEFAULT_REDUCTION = 8
SPATIAL_KERNEL = 7


@dataclass
class CbamParams:
    """Learnable state of one attention block.

    One shared MLP (w0, b0, w1, b1) serves both pooled descriptors.
    """

    w0: Tensor
    b0: Tensor
    w1: Tensor
    b1: Tensor
    spatial_kernel: Tensor
    spatial_bias: Tensor
    reduction: int
    frozen: bool = False

    def __post_init__(self) -> None:
        c = self.channels
        if self.reduction < 1 or c % self.reduction:
            raise ConfigurationError(
                f"CBAM channels {c} not divisible by reduction ratio {self.reduction}"
            )
        hidden = c // self.reduction
        expected = {
            "w0": (hidden, c),
            "b0": (hidden,),
            "w1": (c, hidden),
            "b1": (c,),
            "spatial_kernel": (1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL),
            "spatial_bias": (1,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(
                    f"CBAM {name} has shape {getattr(self, name).shape}, expected {shape}"
                )
        if self.frozen:
            self.freeze()

    @property
    def channels(self) -> int:
        return self.w0.shape[1]

    @classmethod
    def _build(cls, channels: int, reduction: int, sample) -> "CbamParams":
        if reduction < 1 or channels % reduction:
            raise ConfigurationError(
                f"CBAM channels {channels} not divisible by reduction ratio {reduction}"
            )
        hidden = channels // reduction
        return cls(
            w0=Tensor.parameter(sample((hidden, channels), channels), name="w0"),
            b0=Tensor.parameter(np.zeros(hidden), name="b0"),
            w1=Tensor.parameter(sample((channels, hidden), hidden), name="w1"),
            b1=Tensor.parameter(np.zeros(channels), name="b1"),
            spatial_kernel=Tensor.parameter(
                sample((1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL), 2 * SPATIAL_KERNEL**2),
                name="spatial_kernel",
            ),
            spatial_bias=Tensor.parameter(np.zeros(1), name="spatial_bias"),
            reduction=reduction,
        )

    @classmethod
    def zeros(cls, channels: int, reduction: int = DEFAULT_REDUCTION) -> "CbamParams":
        return cls._build(channels, reduction, lambda shape, fan_in: np.zeros(shape))

    @classmethod
    def initialize(
        cls, channels: int, reduction: int, rng: np.random.Generator
    ) -> "CbamParams":
        """Weights uniform in +-1/sqrt(fan_in), biases zero."""

        def sample(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        return cls._build(channels, reduction, sample)

    def parameters(self) -> Dict[str, Tensor]:
        return {
            "w0": self.w0,
            "b0": self.b0,
            "w1": self.w1,
            "b1": self.b1,
            "spatial_kernel": self.spatial_kernel,
            "spatial_bias": self.spatial_bias,
        }

    def freeze(self) -> "CbamParams":
        self.frozen = True
        for p in self.parameters().values():
            p.requires_grad = False
            p.grad = None
        return self

    def copy(self, frozen: bool = False) -> "CbamParams":
        params = {
            name: Tensor(p.data, requires_grad=not frozen, name=name)
            for name, p in self.parameters().items()
        }
        return CbamParams(**params, reduction=self.reduction, frozen=frozen)


@dataclass
class AttentionMaps:
    channel_map: Tensor
    spatial_map: Tensor


@dataclass
class AttentionTransferMap:
    map: Tensor
    degenerate: List[bool] = field(default_factory=list)


def _check_channels(f: Tensor, p: CbamParams) -> None:
    if f.ndim != 4:
        raise DimensionError(f"Attention expects (n, c, h, w), got {f.shape}")
    if f.shape[1] != p.channels:
        raise DimensionError(
            f"Feature has {f.shape[1]} channels, attention block expects {p.channels}"
        )


def _shared_mlp(d: Tensor, p: CbamParams) -> Tensor:
    return T.dense(T.relu(T.dense(d, p.w0, p.b0)), p.w1, p.b1)


def channel_attention(f: Tensor, p: CbamParams) -> Tensor:
    """M_C = sigmoid(MLP(avgpool(F)) + MLP(maxpool(F))), shape (n, c, 1, 1)."""
    _check_channels(f, p)
    n, c = f.shape[:2]
    avg = T.pool_spatial(f, "avg").reshape(n, c)
    mx = T.pool_spatial(f, "max").reshape(n, c)
    return T.sigmoid(_shared_mlp(avg, p) + _shared_mlp(mx, p)).reshape(n, c, 1, 1)


def spatial_attention(f: Tensor, p: CbamParams) -> Tensor:
    """M_S = sigmoid(conv7x7([avg_c(F); max_c(F)])), shape (n, 1, h, w)."""
    if f.ndim != 4:
        raise DimensionError(f"Attention expects (n, c, h, w), got {f.shape}")
    descriptors = T.concat([T.pool_channel(f, "avg"), T.pool_channel(f, "max")], axis=1)
    logits = T.conv2d(
        descriptors, p.spatial_kernel, p.spatial_bias, stride=1, pad=SPATIAL_KERNEL // 2
    )
    return T.sigmoid(logits)


def cbam_refine(f: Tensor, p: CbamParams) -> Tuple[Tensor, AttentionMaps]:
    """F' = M_C(F) * F, then F'' = M_S(F') * F'."""
    _check_channels(f, p)
    m_c = channel_attention(f, p)
    f1 = T.broadcast_mul(f, m_c)
    m_s = spatial_attention(f1, p)
    return T.broadcast_mul(f1, m_s), AttentionMaps(channel_map=m_c, spatial_map=m_s)


def at_map(f: Tensor, power: int = 2) -> AttentionTransferMap:
    """Channel-aggregated |F|^p, normalized to unit Frobenius norm per sample.

    An all-zero sample stays zero and is flagged as degenerate.
    """
    if power < 1:
        raise ValueError(f"Attention-transfer power must be >= 1, got {power}")
    if f.ndim != 4:
        raise DimensionError(f"at_map expects (n, c, h, w), got {f.shape}")
    aggregated = T.abs_pow(f, power).sum(axis=1, keepdims=True)
    norms = np.sqrt((aggregated.data**2).sum(axis=(1, 2, 3)))
    degenerate = [bool(v) for v in norms < T.NORM_EPSILON]
    if any(degenerate):
        logger.debug(f"Attention-transfer map degenerate for samples {degenerate}")
    return AttentionTransferMap(T.l2_normalize(aggregated, axes=(1, 2, 3)), degenerate)
