"""
Tiny encoder-decoder segmentation networks with named tap points.

Layout: ``depth`` stride-2 conv/affine/ReLU stages (B taps the last stage
before its ReLU), a two-layer context block (E taps its output before the
ReLU), a 2x upsample and one decoder conv (D taps before the ReLU), a 1x1
classifier, and a bilinear upsample of the logits to input size. The affine
layers use learned per-channel scale/shift with no batch statistics, so
train and eval forward passes are identical.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, GeometryError
from .tensor import Tensor

logger = logging.getLogger(__name__)

TapHook = Callable[[Tensor], Tensor]
CONTEXT_LAYERS = 2


@dataclass
class SegNetConfig:
    in_channels: int = 3
    num_classes: int = 4
    widths: Tuple[int, ...] = (8, 16, 32)
    depth: int = 3
    reduction: int = 8

    def __post_init__(self) -> None:
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != self.depth or self.depth < 1:
            raise ConfigurationError(
                f"widths {self.widths} must list one channel count per stage (depth {self.depth})"
            )
        if self.num_classes < 2 or self.in_channels < 1:
            raise ConfigurationError(
                f"Invalid network config: classes={self.num_classes}, in_channels={self.in_channels}"
            )
        bad = [w for w in self.widths if w < 1 or w % self.reduction]
        if bad:
            raise ConfigurationError(
                f"Widths {bad} are not divisible by the attention reduction ratio {self.reduction}"
            )

    @property
    def decoder_width(self) -> int:
        return self.widths[0]

    def layer_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        c_in = self.in_channels
        for i, width in enumerate(self.widths):
            shapes.update(_conv_norm_shapes(f"stage{i}", c_in, width))
            c_in = width
        for j in range(CONTEXT_LAYERS):
            shapes.update(_conv_norm_shapes(f"context{j}", c_in, c_in))
        shapes.update(_conv_norm_shapes("decoder", c_in, self.decoder_width))
        shapes["classifier.weight"] = (self.num_classes, self.decoder_width, 1, 1)
        shapes["classifier.bias"] = (self.num_classes,)
        return shapes


def _conv_norm_shapes(prefix: str, c_in: int, c_out: int) -> Dict[str, Tuple[int, ...]]:
    return {
        f"{prefix}.conv": (c_out, c_in, 3, 3),
        f"{prefix}.scale": (c_out,),
        f"{prefix}.shift": (c_out,),
    }


@dataclass
class TapBundle:
    B: Tensor
    E: Tensor
    D: Tensor
    logits: Tensor

    def features(self, names: Sequence[str]) -> List[Tensor]:
        return [getattr(self, name) for name in names]


class Network:
    def __init__(self, cfg: SegNetConfig, params: Dict[str, Tensor]) -> None:
        expected = cfg.layer_shapes()
        if set(params) != set(expected):
            raise ConfigurationError(
                f"Parameter names do not match the network layout: {sorted(set(params) ^ set(expected))}"
            )
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"{name} has shape {params[name].shape}, expected {shape}")
        self.cfg = cfg
        self.params = {name: params[name] for name in expected}
        self.frozen = False

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.params)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def state(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise ConfigurationError(f"State is missing parameters {sorted(missing)}")
        for name, p in self.params.items():
            value = np.asarray(state[name], dtype=p.data.dtype)
            if value.shape != p.shape:
                raise DimensionError(f"{name}: state shape {value.shape} != {p.shape}")
            p.data = value.copy()
            p.grad = None


def build(cfg: SegNetConfig, seed: int) -> Network:
    """He-normal convolutions, unit scale, zero shift; deterministic in seed."""
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    for name, shape in cfg.layer_shapes().items():
        if name.endswith(".scale"):
            value = np.ones(shape)
        elif name.endswith((".shift", ".bias")):
            value = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            gain = 1.0 if name.startswith("classifier") else 2.0
            value = rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)
        params[name] = Tensor.parameter(value, name=name)
    net = Network(cfg, params)
    logger.debug(f"Built network widths={cfg.widths} with {net.parameter_count()} parameters")
    return net


def freeze(net: Network) -> Network:
    for p in net.params.values():
        p.requires_grad = False
        p.grad = None
    net.frozen = True
    return net


def _conv_norm(net: Network, x: Tensor, prefix: str, stride: int) -> Tensor:
    p = net.params
    y = T.conv2d(x, p[f"{prefix}.conv"], None, stride=stride, pad=1)
    c = y.shape[1]
    y = T.broadcast_mul(y, p[f"{prefix}.scale"].reshape(1, c, 1, 1))
    return y + p[f"{prefix}.shift"].reshape(1, c, 1, 1)


def forward_with_taps(
    net: Network, x: Tensor, hooks: Optional[Mapping[str, TapHook]] = None
) -> TapBundle:
    """Run the network, capturing pre-ReLU B/E/D features.

    A hook registered for a tap replaces that feature in the forward path;
    the bundle still reports the raw feature.
    """
    cfg = net.cfg
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise DimensionError(f"Expected input (n, {cfg.in_channels}, h, w), got {x.shape}")
    h, w = x.shape[2:]
    stride = 2**cfg.depth
    if h % stride or w % stride:
        raise GeometryError(f"Input size {h}x{w} is not divisible by {stride}")
    hooks = hooks or {}

    def tap(name: str, feature: Tensor) -> Tensor:
        hook = hooks.get(name)
        return hook(feature) if hook is not None else feature

    y = x
    for i in range(cfg.depth):
        pre = _conv_norm(net, y, f"stage{i}", stride=2)
        if i == cfg.depth - 1:
            b = pre
            pre = tap("B", pre)
        y = T.relu(pre)
    for j in range(CONTEXT_LAYERS - 1):
        y = T.relu(_conv_norm(net, y, f"context{j}", stride=1))
    e = _conv_norm(net, y, f"context{CONTEXT_LAYERS - 1}", stride=1)
    y = T.relu(tap("E", e))

    y = T.bilinear_resize(y, 2 * y.shape[2], 2 * y.shape[3])
    d = _conv_norm(net, y, "decoder", stride=1)
    y = T.relu(tap("D", d))
    logits = T.conv2d(y, net.params["classifier.weight"], net.params["classifier.bias"])
    logits = T.bilinear_resize(logits, h, w)
    return TapBundle(B=b, E=e, D=d, logits=logits)


def predict(net: Network, x: Tensor) -> np.ndarray:
    with T.no_grad():
        return forward_with_taps(net, x).logits.data.argmax(axis=1)


def measure_tap_shapes(
    net: Network, size: Union[int, Tuple[int, int]]
) -> Dict[str, Tuple[int, int, int]]:
    """(c, h, w) of every tap for an input of ``size`` (an int means square)."""
    height, width = (size, size) if isinstance(size, int) else size
    with T.no_grad():
        bundle = forward_with_taps(net, Tensor(np.zeros((1, net.cfg.in_channels, height, width))))
    return {name: tuple(getattr(bundle, name).shape[1:]) for name in ("B", "E", "D")}
