"""
Attention heatmaps: raw feature, projected feature (student taps with a
projector), channel-gated feature, refined feature and the spatial gate of
every tap. Each map is min-max scaled on its own and written as a grayscale
PGM file.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from . import netpbm
from . import tensor as T
from .attention import CbamParams, cbam_refine
from .checkpoint import TAP_PREFIX, Checkpoint, restore_network
from .distillation import Projector
from .errors import ConfigurationError
from .segnet import forward_with_taps
from .tensor import Tensor

logger = logging.getLogger(__name__)

MID_GRAY = 128


@dataclass
class TapAttention:
    cbam: CbamParams
    projector: Optional[Projector] = None


def attention_modules(ckpt: Checkpoint) -> Dict[str, TapAttention]:
    """Attention blocks stored in a checkpoint, keyed by tap name."""
    if ckpt.kind == "teacher":
        return {tap: TapAttention(cbam) for tap, cbam in ckpt.teacher_cbam().items()}
    grouped: Dict[str, Dict[str, np.ndarray]] = {}
    for key, value in ckpt.blocks.items():
        if key.startswith(TAP_PREFIX):
            tap, name = key[len(TAP_PREFIX) :].split(".", 1)
            grouped.setdefault(tap, {})[name] = value
    modules = {}
    for tap, blocks in grouped.items():
        cbam_parts = {k[len("cbam.") :]: Tensor(v, name=k) for k, v in blocks.items() if k.startswith("cbam.")}
        if not cbam_parts:
            continue
        projector = None
        if "proj.kernel" in blocks:
            projector = Projector(Tensor(blocks["proj.kernel"]), Tensor(blocks["proj.bias"]))
        modules[tap] = TapAttention(CbamParams(**cbam_parts, reduction=ckpt.net.reduction, frozen=True), projector)
    return modules


def minmax_to_bytes(values: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Scale to [0, 255]; a constant map becomes mid-gray (flag True)."""
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0.0:
        return np.full(values.shape, MID_GRAY, dtype=np.uint8), True
    return np.round((values - lo) / (hi - lo) * 255.0).astype(np.uint8), False


def _upscale(values: np.ndarray, height: int, width: int) -> np.ndarray:
    fy, fx = height // values.shape[0], width // values.shape[1]
    return np.repeat(np.repeat(values, fy, axis=0), fx, axis=1)


def heatmaps(feature: Tensor, attention: TapAttention) -> Dict[str, np.ndarray]:
    """Float maps for the first sample: channel means of F, M_C*F and F'', plus M_S.

    A tap with a projector also gets "projected", the feature the attention
    block actually refines; "raw" is always the network's own tap feature.
    """
    with T.no_grad():
        f = feature
        if attention.projector is not None:
            f = T.conv2d(f, attention.projector.kernel, attention.projector.bias)
        refined, maps = cbam_refine(f, attention.cbam)
        gated = T.broadcast_mul(f, maps.channel_map)
    out = {"raw": feature.data[0].mean(axis=0)}
    if attention.projector is not None:
        out["projected"] = f.data[0].mean(axis=0)
    out["channel"] = gated.data[0].mean(axis=0)
    out["refined"] = refined.data[0].mean(axis=0)
    out["spatial"] = maps.spatial_map.data[0, 0]
    return out


def export_heatmaps(
    ckpt: Checkpoint,
    image_path: Union[str, Path],
    out_dir: Union[str, Path],
) -> List[Path]:
    if ckpt.method == "at":
        raise ConfigurationError("Attention-transfer students carry no attention blocks to visualize")
    modules = attention_modules(ckpt)
    if not modules:
        raise ConfigurationError("Checkpoint holds no attention blocks to visualize")
    image = netpbm.read_ppm(image_path).transpose(2, 0, 1) / 255.0
    net = restore_network(ckpt)
    x = Tensor(image[None])
    with T.no_grad():
        bundle = forward_with_taps(net, x)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(image_path).stem
    h, w = image.shape[1:]
    written = []
    for tap in sorted(modules):
        for kind, values in heatmaps(getattr(bundle, tap), modules[tap]).items():
            pixels, constant = minmax_to_bytes(values)
            if constant:
                logger.warning(f"{stem} tap {tap} {kind} map is constant, writing mid-gray")
            path = out_dir / f"{stem}_{tap}_{kind}.pgm"
            netpbm.write_pgm(path, _upscale(pixels, h, w))
            written.append(path)
    logger.info(f"Wrote {len(written)} heatmaps to {out_dir}")
    return written
