"""
Binary checkpoint container.

Layout (little-endian):
    b"AFD1"                      magic
    u32                          format version
    32 bytes                     SHA-256 digest of the effective run config
    u32 n, then n entries        metadata: u16 key length, key, u32 value length, value (utf-8)
    u32 m, then m entries        blocks: u16 name length, name, u8 rank, rank * u32 extents,
                                 float64 values in row-major order
"""
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np

from .attention import CbamParams
from .distillation import TapSet
from .errors import CheckpointError, MissingFileError
from .segnet import Network, SegNetConfig
from .tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"AFD1"
FORMAT_VERSION = 1
KINDS = ("teacher", "student")
NET_PREFIX = "net."
TEACHER_CBAM_PREFIX = "teacher_cbam."
TAP_PREFIX = "taps."


def config_digest(config_text: str) -> str:
    return hashlib.sha256(config_text.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    kind: str
    net: SegNetConfig
    digest: str
    blocks: Dict[str, np.ndarray]
    taps: Tuple[str, ...] = ()
    method: str = ""
    metrics: Dict[str, float] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise CheckpointError(f"Unknown checkpoint kind {self.kind!r}")
        try:
            raw = bytes.fromhex(self.digest)
        except ValueError as e:
            raise CheckpointError(f"Config digest is not hex: {self.digest!r}") from e
        if len(raw) != 32:
            raise CheckpointError(f"Config digest must be 32 bytes, got {self.digest!r}")

    def network_state(self) -> Dict[str, np.ndarray]:
        return {k[len(NET_PREFIX) :]: v for k, v in self.blocks.items() if k.startswith(NET_PREFIX)}

    def teacher_cbam(self) -> Dict[str, CbamParams]:
        """Calibrated teacher attention blocks, keyed by tap name."""
        grouped: Dict[str, Dict[str, Tensor]] = {}
        for key, value in self.blocks.items():
            if key.startswith(TEACHER_CBAM_PREFIX):
                tap, name = key[len(TEACHER_CBAM_PREFIX) :].split(".", 1)
                grouped.setdefault(tap, {})[name] = Tensor(value, name=name)
        return {
            tap: CbamParams(**params, reduction=self.net.reduction, frozen=True)
            for tap, params in grouped.items()
        }


def network_blocks(net: Network) -> Dict[str, np.ndarray]:
    return {NET_PREFIX + k: v for k, v in net.state().items()}


def cbam_blocks(cbams: Mapping[str, CbamParams]) -> Dict[str, np.ndarray]:
    return {
        f"{TEACHER_CBAM_PREFIX}{tap}.{name}": p.data.copy()
        for tap, cbam in cbams.items()
        for name, p in cbam.parameters().items()
    }


def tap_blocks(taps: TapSet) -> Dict[str, np.ndarray]:
    return {TAP_PREFIX + k: v.data.copy() for k, v in taps.parameters().items()}


def restore_network(ckpt: Checkpoint) -> Network:
    params = {name: Tensor.parameter(value, name=name) for name, value in ckpt.network_state().items()}
    return Network(ckpt.net, params)


def restore_taps(ckpt: Checkpoint, taps: TapSet) -> None:
    """Copy stored student-side tap parameters into ``taps`` in place."""
    for key, p in taps.parameters().items():
        block = ckpt.blocks.get(TAP_PREFIX + key)
        if block is None or block.shape != p.shape:
            raise CheckpointError(f"Checkpoint has no compatible block for tap parameter {key}")
        p.data = block.astype(p.data.dtype)


def _metadata(ckpt: Checkpoint) -> Dict[str, str]:
    meta = {
        "kind": ckpt.kind,
        "net.in_channels": str(ckpt.net.in_channels),
        "net.classes": str(ckpt.net.num_classes),
        "net.widths": ",".join(str(w) for w in ckpt.net.widths),
        "net.reduction": str(ckpt.net.reduction),
        "taps": ",".join(ckpt.taps),
        "method": ckpt.method,
    }
    meta.update({f"metric.{k}": repr(float(v)) for k, v in ckpt.metrics.items()})
    return meta


def _pack_str(text: str, width: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<" + width, len(raw)) + raw


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", ckpt.version), bytes.fromhex(ckpt.digest)]
    meta = _metadata(ckpt)
    parts.append(struct.pack("<I", len(meta)))
    for key, value in meta.items():
        parts.append(_pack_str(key, "H"))
        parts.append(_pack_str(value, "I"))
    parts.append(struct.pack("<I", len(ckpt.blocks)))
    for name in sorted(ckpt.blocks):
        arr = np.ascontiguousarray(ckpt.blocks[name], dtype="<f8")
        parts.append(_pack_str(name, "H"))
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"Checkpoint truncated at byte {self.pos} (need {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def string(self, width: str) -> str:
        (length,) = self.unpack(width)
        return self.take(length).decode("utf-8")


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"Bad checkpoint magic {magic!r}")
    (version,) = r.unpack("I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}")
    digest = r.take(32).hex()
    (n_meta,) = r.unpack("I")
    meta = {}
    for _ in range(n_meta):
        key = r.string("H")
        meta[key] = r.string("I")
    (n_blocks,) = r.unpack("I")
    blocks = {}
    for _ in range(n_blocks):
        name = r.string("H")
        (rank,) = r.unpack("B")
        shape = r.unpack(f"{rank}I")
        count = int(np.prod(shape))
        blocks[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint blocks")
    try:
        net = SegNetConfig(
            in_channels=int(meta["net.in_channels"]),
            num_classes=int(meta["net.classes"]),
            widths=tuple(int(w) for w in meta["net.widths"].split(",")),
            depth=len(meta["net.widths"].split(",")),
            reduction=int(meta["net.reduction"]),
        )
        return Checkpoint(
            kind=meta["kind"],
            net=net,
            digest=digest,
            blocks=blocks,
            taps=tuple(t for t in meta.get("taps", "").split(",") if t),
            method=meta.get("method", ""),
            metrics={k[len("metric.") :]: float(v) for k, v in meta.items() if k.startswith("metric.")},
            version=version,
        )
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"Invalid checkpoint metadata: {e}") from e


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))
    logger.info(f"Saved {ckpt.kind} checkpoint with {len(ckpt.blocks)} blocks to {path}")


def load_checkpoint(
    path: Union[str, Path], expected_digest: Optional[str] = None, force: bool = False
) -> Checkpoint:
    """Read a checkpoint; a config digest mismatch is refused unless forced."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"No such checkpoint: {path}")
    ckpt = decode_checkpoint(path.read_bytes())
    if expected_digest is not None and ckpt.digest != expected_digest:
        if not force:
            raise CheckpointError(
                f"{path} was written for config digest {ckpt.digest[:12]}, expected {expected_digest[:12]}"
            )
        logger.warning(f"Loading {path} despite config digest mismatch (forced)")
    return ckpt
