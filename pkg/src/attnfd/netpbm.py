"""
Binary netpbm codecs: P6 (RGB images) and P5 (grayscale label maps),
maxval 255 only.
"""
import logging
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from .errors import MissingFileError, ParseError

logger = logging.getLogger(__name__)

MAXVAL = 255
_WHITESPACE = b" \t\n\r\x0b\x0c"


def _parse_header(buf: bytes, magic: bytes) -> Tuple[int, int, int]:
    """Return (width, height, data_offset) after validating the header."""
    if buf[:2] != magic:
        raise ParseError(f"Expected magic {magic.decode()}, found {buf[:2]!r}", offset=0)
    pos = 2
    values: List[int] = []
    while len(values) < 3:
        if pos >= len(buf):
            raise ParseError("Truncated header", offset=pos)
        ch = buf[pos : pos + 1]
        if ch in _WHITESPACE:
            pos += 1
        elif ch == b"#":
            end = buf.find(b"\n", pos)
            pos = len(buf) if end == -1 else end + 1
        else:
            start = pos
            while pos < len(buf) and buf[pos : pos + 1] not in _WHITESPACE and buf[pos : pos + 1] != b"#":
                pos += 1
            token = buf[start:pos]
            if not token.isdigit():
                raise ParseError(f"Invalid header field {token!r}", offset=start)
            values.append(int(token))
    if pos >= len(buf) or buf[pos : pos + 1] not in _WHITESPACE:
        raise ParseError("Missing whitespace after maxval", offset=pos)
    width, height, maxval = values
    if width < 1 or height < 1:
        raise ParseError(f"Invalid image size {width}x{height}", offset=2)
    if maxval != MAXVAL:
        raise ParseError(f"Unsupported maxval {maxval} (need {MAXVAL})", offset=pos - 1)
    return width, height, pos + 1


def _read(path: Union[str, Path], magic: bytes, channels: int) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"No such file: {path}")
    buf = path.read_bytes()
    try:
        width, height, offset = _parse_header(buf, magic)
    except ParseError as e:
        e.args = (f"{path}: {e.args[0]}",)
        raise
    need = width * height * channels
    if len(buf) - offset < need:
        raise ParseError(
            f"{path}: pixel data holds {len(buf) - offset} bytes, need {need}", offset=offset
        )
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=offset)
    shape = (height, width, channels) if channels > 1 else (height, width)
    return data.reshape(shape).copy()


def _write(path: Union[str, Path], magic: bytes, pixels: np.ndarray) -> None:
    height, width = pixels.shape[:2]
    header = b"%s\n%d %d\n%d\n" % (magic, width, height, MAXVAL)
    Path(path).write_bytes(header + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def read_ppm(path: Union[str, Path]) -> np.ndarray:
    """(h, w, 3) uint8 pixels."""
    return _read(path, b"P6", 3)


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    """(h, w) uint8 values."""
    return _read(path, b"P5", 1)


def write_ppm(path: Union[str, Path], pixels: np.ndarray) -> None:
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"PPM pixels must be (h, w, 3), got {pixels.shape}")
    _write(path, b"P6", pixels)


def write_pgm(path: Union[str, Path], values: np.ndarray) -> None:
    if values.ndim != 2:
        raise ValueError(f"PGM values must be (h, w), got {values.shape}")
    _write(path, b"P5", values)
