"""
Plain-text tensor dumps used for test fixtures.

Line 1: rank followed by the extents. Remaining lines: whitespace-separated
values in row-major order, written with full round-trip precision.
"""
import logging
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ParseError
from .tensor import MAX_RANK, Tensor

logger = logging.getLogger(__name__)

VALUES_PER_LINE = 8


def format_tensor(t: Union[Tensor, np.ndarray]) -> str:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    header = " ".join(str(v) for v in (data.ndim, *data.shape))
    flat = [repr(float(v)) for v in data.reshape(-1)]
    rows = [" ".join(flat[i : i + VALUES_PER_LINE]) for i in range(0, len(flat), VALUES_PER_LINE)]
    return "\n".join([header, *rows]) + "\n"


def parse_tensor(text: str) -> Tensor:
    lines = text.splitlines()
    if not lines:
        raise ParseError("Empty tensor dump", offset=0)
    try:
        header = [int(v) for v in lines[0].split()]
    except ValueError as e:
        raise ParseError(f"Malformed tensor dump header: {lines[0]!r}", offset=0) from e
    if not header or header[0] != len(header) - 1 or header[0] > MAX_RANK:
        raise ParseError(f"Tensor dump header has inconsistent rank: {lines[0]!r}", offset=0)
    shape = tuple(header[1:])
    body = " ".join(lines[1:]).split()
    try:
        values = np.array([float(v) for v in body])
    except ValueError as e:
        raise ParseError("Non-numeric value in tensor dump", offset=len(lines[0]) + 1) from e
    if values.size != int(np.prod(shape)):
        raise ParseError(
            f"Tensor dump holds {values.size} values, header {shape} needs {int(np.prod(shape))}"
        )
    return Tensor(values.reshape(shape))


def dump_tensor(t: Union[Tensor, np.ndarray], path: Union[str, Path]) -> None:
    Path(path).write_text(format_tensor(t))
    logger.debug(f"Wrote tensor dump {path}")


def load_tensor(path: Union[str, Path]) -> Tensor:
    return parse_tensor(Path(path).read_text())
