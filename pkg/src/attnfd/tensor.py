"""
Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op records a :class:`Node` holding its inputs and a
closure mapping the output gradient to input gradients. Node indices come
from one monotonically increasing counter, so sorting the nodes reachable
from a loss by index is a valid topological order (inputs always precede
the node that consumed them).
"""
import contextlib
import contextvars
import itertools
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, GeometryError, LabelError, NonFiniteError

logger = logging.getLogger(__name__)

MAX_RANK = 4
NORM_EPSILON = 1e-12

_default_dtype = np.float32 if os.environ.get("AFD_PRECISION") == "32" else np.float64
_checked: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "attnfd_checked", default=os.environ.get("AFD_CHECKED") == "1"
)
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "attnfd_grad_enabled", default=True
)
_node_ids = itertools.count()

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def get_default_dtype() -> type:
    return _default_dtype


def set_default_dtype(dtype: type) -> None:
    """Switch new tensors between 64-bit (default) and 32-bit storage."""
    global _default_dtype
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"Unsupported tensor dtype: {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def checked(enabled: bool = True) -> Iterator[None]:
    """Reject NaN/Inf at every op boundary while active."""
    token = _checked.set(enabled)
    try:
        yield
    finally:
        _checked.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording any tape nodes."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def _check_finite(data: np.ndarray, op: str) -> None:
    if _checked.get() and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"Non-finite values produced by {op}")


@dataclass(eq=False)
class Node:
    op: str
    inputs: Tuple["Tensor", ...]
    backward: BackwardFn
    index: int


class Tensor:
    """A rank <= 4 real array, optionally tracked for differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(
        self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None
    ) -> None:
        arr = np.array(data, dtype=_default_dtype)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"Tensor rank {arr.ndim} exceeds {MAX_RANK}")
        _check_finite(arr, "constructor")
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None
        self.name = name

    @classmethod
    def parameter(cls, data: ArrayLike, name: Optional[str] = None) -> "Tensor":
        return cls(data, requires_grad=True, name=name)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_id(self) -> Optional[int]:
        return self.node.index if self.node is not None else None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out.node = None
        out.name = self.name
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: "TensorLike") -> "Tensor":
        return add(self, other)

    def __radd__(self, other: "TensorLike") -> "Tensor":
        return add(other, self)

    def __sub__(self, other: "TensorLike") -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: "TensorLike") -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: "TensorLike") -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: "TensorLike") -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: "TensorLike") -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


TensorLike = Union[Tensor, float, int, np.ndarray]


def _as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(
    data: np.ndarray, op: str, inputs: Tuple[Tensor, ...], backward: BackwardFn
) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    track = _grad_enabled.get() and any(t.requires_grad for t in inputs)
    out.requires_grad = track
    out.node = Node(op, inputs, backward, next(_node_ids)) if track else None
    return out


@dataclass
class Tape:
    """Nodes reachable from one loss, in topological (creation) order."""

    nodes: List[Node] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen = set()
        nodes: List[Node] = []
        stack = [loss.node] if loss.node is not None else []
        while stack:
            node = stack.pop()
            if node.index in seen:
                continue
            seen.add(node.index)
            nodes.append(node)
            for t in node.inputs:
                if t.node is not None and t.node.index not in seen:
                    stack.append(t.node)
        nodes.sort(key=lambda n: n.index)
        return cls(nodes)

    def order(self) -> dict:
        return {node.index: position for position, node in enumerate(self.nodes)}


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every trainable leaf reachable from ``loss``.

    Gradients accumulate additively across calls; call ``zero_grad`` on the
    parameters between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward() called on a loss with no trainable inputs")
    seed = np.ones_like(loss.data)
    if loss.node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    tape = Tape.from_loss(loss)
    pending = {loss.node.index: seed}
    for node in reversed(tape.nodes):
        g = pending.pop(node.index, None)
        if g is None:
            continue
        for t, ig in zip(node.inputs, node.backward(g)):
            if ig is None or not t.requires_grad:
                continue
            if ig.shape != t.data.shape:
                raise ContractError(
                    f"{node.op} produced gradient of shape {ig.shape} for input {t.data.shape}"
                )
            if t.node is not None:
                key = t.node.index
                pending[key] = pending[key] + ig if key in pending else ig
            elif t.grad is None:
                t.grad = np.array(ig, dtype=t.data.dtype)
            else:
                t.grad = t.grad + ig


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from e


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, "add", (a, b), _backward)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, "sub", (a, b), _backward)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, "mul", (a, b), _backward)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def _backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, "div", (a, b), _backward)


def _expand(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def _backward(g):
        return (_expand(g, x.shape, axis, keepdims),)

    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    return _result(out, "sum", (x,), _backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.size // max(out.size, 1)

    def _backward(g):
        return (_expand(g / count, x.shape, axis, keepdims),)

    return _result(out, "mean", (x,), _backward)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    def _backward(g):
        return (g.reshape(x.shape),)

    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"Cannot reshape {x.shape} to {shape}") from e
    return _result(out, "reshape", (x,), _backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"Cannot concatenate shapes {[t.shape for t in tensors]}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, "concat", tensors, _backward)


def abs_pow(x: Tensor, power: float) -> Tensor:
    """Elementwise |x|**power."""
    mag = np.abs(x.data)
    out = mag**power

    def _backward(g):
        return (g * power * mag ** (power - 1) * np.sign(x.data),)

    return _result(out, "abs_pow", (x,), _backward)


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def _backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, "log_softmax", (x,), _backward)


def l2_normalize(x: Tensor, axes: Tuple[int, ...], eps: float = NORM_EPSILON) -> Tensor:
    """Divide each slice spanning ``axes`` by its L2 norm.

    Slices whose norm is below ``eps`` pass through unchanged.
    """
    norm = np.sqrt((x.data * x.data).sum(axis=axes, keepdims=True))
    degenerate = norm < eps
    divisor = np.where(degenerate, 1.0, norm)
    out = x.data / divisor

    def _backward(g):
        projected = g - out * (g * out).sum(axis=axes, keepdims=True)
        return (np.where(degenerate, g, projected / divisor),)

    return _result(out, "l2_normalize", (x,), _backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        mask = x.data > 0

        def _relu_backward(g):
            return (g * mask,)

        return _result(x.data * mask, "relu", (x,), _relu_backward)
    if kind == "sigmoid":
        out = _sigmoid(x.data)

        def _sigmoid_backward(g):
            return (g * out * (1.0 - out),)

        return _result(out, "sigmoid", (x,), _sigmoid_backward)
    raise ValueError(f"Unknown activation: {kind}")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def _require_rank4(x: Tensor, op: str) -> Tuple[int, int, int, int]:
    if x.ndim != 4:
        raise DimensionError(f"{op} expects (n, c, h, w), got {x.shape}")
    return x.shape


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """Zero-padded 2-D cross-correlation (no kernel flip)."""
    n, ci, h, w = _require_rank4(x, "conv2d")
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d kernel must be (co, ci, kh, kw), got {kernel.shape}")
    co, kci, kh, kw = kernel.shape
    if kci != ci:
        raise DimensionError(f"conv2d: input has {ci} channels, kernel expects {kci}")
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({co},)")
    if stride < 1 or pad < 0:
        raise GeometryError(f"conv2d: invalid stride={stride} pad={pad}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise GeometryError(
            f"conv2d: output extent {oh}x{ow} from input {h}x{w}, kernel {kh}x{kw}, pad {pad}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    windows = windows[:, :, :oh, :ow]
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[None, :, None, None]

    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def _backward(g):
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gwin = np.tensordot(g, kernel.data, axes=([1], [0]))
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                        gwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, pad : pad + h, pad : pad + w]
        return (gx, gk, gb)[: len(inputs)]

    return _result(out, "conv2d", inputs, _backward)


def pool_spatial(x: Tensor, kind: str) -> Tensor:
    """Global average or max over (h, w) per channel -> (n, c, 1, 1)."""
    n, c, h, w = _require_rank4(x, "pool_spatial")
    flat = x.data.reshape(n, c, h * w)
    if kind == "avg":

        def _avg_backward(g):
            return (np.broadcast_to(g / (h * w), x.shape),)

        return _result(flat.mean(axis=2).reshape(n, c, 1, 1), "pool_spatial_avg", (x,), _avg_backward)
    if kind == "max":
        # argmax returns the first maximum in row-major order
        idx = flat.argmax(axis=2)[..., None]
        out = np.take_along_axis(flat, idx, axis=2).reshape(n, c, 1, 1)

        def _max_backward(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx, g.reshape(n, c, 1), axis=2)
            return (gflat.reshape(x.shape),)

        return _result(out, "pool_spatial_max", (x,), _max_backward)
    raise ValueError(f"Unknown pooling kind: {kind}")


def pool_channel(x: Tensor, kind: str) -> Tensor:
    """Per-pixel average or max across channels -> (n, 1, h, w)."""
    n, c, h, w = _require_rank4(x, "pool_channel")
    if kind == "avg":

        def _avg_backward(g):
            return (np.broadcast_to(g / c, x.shape),)

        return _result(x.data.mean(axis=1, keepdims=True), "pool_channel_avg", (x,), _avg_backward)
    if kind == "max":
        idx = x.data.argmax(axis=1)[:, None]
        out = np.take_along_axis(x.data, idx, axis=1)

        def _max_backward(g):
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, idx, g, axis=1)
            return (gx,)

        return _result(out, "pool_channel_max", (x,), _max_backward)
    raise ValueError(f"Unknown pooling kind: {kind}")


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map x @ w.T + b for x of shape (n, d_in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"dense: cannot apply weight {w.shape} to input {x.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"dense: bias shape {b.shape} != ({w.shape[0]},)")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def _backward(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        gb = g.sum(axis=0) if b is not None and b.requires_grad else None
        return (gx, gw, gb)[: len(inputs)]

    return _result(out, "dense", inputs, _backward)


def broadcast_mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a * b where every extent of b equals a's or is 1."""
    if a.ndim != b.ndim or any(eb not in (ea, 1) for ea, eb in zip(a.shape, b.shape)):
        raise DimensionError(f"broadcast_mul: cannot broadcast {b.shape} over {a.shape}")

    def _backward(g):
        return g * b.data, _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, "broadcast_mul", (a, b), _backward)


def interpolation_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Row i holds the linear weights producing output sample i.

    Half-pixel centres (align-corners false), source positions clamped to
    [0, in_size - 1].
    """
    if in_size < 1 or out_size < 1:
        raise GeometryError(f"Cannot resize extent {in_size} to {out_size}")
    src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_size - 1)
    lam = src - i0
    rows = np.arange(out_size)
    m = np.zeros((out_size, in_size), dtype=_default_dtype)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    n, c, h, w = _require_rank4(x, "bilinear_resize")
    ry = interpolation_matrix(h, out_h)
    rx = interpolation_matrix(w, out_w)
    out = ry @ x.data @ rx.T

    def _backward(g):
        return (ry.T @ g @ rx,)

    return _result(out, "bilinear_resize", (x,), _backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean over non-ignored pixels of -log softmax(logits)[label].

    With every pixel ignored the loss is 0 with zero gradient.
    """
    n, k, h, w = _require_rank4(logits, "softmax_cross_entropy")
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise DimensionError(f"Labels of shape {labels.shape} do not match logits {logits.shape}")
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise LabelError(
            f"Label {int(labels[bad][0])} outside [0, {k}) and not ignore_index {ignore_index}"
        )
    count = int(valid.sum())
    safe = np.where(valid, labels, 0).astype(np.int64)[:, None]

    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    picked = np.take_along_axis(logp, safe, axis=1)[:, 0]
    loss = -(picked * valid).sum() / count if count else 0.0

    def _backward(g):
        if not count:
            return (np.zeros_like(z),)
        gl = np.exp(logp)
        np.put_along_axis(gl, safe, np.take_along_axis(gl, safe, axis=1) - 1.0, axis=1)
        return (gl * valid[:, None] * (g / count),)

    return _result(np.asarray(loss, dtype=z.dtype), "softmax_cross_entropy", (logits,), _backward)
