"""Dense float32 (optionally float64) tensors with tape-based reverse-mode differentiation.

Operations record themselves onto the innermost active :class:`Tape` when any
input requires a gradient. Outside a tape everything runs in plain inference
mode and nothing is recorded.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> backward(loss, tape)
    >>> x.grad
    array([2., 4., 6.], dtype=float32)
"""

from __future__ import annotations

import contextlib
import io
import math
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32
_precision = threading.local()


def dtype():
    """Current compute dtype: float32 unless overridden by :func:`precision`."""
    return getattr(_precision, "dtype", DTYPE)


@contextlib.contextmanager
def precision(dt):
    """Run tensor ops in ``dt`` (float32 or float64) on this thread."""
    dt = np.dtype(dt).type
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dt}")
    prev = dtype()
    _precision.dtype = dt
    try:
        yield
    finally:
        _precision.dtype = prev


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._leaf = True

    # -- convenience --------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- tape ----------------------------------------------------------------------


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


class Tape:
    """Ordered record of differentiable operations.

    Tapes are thread-local when active; distinct threads may each hold their own.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._outputs.add(id(node.output))

    def holds(self, t: Tensor) -> bool:
        return id(t) in self._outputs


_local = threading.local()


def _stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _emit(name: str, data: np.ndarray, inputs: tuple[Tensor, ...], bw) -> Tensor:
    out = Tensor.__new__(Tensor)
    dt = dtype()
    out.data = data if data.dtype == dt else data.astype(dt)
    out.grad = None
    out._leaf = False
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Node(inputs, out, bw, name))
    else:
        out.requires_grad = False
    return out


# -- broadcasting ----------------------------------------------------------------


def _check_broadcast(a: tuple, b: tuple) -> tuple:
    """Only equal shapes, scalar operands, or a trailing-suffix operand."""
    if a == b:
        return a
    if len(b) <= len(a) and (math.prod(b) == 1 or a[len(a) - len(b):] == b):
        return a
    if len(a) <= len(b) and (math.prod(a) == 1 or b[len(b) - len(a):] == a):
        return b
    raise ShapeError(f"cannot broadcast shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if math.prod(shape) == 1:
        return np.asarray(g.sum(), dtype=dtype()).reshape(shape)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


# -- elementwise -------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if need_a else None,
                _unbroadcast(g * ad, bd.shape) if need_b else None)

    return _emit("mul", ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c32 = dtype()(c)
    return _emit("scale", a.data * c32, (a,), lambda g: (g * c32,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)

    return _emit("gelu", out, (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _emit("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _emit("sum", np.asarray(a.data.sum(), dtype=dtype()), (a,),
                     lambda g: (np.broadcast_to(g, shape).astype(dtype()),))
    ax = axis % a.ndim

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).astype(dtype()),)

    return _emit("sum", a.data.sum(axis=ax), (a,), bw)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def mse(pred: Tensor, target, weight: np.ndarray | None = None) -> Tensor:
    """Weighted mean squared error ``sum(w * (p - t)^2) / sum(w)``.

    Positions with zero weight receive exactly zero gradient.
    """
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse operands differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    if weight is None:
        w = np.ones_like(diff)
    else:
        w = np.broadcast_to(np.asarray(weight, dtype=dtype()), diff.shape)
    total = float(w.sum(dtype=np.float64))
    if total <= 0:
        raise ValueError("mse weight sums to zero")
    wd = w * diff
    val = np.asarray((wd * diff).sum(dtype=np.float64) / total, dtype=dtype())

    def bw(g):
        gp = (2.0 * g / total) * wd
        gp = gp.astype(dtype())
        return gp, -gp

    return _emit("mse", val, (pred, target), bw)


# -- linear algebra / normalisation ------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[..., k, n]``; a 2-D ``b`` is shared across a's leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g):
        ga = gb = None
        if need_a:
            ga = g @ np.swapaxes(bd, -1, -2)
        if need_b:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def bw(g):
        gy = g * y
        gy -= y * gy.sum(axis=axis, keepdims=True)
        return (gy,)

    return _emit("softmax", y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    for p in (gain, bias):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm parameter shape {p.shape} != ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + dtype()(eps))
    xhat = xc * rstd
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    inputs = tuple(t for t in (x, gain, bias) if t is not None)

    def bw(g):
        dxhat = g * gain.data if gain is not None else g
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if gain is not None:
            grads.append(_unbroadcast(g * xhat, (d,)))
        if bias is not None:
            grads.append(_unbroadcast(g, (d,)))
        return grads

    return _emit("layer_norm", out, inputs, bw)


# -- structural ----------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _emit("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def take(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing."""
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=dtype())
        full[index] = g
        return (full,)

    return _emit("take", np.array(a.data[index]), (a,), bw)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; repeated ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("row id out of range")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape, dtype=dtype())
        np.add.at(full, ids, g)
        return (full,)

    return _emit("gather_rows", table.data[ids], (table,), bw)


# -- backward --------------------------------------------------------------------------


def gradients(loss: Tensor, tape: Tape) -> dict[int, tuple[Tensor, np.ndarray]]:
    """d(loss)/d(leaf) for every grad-requiring leaf reachable from ``loss``.

    Returned as ``{id(leaf): (leaf, grad)}``; leaf ``.grad`` buffers are untouched.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any grad-requiring tensor")
    if not loss._leaf and not tape.holds(loss):
        raise ValueError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=dtype())}
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    if loss._leaf:
        leaves[id(loss)] = (loss, grads[id(loss)])
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if inp._leaf:
                prev = leaves.get(key)
                leaves[key] = (inp, gi if prev is None else prev[1] + gi)
            else:
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    return leaves


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into each reachable leaf's ``.grad``."""
    for leaf, g in gradients(loss, tape).values():
        g = np.asarray(g, dtype=dtype()).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# -- finite differences ------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3,
                      tol: float = 1e-3, floor: float = 1e-2) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f(x)`` with central differences.

    Both sides are evaluated in float64 so single-precision rounding does not
    swamp the difference quotient. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``, with ``floor`` guarding near-zero components.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    with precision(np.float64):
        base = x.data.astype(np.float64)
        leaf = Tensor(base, requires_grad=True)
        with Tape() as tape:
            out = f(leaf)
        backward(out, tape)
        analytic = leaf.grad.astype(np.float64)

        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for i in range(base.size):
            plus = base.copy().reshape(-1)
            minus = plus.copy()
            plus[i] += h
            minus[i] -= h
            fp = float(f(Tensor(plus.reshape(base.shape))).data)
            fm = float(f(Tensor(minus.reshape(base.shape))).data)
            flat[i] = (fp - fm) / (plus[i] - minus[i])
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
    return GradCheckReport(err, tol)


# -- serialization -------------------------------------------------------------------------


def write_tensor(fh, arr) -> None:
    """u32 rank, u32 extents, then little-endian f32 data."""
    arr = np.ascontiguousarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f4")
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise EOFError(f"truncated tensor record: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh) -> np.ndarray:
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    count = math.prod(shape)
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
    return data.reshape(shape).astype(DTYPE)


def tensor_bytes(arr) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()

