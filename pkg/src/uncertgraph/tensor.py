"""Dense float32 tensors with tape-based reverse-mode differentiation.

Every op takes and returns :class:`Tensor` objects. While gradient recording
is enabled, an op whose inputs require gradients links its output to those
inputs together with a local gradient rule. :func:`backward` linearises the
links into a tape (topological order) and replays it in reverse.

Storage is float32; :func:`precision` switches to float64 inside a block,
which finite-difference gradient checks rely on.

Broadcasting is deliberately limited: binary ops require equal shapes, with
:func:`add_bias` and :func:`mul_const` as the only broadcasting entry points.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

from .errors import DomainError, ShapeError, UncertGraphError

DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (inference, optimizer updates)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def precision(dtype):
    """Create and compute tensors in ``dtype`` inside the block."""
    global DTYPE
    prev = DTYPE
    DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = ""):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable | None = _backward
        self.op = op

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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __truediv__(self, other: "Tensor") -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _record(data: np.ndarray, parents: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=tuple(parents), _backward=rule, op=op)
    return Tensor(data)


def build_tape(root: Tensor) -> list[Tensor]:
    """Tensors reachable from ``root`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tensor reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UncertGraphError("loss does not depend on any tensor requiring grad")
    tape = build_tape(loss)
    for node in tape:
        node.grad = None
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    out = a.data / b.data
    return _record(out, (a, b), lambda g: (g / b.data, -g * out / b.data), "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = DTYPE(c)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_const(a: Tensor, c: float) -> Tensor:
    return _record(a.data + DTYPE(c), (a,), lambda g: (g,), "add_const")


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array broadcastable to ``a.shape``."""
    c = np.asarray(c, dtype=DTYPE)
    out = a.data * c
    if out.shape != a.shape:
        raise ShapeError(f"mul_const: constant {c.shape} would broadcast {a.shape} to {out.shape}")
    return _record(out, (a,), lambda g: (g * c,), "mul_const")


def add_bias(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """``x + b`` with the 1-D ``b`` laid along ``axis``."""
    axis = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    others = tuple(i for i in range(x.ndim) if i != axis)
    return _record(x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=others)), "add_bias")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


# ---------------------------------------------------------------- elementwise


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = (1.0 / (1.0 + np.exp(-a.data.astype(np.float64)))).astype(DTYPE)
    return _record(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a: Tensor) -> Tensor:
    return _record(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


def pow_const(a: Tensor, p: float) -> Tensor:
    """``a ** p`` for ``a >= 0``; the gradient at 0 is taken as 0 for p >= 1."""
    if np.any(a.data < 0):
        raise DomainError("pow_const needs non-negative input")
    out = np.power(a.data, DTYPE(p))

    def rule(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            local = p * np.power(a.data, DTYPE(p - 1)) if p != 0 else np.zeros_like(a.data)
        return (g * np.nan_to_num(local, nan=0.0, posinf=0.0),)

    return _record(out, (a,), rule, "pow_const")


def softmax(a: Tensor, axis: int = 1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted.astype(np.float64))
    out = (e / e.sum(axis=axis, keepdims=True)).astype(DTYPE)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), rule, "softmax")


def softmax_channel(a: Tensor) -> Tensor:
    """Softmax over axis 1 (the class axis of N,C,... layouts)."""
    return softmax(a, axis=1)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data.astype(np.float64)
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = (shifted - lse).astype(DTYPE)
    probs = np.exp(shifted - lse).astype(DTYPE)

    def rule(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), rule, "log_softmax")


def dropout(a: Tensor, p: float, train: bool, key: Sequence = (0,)) -> Tensor:
    """Inverted dropout driven by a counter-based (Philox) stream.

    ``key`` is a tuple of ints keying one stream for the whole tensor, or a
    sequence of such tuples, one per leading-axis row. Element ``i`` of a
    mask is the ``i``-th draw of its stream, so masks depend only on
    (key, element index), never on call history or batch composition.
    """
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout probability must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return a
    if len(key) and isinstance(key[0], (tuple, list)):
        if len(key) != a.shape[0]:
            raise ShapeError(f"dropout got {len(key)} row keys for {a.shape[0]} rows")
        keep = np.stack([dropout_mask(a.shape[1:], p, k) for k in key])
    else:
        keep = dropout_mask(a.shape, p, key)
    factor = keep.astype(DTYPE) / DTYPE(1.0 - p)
    return _record(a.data * factor, (a,), lambda g: (g * factor,), "dropout")


def dropout_mask(shape: tuple[int, ...], p: float, key: Sequence[int]) -> np.ndarray:
    bitgen = np.random.Philox(np.random.SeedSequence([int(k) for k in key]))
    u = np.random.Generator(bitgen).random(int(np.prod(shape)), dtype=np.float32)
    return (u >= p).reshape(shape)


# ---------------------------------------------------------------- reductions and shape


def sum(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, dtype=np.float64).astype(DTYPE)

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), a.shape).astype(DTYPE),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(DTYPE),)

    return _record(out, (a,), rule, "sum")


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis), 1.0 / count)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def _scatter_rows(idx: np.ndarray, g: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``g`` into ``n`` buckets given by ``idx`` (sparse product)."""
    sel = sparse.csr_matrix((np.ones(len(idx), dtype=g.dtype), (idx, np.arange(len(idx)))), shape=(n, len(idx)))
    return np.asarray(sel @ g.reshape(len(idx), -1)).reshape((n,) + g.shape[1:])


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    idx = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, idx, axis=axis)

    def rule(g):
        if axis == 0 and idx.ndim == 1:
            return (_scatter_rows(idx, g, a.shape[0]).astype(DTYPE),)
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _record(out, (a,), rule, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# ---------------------------------------------------------------- image ops


class _FlatLayout:
    """Channel-major, zero-padded, flattened image layout used by conv2d.

    Images are padded and laid end to end along one axis, so each kernel tap
    is a constant offset into the buffer and a whole convolution becomes one
    matrix product followed by shifted accumulations.
    """

    def __init__(self, n: int, h: int, w: int, kh: int, kw: int, padding: int):
        self.n, self.h, self.w, self.pad = n, h, w, padding
        self.hp, self.wp = h + 2 * padding, w + 2 * padding
        self.oh, self.ow = self.hp - kh + 1, self.wp - kw + 1
        self.m = n * self.hp * self.wp
        self.offsets = [i * self.wp + j for i in range(kh) for j in range(kw)]
        self.total = self.m + self.offsets[-1]

    def pack(self, x: np.ndarray) -> np.ndarray:
        c = x.shape[1]
        buf = np.zeros((c, self.total), dtype=DTYPE)
        p = self.pad
        grid = buf[:, : self.m].reshape(c, self.n, self.hp, self.wp)
        grid[:, :, p : p + self.h, p : p + self.w] = x.transpose(1, 0, 2, 3)
        return buf

    def pack_output(self, g: np.ndarray) -> np.ndarray:
        f = g.shape[1]
        buf = np.zeros((f, self.m), dtype=DTYPE)
        buf.reshape(f, self.n, self.hp, self.wp)[:, :, : self.oh, : self.ow] = g.transpose(1, 0, 2, 3)
        return buf

    def unpack_output(self, flat: np.ndarray) -> np.ndarray:
        f = flat.shape[0]
        grid = flat[:, : self.m].reshape(f, self.n, self.hp, self.wp)
        return np.ascontiguousarray(grid[:, :, : self.oh, : self.ow].transpose(1, 0, 2, 3))

    def unpack_input(self, flat: np.ndarray) -> np.ndarray:
        c, p = flat.shape[0], self.pad
        grid = flat[:, : self.m].reshape(c, self.n, self.hp, self.wp)
        return np.ascontiguousarray(grid[:, :, p : p + self.h, p : p + self.w].transpose(1, 0, 2, 3))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation of N,C,H,W input with an F,C,kh,kw kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    F, C, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel dims must be odd, got {kh}x{kw}")
    if padding < 0:
        raise DomainError("padding must be non-negative")
    N, _, H, W = x.shape
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError("conv2d kernel larger than padded input")
    if bias is not None and bias.shape != (F,):
        raise ShapeError(f"conv2d bias must have shape ({F},)")

    lay = _FlatLayout(N, H, W, kh, kw, padding)
    xbuf = lay.pack(x.data)
    taps = kernel.data.transpose(2, 3, 0, 1).reshape(kh * kw * F, C)
    per_tap = taps @ xbuf
    acc = np.zeros((F, lay.m), dtype=DTYPE)
    for t, off in enumerate(lay.offsets):
        acc += per_tap[t * F : (t + 1) * F, off : off + lay.m]
    out = lay.unpack_output(acc)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def rule(g):
        gbuf = lay.pack_output(g)
        back = kernel.data.transpose(2, 3, 1, 0).reshape(kh * kw * C, F) @ gbuf
        gx = np.zeros((C, lay.total), dtype=DTYPE)
        for t, off in enumerate(lay.offsets):
            gx[:, off : off + lay.m] += back[t * C : (t + 1) * C]
        shifted = np.zeros((kh * kw * F, lay.total), dtype=DTYPE)
        for t, off in enumerate(lay.offsets):
            shifted[t * F : (t + 1) * F, off : off + lay.m] = gbuf
        gw = (shifted @ xbuf.T).reshape(kh, kw, F, C).transpose(2, 3, 0, 1)
        grads = [lay.unpack_input(gx), np.ascontiguousarray(gw)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _record(out, parents, rule, "conv2d")


def maxpool2(a: Tensor) -> Tensor:
    if a.ndim != 4:
        raise ShapeError(f"maxpool2 expects N,C,H,W, got {a.shape}")
    N, C, H, W = a.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {H}x{W}")
    win = a.data.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H // 2, W // 2, 4)
    arg = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, arg, axis=-1)[..., 0]

    def rule(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg, g[..., None], axis=-1)
        return (gw.reshape(N, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H, W),)

    return _record(out, (a,), rule, "maxpool2")


def upsample_nearest2(a: Tensor) -> Tensor:
    if a.ndim != 4:
        raise ShapeError(f"upsample_nearest2 expects N,C,H,W, got {a.shape}")
    N, C, H, W = a.shape
    out = a.data.repeat(2, axis=2).repeat(2, axis=3)
    return _record(out, (a,), lambda g: (g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)),), "upsample_nearest2")


# ---------------------------------------------------------------- segment ops
#
# Values are rows grouped contiguously by segment; ``indptr`` (length n+1) marks
# the group boundaries as in CSR storage. Every segment must be non-empty.


class _Segments:
    """Index bookkeeping derived from one ``indptr``, reused across calls."""

    def __init__(self, indptr: np.ndarray):
        self.indptr = indptr
        self.n = len(indptr) - 1
        deg = np.diff(indptr)
        self.seg = np.repeat(np.arange(self.n), deg)
        self.rows = len(self.seg)
        self.selector = sparse.csr_matrix(
            (np.ones(self.rows), (self.seg, np.arange(self.rows))), shape=(self.n, self.rows)
        )
        self._selectors = {np.dtype(np.float64): self.selector}
        self.width = int(deg.max())
        self.padded = self.width * self.n <= 4 * self.rows
        if self.padded:
            # (width, n) row numbers; short segments repeat their last row
            self.gather = indptr[:-1] + np.minimum(np.arange(self.width)[:, None], deg - 1)

    def selector_for(self, dtype) -> sparse.csr_matrix:
        dtype = np.dtype(dtype)
        if dtype not in self._selectors:
            self._selectors[dtype] = self.selector.astype(dtype)
        return self._selectors[dtype]


# entries keep their indptr alive, so ids in keys cannot be recycled
_SEGMENT_CACHE: list[tuple[int, _Segments]] = []


def _segments(values: Tensor, indptr: np.ndarray) -> _Segments:
    for key, layout in _SEGMENT_CACHE:
        if key == id(indptr) and layout.rows == values.shape[0]:
            return layout
    arr = np.asarray(indptr, dtype=np.int64)
    if arr[0] != 0 or arr[-1] != values.shape[0]:
        raise ShapeError("indptr must start at 0 and end at the number of rows")
    if np.any(np.diff(arr) <= 0):
        raise ShapeError("every segment needs at least one row")
    layout = _Segments(arr)
    if arr is indptr:
        _SEGMENT_CACHE.append((id(indptr), layout))
        del _SEGMENT_CACHE[:-16]
    return layout


def segment_ids(indptr: np.ndarray) -> np.ndarray:
    indptr = np.asarray(indptr, dtype=np.int64)
    return np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))


def segment_sum(values: Tensor, indptr: np.ndarray) -> Tensor:
    lay = _segments(values, indptr)
    flat = values.data.reshape(lay.rows, -1)
    out = np.asarray(lay.selector_for(flat.dtype) @ flat).reshape((lay.n,) + values.shape[1:])
    return _record(out, (values,), lambda g: (g[lay.seg],), "segment_sum")


def _segment_extreme(values: Tensor, indptr: np.ndarray, ufunc, op: str) -> Tensor:
    lay = _segments(values, indptr)
    v = values.data.reshape(lay.rows, -1)
    if lay.padded:
        # short segments: gather to (max degree, n, F) and reduce over slots
        pad = np.take(v, lay.gather, axis=0)
        best = ufunc.reduce(pad, axis=0)
        slot = np.full(best.shape, lay.width - 1, dtype=np.int64)
        for j in range(lay.width - 2, -1, -1):
            np.copyto(slot, j, where=pad[j] == best)
        first = lay.gather[slot, np.arange(lay.n)[:, None]]
    else:
        out = ufunc.reduceat(v, lay.indptr[:-1], axis=0)
        hit_row = np.where(v == out[lay.seg], np.arange(lay.rows, dtype=np.int64)[:, None], lay.rows)
        first = np.minimum.reduceat(hit_row, lay.indptr[:-1], axis=0)
    cols = np.broadcast_to(np.arange(v.shape[1]), first.shape)
    out = v[first, cols].reshape((lay.n,) + values.shape[1:])

    def rule(g):
        # the gradient goes to the first row attaining the extreme
        grad = np.zeros_like(v)
        grad[first, cols] = g.reshape(first.shape)
        return (grad.reshape(values.shape),)

    return _record(out, (values,), rule, op)


def segment_max(values: Tensor, indptr: np.ndarray) -> Tensor:
    return _segment_extreme(values, indptr, np.maximum, "segment_max")


def segment_min(values: Tensor, indptr: np.ndarray) -> Tensor:
    return _segment_extreme(values, indptr, np.minimum, "segment_min")

