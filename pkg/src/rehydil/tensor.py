"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every op takes :class:`Tensor` inputs (or python scalars where noted) and
returns a new Tensor.  When any input requires grad, the output records its
parents and a closure mapping the output gradient to parent gradients.
``Tensor.backward`` walks that graph once in reverse topological order and
then releases it; a second call raises :class:`GraphError`.

Shapes are never broadcast.  The only implicit alignment is tensor-scalar.
"""
from __future__ import annotations

import contextlib
import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "ShapeError", "DomainError", "GraphError",
    "tensor", "no_grad", "is_grad_enabled", "count_ops",
    "add", "sub", "mul", "div", "neg", "add_scalar", "mul_scalar", "rsub_scalar",
    "matmul", "conv2d", "max_pool2d", "upsample2d",
    "relu", "sigmoid", "exp", "log", "power", "clamp",
    "sum", "mean", "concat", "reshape", "transpose", "take",
    "write_tensor", "read_tensor", "tensor_to_bytes", "tensor_from_bytes",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(ValueError):
    """Raised when an op is evaluated outside its mathematical domain."""

    def __init__(self, op: str, detail: str):
        self.op = op
        super().__init__(f"{op}: {detail}")


class GraphError(RuntimeError):
    pass


_GRAD_ENABLED = True
_OP_COUNTER: list[int] | None = None


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def count_ops():
    """Count forward op invocations inside the block.

    Yields a one-element list whose entry is updated in place.
    """
    global _OP_COUNTER
    prev = _OP_COUNTER
    counter = [0]
    _OP_COUNTER = counter
    try:
        yield counter
    finally:
        _OP_COUNTER = prev
        if prev is not None:
            prev[0] += counter[0]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_released")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._released = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._op == "leaf"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="tensor has more than one element")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every tracked leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ShapeError("backward", self.shape, detail="loss must be a scalar")
        if self._released:
            raise GraphError("backward called twice on the same graph; run a fresh forward pass")
        if not self.requires_grad:
            raise GraphError("backward on a tensor that does not require grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._released:
                raise GraphError(f"graph through '{node._op}' was already released by an earlier backward")
            if g is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if not node.is_leaf:
                node._backward = None
                node._parents = ()
                node._released = True

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return rsub_scalar(other, self)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        if other == 0:
            raise DomainError("div", "division by zero scalar")
        return mul_scalar(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _index(self, index)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _OP_COUNTER is not None:
        _OP_COUNTER[0] += 1
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._released = False
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div", "division by zero")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make("add_scalar", a.data + float(c), (a,), lambda g: (g,))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("mul_scalar", a.data * c, (a,), lambda g: (g * c,))


def rsub_scalar(c: float, a: Tensor) -> Tensor:
    """``c - a``."""
    return _make("rsub_scalar", float(c) - a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp", "overflow")
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log", "argument must be strictly positive")
    return _make("log", np.log(x), (a,), lambda g: (g / x,))


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    x = a.data
    if not float(p).is_integer() and np.any(x < 0):
        raise DomainError("power", f"negative base with non-integer exponent {p}")
    if p < 0 and np.any(x == 0):
        raise DomainError("power", f"zero base with negative exponent {p}")
    out = np.power(x, p)

    def backward(g):
        if p == 0:
            return (np.zeros_like(x),)
        if p < 1:
            # x**(p-1) is singular at zero; the one-sided derivative is taken as 0 there
            with np.errstate(divide="ignore", invalid="ignore"):
                d = np.where(x > 0, p * np.power(np.where(x > 0, x, 1.0), p - 1), 0.0)
            return (g * d,)
        return (g * p * np.power(x, p - 1),)

    return _make("power", out, (a,), backward)


def clamp(a: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make("clamp", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int, op: str) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(op, (ndim,), detail=f"axis {ax} out of range")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim, "sum")
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(out, dtype=np.float64), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim, "mean")
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul_scalar(sum(a, axes, keepdims), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size or any(s <= 0 for s in shape):
        raise ShapeError("reshape", a.shape, shape)
    src = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, detail=f"bad permutation {axes}")
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat", (), detail="no inputs")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != ax):
            raise ShapeError("concat", ref.shape, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _make("concat", out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=ax)))


def take(a: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Gather slices along ``axis`` by an index list (repeats allowed)."""
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % a.ndim
    n = a.shape[ax]
    if idx.ndim != 1 or (idx.size and (idx.min() < -n or idx.max() >= n)):
        raise ShapeError("take", a.shape, detail=f"index out of range for axis {ax}")
    out = np.take(a.data, idx, axis=ax)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (full,)

    return _make("take", out, (a,), backward)


def _index(a: Tensor, index) -> Tensor:
    out = a.data[index]
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make("index", np.array(out, dtype=np.float64), (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: str = "same") -> Tensor:
    """Stride-1 cross-correlation.  x: B×C×H×W, w: O×C×kh×kw, b: O."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("conv2d", w.shape, b.shape, detail="bias must have one entry per output channel")
    kh, kw = w.shape[2], w.shape[3]
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("conv2d", w.shape, detail="same padding needs odd kernel")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    H, W = x.shape[2], x.shape[3]
    if H + 2 * ph < kh or W + 2 * pw < kw:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than input")

    xd, wd = x.data, w.data
    if kh == 1 and kw == 1:
        wm = wd[:, :, 0, 0]
        out = np.einsum("bchw,oc->bohw", xd, wm, optimize=True)
        if b is not None:
            out += b.data[None, :, None, None]

        def backward1(g):
            gx = np.einsum("bohw,oc->bchw", g, wm, optimize=True)
            gw = np.einsum("bohw,bchw->oc", g, xd, optimize=True)[:, :, None, None]
            return (gx, gw) if b is None else (gx, gw, g.sum(axis=(0, 2, 3)))

        parents = (x, w) if b is None else (x, w, b)
        return _make("conv2d", out, parents, backward1)

    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B,C,Ho,Wo,kh,kw
    out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
        gxp = np.tensordot(gwin, wd[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        gx = gxp[:, :, ph:ph + H, pw:pw + W]
        gx = np.ascontiguousarray(gx)
        return (gx, gw) if b is None else (gx, gw, g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return _make("conv2d", out, parents, backward)


def max_pool2d(x: Tensor) -> Tensor:
    """2×2 max-pool, stride 2.  Ties go to the first element in row-major order."""
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError("max_pool2d", x.shape, detail="needs B×C×H×W with even H, W")
    B, C, H, W = x.shape
    blocks = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((B, C, H // 2, W // 2, 4))
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return _make("max_pool2d", out, (x,), backward)


def upsample2d(x: Tensor) -> Tensor:
    """Nearest-neighbour ×2 upsampling."""
    if x.ndim != 4:
        raise ShapeError("upsample2d", x.shape, detail="needs B×C×H×W")
    B, C, H, W = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _make("upsample2d", out, (x,),
                 lambda g: (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),))


# ---------------------------------------------------------------------------
# serialization: u32 rank, u32 dims (little-endian), float64 payload row-major
# ---------------------------------------------------------------------------

def tensor_to_bytes(t) -> bytes:
    # np.array, not ascontiguousarray: the latter promotes 0-d arrays to 1-d
    arr = np.array(t.data if isinstance(t, Tensor) else t, dtype="<f8", order="C")
    header = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (array, next offset)."""
    if len(buf) < offset + 4:
        raise ValueError("truncated tensor header")
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    n = int(np.prod(dims)) if rank else 1
    end = offset + 8 * n
    if len(buf) < end:
        raise ValueError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(dims)
    return arr, end


def write_tensor(f: BinaryIO, t) -> None:
    f.write(tensor_to_bytes(t))


def read_tensor(f: BinaryIO) -> np.ndarray:
    head = f.read(4)
    if len(head) < 4:
        raise ValueError("truncated tensor header")
    (rank,) = struct.unpack("<I", head)
    dims_raw = f.read(4 * rank)
    dims = struct.unpack(f"<{rank}I", dims_raw)
    n = int(np.prod(dims)) if rank else 1
    payload = f.read(8 * n)
    if len(payload) < 8 * n:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
