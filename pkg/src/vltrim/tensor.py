"""Dense tensors with tape-based reverse-mode differentiation.

Every tensor produced by an operation remembers the operation's inputs and a
closure computing the vector-Jacobian product. ``backward`` records those
nodes onto a :class:`GradTape` in topological order and replays it in
reverse, accumulating gradients into leaf tensors that require them.

Only first-order derivatives are supported. Values are float64 unless the
caller asks for float32.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError, NumericError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A dense array that may take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "op", "inputs", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float32 else np.float64
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op: Optional[str] = None
        self.inputs: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

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
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        extra = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{extra})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms -----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, "mean", axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce(self, "max", axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def backward(self) -> "GradTape":
        return backward(self)


def as_tensor(x: ArrayLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def make_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn, name: str) -> Tensor:
    """Wrap ``data`` as the output of a differentiable operation.

    ``backward_fn`` receives the upstream gradient and returns one gradient
    (or ``None``) per input, in order.
    """
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data)
    out.grad = None
    out.op = name
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.inputs = tuple(inputs)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out.inputs = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class TapeEntry:
    op: str
    output: Tensor
    inputs: tuple[Tensor, ...]


@dataclass
class GradTape:
    """Operations reachable from a loss, in topological (forward) order."""

    entries: list[TapeEntry] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "GradTape":
        tape = cls()
        visited: set[int] = set()
        order: list[Tensor] = []
        # iterative post-order DFS; graphs from long training steps exceed the recursion limit
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node.inputs):
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))
        for node in order:
            if node._backward is not None:
                tape.entries.append(TapeEntry(node.op or "?", node, node.inputs))
            elif node.requires_grad:
                tape.leaves.append(node)
        return tape

    def __len__(self) -> int:
        return len(self.entries)

    def replay(self, seed_grad: np.ndarray) -> None:
        root = self.entries[-1].output
        pending: dict[int, np.ndarray] = {id(root): seed_grad}
        for entry in reversed(self.entries):
            g = pending.pop(id(entry.output), None)
            if g is None:
                continue
            input_grads = entry.output._backward(g)
            for inp, ig in zip(entry.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._backward is None:
                    # leaf: accumulate in place across backward calls
                    if inp.grad is None:
                        inp.grad = np.array(ig, dtype=inp.dtype)
                    else:
                        inp.grad = inp.grad + ig
                else:
                    key = id(inp)
                    pending[key] = pending[key] + ig if key in pending else ig


def backward(loss: Tensor) -> GradTape:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Gradients accumulate over repeated calls until ``zero_grad``.
    """
    if loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None:
        raise ContractError("backward called on a tensor with an empty tape")
    tape = GradTape.record(loss)
    tape.replay(np.ones_like(loss.data))
    return tape


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for a {ndim}-d tensor")
    return axis % ndim


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return make_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return make_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return make_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return make_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def scalar_mul(a: ArrayLike, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return make_op(a.data * s, (a,), lambda g: (g * s,), "scalar_mul")


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_op(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    return make_op(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),), "power")


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise maximum; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "maximum")
    pick_a = a.data >= b.data
    return make_op(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
        "maximum",
    )


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "minimum")
    pick_a = a.data <= b.data
    return make_op(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
        "minimum",
    )


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product of ``m×k`` and ``k×n`` operands.

    Leading batch dimensions are allowed when both operands carry the same ones.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return make_op(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(_norm_axis(ax, a.ndim) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return make_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return make_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of an empty list")
    ax = _norm_axis(axis, ts[0].ndim)
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise DimensionError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {ax}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return make_op(np.concatenate([t.data for t in ts], axis=ax), ts, bw, "concat")


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


def getitem(a: ArrayLike, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        raise DimensionError("index with a numpy array, not a Tensor")
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_op(np.array(out), (a,), bw, "getitem")


def embedding(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise DimensionError("embedding ids must be integers")
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding id out of range for table of {table.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return make_op(table.data[ids], (table,), bw, "embedding")


# ---------------------------------------------------------------------------
# reductions and normalizations
# ---------------------------------------------------------------------------


def reduce(x: ArrayLike, kind: str, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axis`` (all axes when ``None``).

    The max gradient goes to the first maximal element in flat order.
    """
    x = as_tensor(x)
    if axis is not None:
        axis = _norm_axis(axis, x.ndim)
        if x.shape[axis] == 0:
            raise DimensionError(f"reduce over empty axis {axis}")
    elif x.size == 0:
        raise DimensionError("reduce over an empty tensor")
    kept_shape = x.shape if axis is None else x.shape[:axis] + (1,) + x.shape[axis + 1:]
    if axis is None:
        kept_shape = (1,) * x.ndim

    if kind == "sum":
        out = x.data.sum(axis=axis, keepdims=keepdims)
        return make_op(
            out, (x,), lambda g: (np.broadcast_to(g.reshape(kept_shape), x.shape).copy(),), "sum"
        )
    if kind == "mean":
        count = x.size if axis is None else x.shape[axis]
        out = x.data.mean(axis=axis, keepdims=keepdims)
        return make_op(
            out,
            (x,),
            lambda g: (np.broadcast_to(g.reshape(kept_shape) / count, x.shape).copy(),),
            "mean",
        )
    if kind == "max":
        if axis is None:
            flat = int(np.argmax(x.data))
            out = x.data.reshape(-1)[flat]
            out = np.array(out).reshape(kept_shape) if keepdims else np.array(out)

            def bw(g):
                full = np.zeros(x.size, dtype=x.dtype)
                full[flat] = np.asarray(g).reshape(-1)[0]
                return (full.reshape(x.shape),)

            return make_op(out, (x,), bw, "max")
        arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
        out = np.take_along_axis(x.data, arg, axis=axis)
        if not keepdims:
            out = np.squeeze(out, axis=axis)

        def bw_axis(g):
            full = np.zeros_like(x.data)
            np.put_along_axis(full, arg, g.reshape(kept_shape), axis=axis)
            return (full,)

        return make_op(out, (x,), bw_axis, "max")
    raise ContractError(f"unknown reduction {kind!r}")


def sum_(x, axis=None, keepdims=False):
    return reduce(x, "sum", axis, keepdims)


def mean(x, axis=None, keepdims=False):
    return reduce(x, "mean", axis, keepdims)


def max_(x, axis=None, keepdims=False):
    return reduce(x, "max", axis, keepdims)


def _check_finite(x: Tensor, name: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"{name}: input contains NaN or Inf")


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    _check_finite(x, "softmax")
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return make_op(y, (x,), bw, "softmax")


def log_softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    _check_finite(x, "log_softmax")
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    out = shifted - lse
    y = np.exp(out)

    def bw(g):
        return (g - y * g.sum(axis=ax, keepdims=True),)

    return make_op(out, (x,), bw, "log_softmax")


def l2_normalize(x: ArrayLike, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / max(||x||, eps) along ``axis``."""
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    norm = np.sqrt((x.data * x.data).sum(axis=ax, keepdims=True))
    safe = np.maximum(norm, eps)
    y = x.data / safe
    active = norm > eps

    def bw(g):
        proj = (g * y).sum(axis=ax, keepdims=True)
        return (np.where(active, (g - y * proj) / safe, g / safe),)

    return make_op(y, (x,), bw, "l2_normalize")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, H', W', kh, kw) view, no copy
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(
    x: ArrayLike,
    weight: ArrayLike,
    bias: Optional[ArrayLike] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-d cross-correlation.

    ``x`` is ``C_in×H×W`` or batched ``N×C_in×H×W``; ``weight`` is
    ``C_out×C_in×kh×kw``. Output channel ``c`` comes from filter ``c``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    unbatched = x.ndim == 3
    if x.ndim not in (3, 4) or weight.ndim != 4:
        raise DimensionError(f"conv2d: bad ranks input {x.shape}, weight {weight.shape}")
    xb = x.data[None] if unbatched else x.data
    n, c_in, h, w = xb.shape
    c_out, wc_in, kh, kw = weight.shape
    if wc_in != c_in:
        raise DimensionError(f"conv2d: input has {c_in} channels, weight {weight.shape} expects {wc_in}")
    if stride < 1 or padding < 0:
        raise DimensionError("conv2d: stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1
    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb
    cols = _windows(xp, kh, kw, stride).transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c_in * kh * kw)
    wmat = weight.data.reshape(c_out, -1)
    out = (cols @ wmat.T).reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)
    inputs: list[Tensor] = [x, weight]
    b = None
    if bias is not None:
        b = as_tensor(bias)
        if b.shape != (c_out,):
            raise DimensionError(f"conv2d: bias shape {b.shape} != ({c_out},)")
        out = out + b.data[None, :, None, None]
        inputs.append(b)
    out = np.ascontiguousarray(out)
    if unbatched:
        out = out[0]

    def bw(g):
        gb = g[None] if unbatched else g
        gmat = gb.transpose(0, 2, 3, 1).reshape(n * h_out * w_out, c_out)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, h_out, w_out, c_in, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            if unbatched:
                gx = gx[0]
        grads = [gx, gw]
        if b is not None:
            grads.append(gb.sum(axis=(0, 2, 3)))
        return grads

    return make_op(out, inputs, bw, "conv2d")


__all__ = [
    "Tensor",
    "GradTape",
    "TapeEntry",
    "no_grad",
    "is_grad_enabled",
    "as_tensor",
    "make_op",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "scalar_mul",
    "exp",
    "log",
    "relu",
    "power",
    "maximum",
    "minimum",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "stack",
    "getitem",
    "embedding",
    "reduce",
    "sum_",
    "mean",
    "max_",
    "softmax",
    "log_softmax",
    "l2_normalize",
    "conv2d",
]
