"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a ``Tensor`` wraps a contiguous numpy
array, operations run eagerly, and when a ``Tape`` is active each
differentiable operation appends a node holding its inputs, its output,
and a backward closure.  ``backward`` replays the tape in reverse and
accumulates gradients into the ``.grad`` field of every leaf that
requires them.

Two rules keep the engine honest:

* no broadcasting: binary operations demand exactly equal shapes, and
  every shape error reports the offending shapes;
* tensors are immutable once produced by an operation, so backward
  closures may safely capture views of their inputs.

Float width is a process-wide setting (``set_default_dtype``): float32
for training speed, float64 when gradients are being checked against
central finite differences.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """An operation was applied to tensors of incompatible shapes."""


_FLOAT_DTYPES = (np.float32, np.float64)
_default_dtype = np.float32


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors created without an explicit dtype."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in _FLOAT_DTYPES:
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype


def default_dtype():
    return _default_dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the default float width (e.g. for grad checks)."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def _contiguous(data) -> np.ndarray:
    # np.ascontiguousarray promotes 0-d to (1,); scalars stay 0-d here.
    arr = np.asarray(data)
    return arr if arr.ndim == 0 else np.ascontiguousarray(arr)


class Tensor:
    """A dense multi-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype)
        if arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(_default_dtype)
        self.data = _contiguous(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def tensor(values, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(values, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype if dtype is not None else _default_dtype),
                  requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype if dtype is not None else _default_dtype),
                  requires_grad=requires_grad)


# --------------------------------------------------------------------------
# Tape machinery
# --------------------------------------------------------------------------

class Node:
    """One recorded operation: inputs, output, and a backward rule.

    ``backward`` maps the gradient w.r.t. the output to a tuple of
    gradients w.r.t. each input (``None`` for inputs that need none).
    """

    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: tuple, output: Tensor,
                 backward: Callable[[np.ndarray], tuple]):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations for one forward pass.

    Use as a context manager; operations executed inside record
    themselves whenever any input requires a gradient.  A tape belongs
    to the thread that opened it.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()


def emit(data: np.ndarray, inputs: Sequence[Tensor],
         backward: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap an op result, recording a node if a tape is active.

    This is the extension point other modules use to define fused
    operations (convolution, pairwise correlation, ...) with custom
    backward rules.
    """
    requires = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = _contiguous(data)
    out.requires_grad = requires
    out.grad = None
    tape = active_tape()
    if requires and tape is not None:
        tape.nodes.append(Node(tuple(inputs), out, backward))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every leaf the scalar ``loss`` depends on.

    Gradients accumulate across calls; callers zero them between
    training steps.
    """
    if loss.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    holders: dict[int, Tensor] = {id(loss): loss}
    produced = {id(node.output) for node in tape.nodes}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        holders.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.backward(g)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                holders[key] = t
    # whatever is left was never produced by a node on this tape: leaves
    for key, g in grads.items():
        t = holders[key]
        if t.requires_grad and key not in produced:
            t.accumulate_grad(g)


# --------------------------------------------------------------------------
# Shape checks
# --------------------------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtypes {a.data.dtype} and {b.data.dtype} differ")


def _check_rank(a: Tensor, rank: int, op: str) -> None:
    if a.data.ndim != rank:
        raise ShapeError(f"{op}: expected rank-{rank} tensor, got shape {a.shape}")


# --------------------------------------------------------------------------
# Elementwise operations
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    # subgradient: sign(x), with sign(0) = 0
    return emit(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return emit(np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),))


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_raw(a.data)
    return emit(y, (a,), lambda g: (g * y * (1.0 - y),))


def log(a: Tensor, floor: Optional[float] = None) -> Tensor:
    """Natural log; with ``floor`` the argument is clamped from below.

    The backward slope is 1/max(x, floor), so gradients stay bounded
    when the clamp engages.
    """
    if floor is not None:
        clipped = np.maximum(a.data, floor)
    else:
        clipped = a.data
    return emit(np.log(clipped), (a,), lambda g: (g / clipped,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    return emit(a.data * c, (a,), lambda g: (g * c,))


_UNARY = {"abs": absolute, "relu": relu, "sigmoid": sigmoid}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch an elementwise op by name: add/sub/mul/abs/relu/sigmoid."""
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"elementwise '{op_kind}' needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        if b is not None:
            raise ValueError(f"elementwise '{op_kind}' takes a single operand")
        return _UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op '{op_kind}'")


# --------------------------------------------------------------------------
# Reductions
# --------------------------------------------------------------------------

def _normalize_axes(a: Tensor, axes) -> tuple:
    if axes is None:
        return tuple(range(a.data.ndim))
    axes = tuple(int(ax) for ax in (axes if isinstance(axes, Iterable) else (axes,)))
    seen = set()
    for ax in axes:
        if ax < 0 or ax >= a.data.ndim:
            raise ShapeError(f"reduce: axis {ax} invalid for shape {a.shape}")
        if ax in seen:
            raise ShapeError(f"reduce: duplicate axis {ax}")
        seen.add(ax)
    return axes


def reduce(op_kind: str, a: Tensor, axes=None) -> Tensor:
    """Reduce over the given axes (all axes when omitted) by sum or mean."""
    if op_kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduce op '{op_kind}'")
    axes = _normalize_axes(a, axes)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.sum(axis=axes)
    if op_kind == "mean":
        out = out / count
    in_shape = a.shape
    inv = 1.0 / count if op_kind == "mean" else 1.0

    def bwd(g):
        expanded = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(expanded * inv, in_shape),)

    return emit(out, (a,), bwd)


def tsum(a: Tensor, axes=None) -> Tensor:
    return reduce("sum", a, axes)


def tmean(a: Tensor, axes=None) -> Tensor:
    return reduce("mean", a, axes)


# --------------------------------------------------------------------------
# Spatial operations on (C, H, W) tensors
# --------------------------------------------------------------------------

def crop(a: Tensor, i: int, j: int, h: int, w: int) -> Tensor:
    """Cut the window rows [i, i+h) x cols [j, j+w) out of every channel."""
    _check_rank(a, 3, "crop")
    _, full_h, full_w = a.shape
    if h < 1 or w < 1 or i < 0 or j < 0 or i + h > full_h or j + w > full_w:
        raise ShapeError(
            f"crop window (i={i}, j={j}, h={h}, w={w}) out of bounds for map {full_h}x{full_w}")
    out = a.data[:, i:i + h, j:j + w].copy()
    src_shape = a.shape

    def bwd(g):
        buf = np.zeros(src_shape, dtype=g.dtype)
        buf[:, i:i + h, j:j + w] += g
        return (buf,)

    return emit(out, (a,), bwd)


def pad_zero(a: Tensor, p: int) -> Tensor:
    """Surround every channel with a zero border of width ``p``."""
    _check_rank(a, 3, "pad_zero")
    if p < 0:
        raise ValueError(f"pad_zero: negative padding {p}")
    if p == 0:
        return emit(a.data.copy(), (a,), lambda g: (g,))
    out = np.pad(a.data, ((0, 0), (p, p), (p, p)))
    _, h, w = a.shape
    return emit(out, (a,), lambda g: (g[:, p:p + h, p:p + w],))


# --------------------------------------------------------------------------
# Linear maps
# --------------------------------------------------------------------------

def matvec(w: Tensor, x: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map w @ x (+ bias) for a rank-2 weight and rank-1 input."""
    _check_rank(w, 2, "matvec")
    _check_rank(x, 1, "matvec")
    out_dim, in_dim = w.shape
    if x.shape[0] != in_dim:
        raise ShapeError(f"matvec: weight {w.shape} incompatible with input {x.shape}")
    if bias is not None and bias.shape != (out_dim,):
        raise ShapeError(f"matvec: bias {bias.shape} incompatible with weight {w.shape}")
    wd, xd = w.data, x.data
    out = wd @ xd
    if bias is None:
        return emit(out, (w, x), lambda g: (np.outer(g, xd), wd.T @ g))
    out = out + bias.data
    return emit(out, (w, x, bias), lambda g: (np.outer(g, xd), wd.T @ g, g))


def affine_rows(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Apply an affine map to each row: (S, I) x (O, I) -> (S, O)."""
    _check_rank(x, 2, "affine_rows")
    _check_rank(w, 2, "affine_rows")
    out_dim, in_dim = w.shape
    if x.shape[1] != in_dim:
        raise ShapeError(f"affine_rows: rows {x.shape} incompatible with weight {w.shape}")
    if bias is not None and bias.shape != (out_dim,):
        raise ShapeError(f"affine_rows: bias {bias.shape} incompatible with weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if bias is None:
        return emit(out, (x, w), lambda g: (g @ wd, g.T @ xd))
    out = out + bias.data
    return emit(out, (x, w, bias), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


# --------------------------------------------------------------------------
# Structural operations
# --------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    in_shape = a.shape
    return emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(in_shape),))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shaped tensors along a new leading axis."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("stack: empty input")
    first = tensors[0]
    for t in tensors[1:]:
        _check_same_shape(first, t, "stack")
    out = np.stack([t.data for t in tensors])
    return emit(out, tuple(tensors), lambda g: tuple(g[k] for k in range(len(tensors))))


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0; trailing dimensions must agree."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat_rows: empty input")
    first = tensors[0]
    if first.data.ndim < 1:
        raise ShapeError("concat_rows: scalars cannot be concatenated")
    for t in tensors[1:]:
        if t.shape[1:] != first.shape[1:] or t.data.dtype != first.data.dtype:
            raise ShapeError(
                f"concat_rows: {t.shape} ({t.data.dtype}) incompatible with "
                f"{first.shape} ({first.data.dtype})")
    sizes = [t.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[offsets[k]:offsets[k + 1]] for k in range(len(sizes)))

    return emit(np.concatenate([t.data for t in tensors]), tuple(tensors), bwd)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows along axis 0; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"take_rows: indices must be rank-1, got shape {idx.shape}")
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"take_rows: index out of range for leading dim {n}")
    src_shape = a.shape

    def bwd(g):
        buf = np.zeros(src_shape, dtype=g.dtype)
        np.add.at(buf, idx, g)
        return (buf,)

    return emit(a.data[idx], (a,), bwd)


# --------------------------------------------------------------------------
# Finite-difference verification
# --------------------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      eps: float = 1e-5) -> float:
    """Compare analytic gradients of ``f`` at ``x`` with central differences.

    Returns the maximum over elements of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    ``x.grad`` is overwritten.  Raises if any perturbed evaluation goes
    non-finite, naming the offending element.
    """
    if eps <= 0:
        raise ValueError(f"finite_diff_check: eps must be positive, got {eps}")
    if not x.requires_grad:
        raise ValueError("finite_diff_check: x must require gradients")
    x.grad = None
    with Tape() as tape:
        out = f(x)
    if out.shape != ():
        raise ShapeError(f"finite_diff_check: f must return a scalar, got shape {out.shape}")
    backward(out, tape)
    if x.grad is None:
        raise ValueError("finite_diff_check: f does not depend on x")
    analytic = np.asarray(x.grad, dtype=np.float64).reshape(-1)
    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x).item()
        flat[i] = orig - eps
        lo = f(x).item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError(f"finite_diff_check: non-finite value at element {i}")
        numeric = (hi - lo) / (2.0 * eps)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        err = abs(analytic[i] - numeric) / denom
        if err > worst:
            worst = err
    return worst
