"""Dense N-d tensors with reverse-mode automatic differentiation.

The engine is define-by-run: while a ``Tape`` is active, every operation
appends one node (inputs, output, backward closure) to the tape in execution
order, which is already a topological order. ``backward(loss)`` walks the
tape once in reverse and deposits gradients into the ``grad`` buffer of every
leaf tensor created with ``requires_grad=True``.

Tensors are thin wrappers around contiguous numpy arrays. float64 is the
default precision; float32 is available for speed. All tensors participating
in one operation must share a dtype.

With no tape active, ops run forward-only (evaluation mode) and record
nothing.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float64

_SUPPORTED_DTYPES = (np.float32, np.float64)


def set_default_dtype(dtype) -> None:
    """Set the dtype used when tensors are created without an explicit one."""
    global DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in _SUPPORTED_DTYPES:
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    DEFAULT_DTYPE = dtype


class Tensor:
    """A dense array plus optional gradient buffer and tape backreference.

    ``requires_grad=True`` marks a leaf whose gradient is wanted; after
    ``backward()`` its ``grad`` holds d(loss)/d(self), accumulated across
    calls until ``zero_grad()``.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 name: Optional[str] = None):
        if dtype is None:
            dtype = data.dtype.type if isinstance(data, np.ndarray) and \
                data.dtype.type in _SUPPORTED_DTYPES else DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            # ascontiguousarray would promote 0-d scalars to shape (1,).
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self):
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

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A view of the same data with no tape attachment."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype.type)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


class Node:
    """One recorded operation: inputs, output, and its backward closure.

    ``backward_fn(grad_out)`` returns one gradient array (or None) per input,
    in input order. ``saved`` holds whatever forward intermediates backward
    needs; it is dropped as soon as the node has been consumed.
    """

    __slots__ = ("op", "inputs", "output", "backward_fn", "saved", "tape")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable, tape: "Tape", saved=None):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn
        self.saved = saved
        self.tape = tape


class Tape:
    """Ordered record of operations for one forward pass.

    Use as a context manager around one training step; the record order is
    the execution order, so one reverse sweep visits each node exactly once
    with all downstream gradients already accumulated.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _push_tape(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _pop_tape(self)
        return False

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """Populate leaf gradients of everything ``loss`` depends on."""
        if loss.data.size != 1:
            raise ValueError(
                f"backward() needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise RuntimeError(
                "backward() called twice on the same tape; re-record the "
                "forward pass first")
        self._consumed = True

        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            g_inputs = node.backward_fn(g_out)
            # Drop the closure: it pins forward intermediates (im2col
            # columns, vote tensors) that are dead once consumed.
            node.backward_fn = None
            node.saved = None
            for t, g in zip(node.inputs, g_inputs):
                if g is None:
                    continue
                if t.node is None and not t.requires_grad:
                    continue
                if t.node is None:
                    t.grad = g if t.grad is None else t.grad + g
                else:
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + g
                    else:
                        grads[key] = g


_TAPE_STACK: list[Tape] = []


def _push_tape(tape: Tape) -> None:
    _TAPE_STACK.append(tape)


def _pop_tape(tape: Tape) -> None:
    if not _TAPE_STACK or _TAPE_STACK[-1] is not tape:
        raise RuntimeError("tape stack corrupted: exiting a tape that is not innermost")
    _TAPE_STACK.pop()


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


def record_op(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
              backward_fn: Callable) -> Tensor:
    """Wrap ``out_data`` in a Tensor and record the op if a tape is active.

    This is the extension point for composite modules (convolutionless
    capsule primitives, squash) that define their own backward rules.
    """
    out = Tensor(out_data, dtype=out_data.dtype.type)
    tape = active_tape()
    if tape is not None and any(_tracked(t) for t in inputs):
        node = Node(op, inputs, out, backward_fn, tape)
        out.node = node
        tape.record(node)
    return out


def backward(loss: Tensor) -> None:
    """Run reverse-mode differentiation from a scalar loss."""
    if loss.node is None:
        if loss.data.size != 1:
            raise ValueError(
                f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss.requires_grad:
            g = np.ones_like(loss.data)
            loss.grad = g if loss.grad is None else loss.grad + g
        return
    loss.node.tape.backward(loss)


def _check_same_dtype(op: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ValueError(f"{op}: mixed dtypes {sorted(map(str, dtypes))}")


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    # Restricted rule: equal rank, each dim equal or 1 on one side.
    if len(a) != len(b):
        raise ValueError(f"{op}: rank mismatch {a} vs {b}")
    out = []
    for da, db in zip(a, b):
        if da == db or da == 1 or db == 1:
            out.append(max(da, db))
        else:
            raise ValueError(f"{op}: shapes {a} and {b} do not broadcast")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (ds, dg) in enumerate(zip(shape, g.shape)) if ds == 1 and dg > 1)
    return g.sum(axis=axes, keepdims=True)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with gradients to both factors."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _check_same_dtype("matmul", a, b)
    out = a.data @ b.data
    a_data, b_data = a.data, b.data

    def bwd(g):
        return g @ b_data.T, a_data.T @ g

    return record_op("matmul", (a, b), out, bwd)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) 2-D cross-correlation over NCHW input.

    Implemented as im2col + one GEMM; the column matrix is kept for the
    backward pass, which costs memory proportional to kernel area times the
    output size.
    """
    if stride < 1:
        raise ValueError(f"conv2d: stride must be positive, got {stride}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(
            f"conv2d: need NCHW input and OIHW kernel, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    O, C2, kh, kw = kernel.shape
    if C != C2:
        raise ValueError(f"conv2d: channel mismatch, input {C} vs kernel {C2}")
    if kh > H or kw > W:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} larger than input {H}x{W}")
    _check_same_dtype("conv2d", x, kernel)
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1

    windows = sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]          # (B,C,Ho,Wo,kh,kw)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(B * Ho * Wo, C * kh * kw)
    kr = kernel.data.reshape(O, C * kh * kw)
    out2d = cols @ kr.T                                   # (B*Ho*Wo, O)
    out = np.ascontiguousarray(
        out2d.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    x_shape = (B, C, H, W)

    def bwd(g):
        g2d = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, O)
        gk = (g2d.T @ cols).reshape(O, C, kh, kw)
        gcols = g2d @ kr                                  # (B*Ho*Wo, C*kh*kw)
        gcols = gcols.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gx = np.zeros(x_shape, dtype=g.dtype)
        for p in range(kh):
            for q in range(kw):
                gx[:, :, p:p + stride * Ho:stride,
                    q:q + stride * Wo:stride] += gcols[:, :, :, :, p, q]
        return gx, gk

    return record_op("conv2d", (x, kernel), out, bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return record_op("relu", (x,), out, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match or broadcast through size-1 dims."""
    _broadcast_shape("add", a.shape, b.shape)
    _check_same_dtype("add", a, b)
    out = a.data + b.data
    a_shape, b_shape = a.shape, b.shape

    def bwd(g):
        return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

    return record_op("add", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product under the same restricted broadcast rule as add."""
    _broadcast_shape("mul", a.shape, b.shape)
    _check_same_dtype("mul", a, b)
    out = a.data * b.data
    a_data, b_data = a.data, b.data
    a_shape, b_shape = a.shape, b.shape

    def bwd(g):
        return (_unbroadcast(g * b_data, a_shape),
                _unbroadcast(g * a_data, b_shape))

    return record_op("mul", (a, b), out, bwd)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    out = x.data * x.data.dtype.type(c)

    def bwd(g):
        return (g * g.dtype.type(c),)

    return record_op("scale", (x,), out, bwd)


def add_scalar(x: Tensor, c: float) -> Tensor:
    """Shift by a python scalar constant."""
    out = x.data + x.data.dtype.type(float(c))

    def bwd(g):
        return (g,)

    return record_op("add_scalar", (x,), out, bwd)


def square(x: Tensor) -> Tensor:
    out = x.data * x.data
    x_data = x.data

    def bwd(g):
        return (2.0 * x_data * g,)

    return record_op("square", (x,), out, bwd)


def sum_over_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"sum_over_axis: axis {axis} out of range for shape {x.shape}")
    axis = axis % x.ndim
    out = x.data.sum(axis=axis, keepdims=keepdims)
    x_shape = x.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x_shape).copy(),)

    return record_op("sum_over_axis", (x,), out, bwd)


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element, as a scalar (rank-0) tensor."""
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)
    x_shape = x.shape

    def bwd(g):
        return (np.full(x_shape, g, dtype=g.dtype),)

    return record_op("sum_all", (x,), out, bwd)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def l2_norm_last_axis(x: Tensor, keepdims: bool = False, eps: float = 0.0) -> Tensor:
    """Euclidean norm over the last axis.

    ``eps`` is added under the square root; pass a small positive value when
    the input can be exactly zero (the gradient is x/norm).
    """
    sq = np.einsum("...i,...i->...", x.data, x.data)
    norm = np.sqrt(sq + x.data.dtype.type(eps))
    if keepdims:
        norm = norm[..., None]
    x_data = x.data

    def bwd(g):
        n = norm if keepdims else norm[..., None]
        gg = g if keepdims else g[..., None]
        return (x_data * (gg / n),)

    return record_op("l2_norm_last_axis", (x,), norm, bwd)


def softmax_over_axis(x: Tensor, axis: int) -> Tensor:
    """Shift-invariant softmax (max subtracted before exponentiation)."""
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax_over_axis: axis {axis} out of range for shape {x.shape}")
    axis = axis % x.ndim
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return record_op("softmax_over_axis", (x,), y, bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    x_shape = x.shape

    def bwd(g):
        return (g.reshape(x_shape),)

    return record_op("reshape", (x,), out, bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"transpose: axes {axes} invalid for rank {x.ndim}")
    out = np.ascontiguousarray(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return record_op("transpose", (x,), out, bwd)
