"""Dense tensors with reverse-mode automatic differentiation.

A thread-local :class:`GradTape` records every differentiable operation in
execution order. ``backward(loss)`` replays the tape in reverse, accumulating
adjoints into ``Tensor.grad``. Two precisions are supported: float32 for
training and float64 for verification (finite-difference gradient checks are
meaningless in float32).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    AllMaskedWithoutEpsilon,
    DegenerateBatch,
    DivisionByZero,
    EvenKernel,
    NonPositiveStride,
    NonScalarLoss,
    ShapeMismatch,
    StaleTape,
)

__all__ = [
    "Tensor",
    "GradTape",
    "no_grad",
    "is_grad_enabled",
    "active_tape",
    "custom_op",
    "backward",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "exp",
    "relu",
    "clamp",
    "matmul",
    "reshape",
    "transpose",
    "broadcast_to",
    "narrow",
    "concat",
    "stack",
    "pad2d",
    "tensor_sum",
    "tensor_mean",
    "unfold",
    "fold",
    "conv2d",
    "batch_norm",
    "avg_pool2d",
    "softmax_masked",
    "cross_entropy",
    "mac_counter",
]


class GradTape:
    """Ordered record of executed operations, replayed in reverse by backward()."""

    def __init__(self):
        self.nodes: list[_TapeNode] = []

    def record(self, node: "_TapeNode") -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


class _TapeNode:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


_state = threading.local()


def _tls():
    if not hasattr(_state, "tape"):
        _state.tape = GradTape()
        _state.enabled = True
        _state.macs = None
    return _state


def active_tape() -> GradTape:
    """The thread-local tape recording the current forward pass."""
    return _tls().tape


def is_grad_enabled() -> bool:
    return _tls().enabled


@contextmanager
def no_grad():
    """Disable tape recording within the block (inference / finite differences)."""
    s = _tls()
    prev = s.enabled
    s.enabled = False
    try:
        yield
    finally:
        s.enabled = prev


@contextmanager
def mac_counter():
    """Count multiply-accumulates executed by matmul/conv/window primitives.

    Yields a single-element list; entry 0 holds the running MAC total. Used as
    an independent runtime oracle for the closed-form cost model.
    """
    s = _tls()
    prev = s.macs
    box = [0]
    s.macs = box
    try:
        yield box
    finally:
        s.macs = prev


def _count_macs(n: int) -> None:
    box = _tls().macs
    if box is not None:
        box[0] += int(n)


class Tensor:
    """N-dimensional array participating in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    # -- construction helpers -------------------------------------------
    @staticmethod
    def zeros(shape, dtype=np.float32, requires_grad=False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, dtype=np.float32, requires_grad=False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    # -- introspection ----------------------------------------------------
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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def exp(self):
        return exp(self)

    def relu(self):
        return relu(self)

    def clamp(self, lo, hi):
        return clamp(self, lo, hi)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def backward(self, retain_tape: bool = False):
        backward(self, retain_tape=retain_tape)


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def custom_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    input, each already reduced to that input's shape. The node is recorded
    only when grad mode is on and some input requires grad.
    """
    needs = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        active_tape().record(_TapeNode(out, tuple(inputs), backward_fn))
    return out


def backward(loss: Tensor, retain_tape: bool = False) -> None:
    """Populate gradients of everything reachable from a scalar loss.

    Replays the active tape in reverse execution order, then clears it
    (so a second call without a fresh forward raises StaleTape).
    """
    if loss.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    tape = active_tape()
    if not tape.nodes:
        raise StaleTape("no recorded operations; run a fresh forward pass")
    for node in tape.nodes:  # intermediates start clean; leaf grads accumulate
        node.out.grad = None
    loss.grad = np.ones_like(loss.data)
    # Backward functions may return views of upstream gradients, so a tensor's
    # first contribution is held by reference and only the second accumulation
    # materializes an owned buffer (in-place mutation of a shared array could
    # corrupt a sibling's gradient).
    owned: set[int] = set()
    try:
        for node in reversed(tape.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward_fn(g)
            for inp, dinp in zip(node.inputs, grads):
                if dinp is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    if dinp.dtype != inp.dtype:
                        dinp = dinp.astype(inp.dtype)
                        owned.add(id(inp))
                    inp.grad = dinp
                elif id(inp) in owned:
                    inp.grad += dinp
                else:
                    inp.grad = inp.grad + dinp
                    owned.add(id(inp))
    finally:
        if not retain_tape:
            tape.clear()


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a_shape, b_shape):
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeMismatch(f"shapes {a_shape} and {b_shape} do not broadcast") from None


# --------------------------------------------------------------------------
# elementwise ops
# --------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return custom_op(out, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return custom_op(out, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return custom_op(out, (a, b), bwd)


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    if np.any(b.data == 0):
        raise DivisionByZero("denominator contains exact zeros")
    out = a.data / b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape)

    return custom_op(out, (a, b), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return custom_op(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return custom_op(out, (a,), bwd)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; subgradient is 0 at the saturation boundaries."""
    out = np.clip(a.data, lo, hi)
    interior = (a.data > lo) & (a.data < hi)

    def bwd(g):
        return (g * interior,)

    return custom_op(out, (a,), bwd)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a: Tensor, b=None, lo=None, hi=None) -> Tensor:
    """Dispatch by name: add/sub/mul/div take two operands, exp/relu one,
    clamp takes lo and hi."""
    if op_kind in _ELEMENTWISE:
        return _ELEMENTWISE[op_kind](a, b)
    if op_kind == "exp":
        return exp(a)
    if op_kind == "relu":
        return relu(a)
    if op_kind == "clamp":
        return clamp(a, lo, hi)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# --------------------------------------------------------------------------
# shape ops
# --------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return custom_op(out, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return custom_op(out, (a,), bwd)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    _check_broadcast(a.shape, shape)
    out = np.broadcast_to(a.data, shape).copy()

    def bwd(g):
        return (_unbroadcast(g, a.shape),)

    return custom_op(out, (a,), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeMismatch(
            f"narrow [{start}:{start + length}] out of bounds for axis {axis} of {a.shape}"
        )
    idx = tuple(slice(None) if i != axis else slice(start, start + length) for i in range(a.ndim))
    out = a.data[idx]

    def bwd(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return custom_op(out, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            g[tuple(slice(None) if i != axis else slice(offsets[j], offsets[j + 1])
                    for i in range(g.ndim))]
            for j in range(len(sizes))
        )

    return custom_op(out, tuple(tensors), bwd)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in parts)

    return custom_op(out, tuple(tensors), bwd)


def pad2d(a: Tensor, padding: int) -> Tensor:
    """Zero-pad the trailing two (spatial) dimensions."""
    p = int(padding)
    if p == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 2) + [(p, p), (p, p)]
    out = np.pad(a.data, widths)
    sl = tuple([slice(None)] * (a.ndim - 2) + [slice(p, -p), slice(p, -p)])

    def bwd(g):
        return (g[sl],)

    return custom_op(out, (a,), bwd)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return custom_op(np.asarray(out), (a,), bwd)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in ax]))
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# --------------------------------------------------------------------------
# matmul
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy-style stacked batch broadcasting."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"inner extents differ: {a.shape} @ {b.shape}")
    _check_broadcast(a.shape[:-2], b.shape[:-2])
    out = np.matmul(a.data, b.data)
    _count_macs(out.size // out.shape[-1] * a.shape[-1] * out.shape[-1])
    ad, bd = a.data, b.data

    def bwd(g):
        da = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape)
        db = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape)
        return da, db

    return custom_op(out, (a, b), bwd)


# --------------------------------------------------------------------------
# unfold / fold / conv
# --------------------------------------------------------------------------

def _check_window(kernel_size: int, stride: int) -> None:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise EvenKernel(f"kernel_size must be odd and >= 1, got {kernel_size}")
    if stride < 1:
        raise NonPositiveStride(f"stride must be >= 1, got {stride}")


def _out_hw(h, w, k, stride, padding):
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeMismatch(f"window {k} exceeds padded input {h}x{w}")
    return oh, ow


def _unfold_raw(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """(B,C,H,W) -> (B, C*k*k, L) columns; channel-major, then row-major in-window."""
    b, c, h, w = x.shape
    oh, ow = _out_hw(h, w, k, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, C, oh, ow, k, k) -> (B, C, k, k, oh, ow); reshape copies to contiguous
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, oh * ow)


def _fold_raw(cols: np.ndarray, hw, k: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of _unfold_raw: scatter-add columns back onto (B,C,H,W)."""
    h, w = hw
    b = cols.shape[0]
    c = cols.shape[1] // (k * k)
    oh, ow = _out_hw(h, w, k, stride, padding)
    g = cols.reshape(b, c, k, k, oh, ow)
    buf = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for r in range(k):
        for s in range(k):
            buf[:, :, r:r + stride * oh:stride, s:s + stride * ow:stride] += g[:, :, r, s]
    if padding:
        buf = buf[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(buf)


def unfold(x: Tensor, kernel_size: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Extract zero-padded k x k neighborhoods of a (C,H,W) tensor as columns.

    Column l holds the window around output position l, laid out channel-major
    and row-major within the window. Backward scatter-adds overlaps.
    """
    _check_window(kernel_size, stride)
    if x.ndim != 3:
        raise ShapeMismatch(f"unfold expects (C,H,W), got {x.shape}")
    hw = x.shape[1:]
    cols = _unfold_raw(x.data[None], kernel_size, stride, padding)[0]

    def bwd(g):
        return (_fold_raw(g[None], hw, kernel_size, stride, padding)[0],)

    return custom_op(cols, (x,), bwd)


def fold(cols: Tensor, output_size, kernel_size: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`unfold`: scatter-add (C*k^2, L) columns to (C,H,W)."""
    _check_window(kernel_size, stride)
    if cols.ndim != 2:
        raise ShapeMismatch(f"fold expects (C*k*k, L), got {cols.shape}")
    out = _fold_raw(cols.data[None], output_size, kernel_size, stride, padding)[0]

    def bwd(g):
        return (_unfold_raw(g[None], kernel_size, stride, padding)[0],)

    return custom_op(out, (cols,), bwd)


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0,
           bias: Tensor | None = None) -> Tensor:
    """Cross-correlation of (B,Cin,H,W) with (Cout,Cin,k,k), via unfold+matmul."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4D input and weight, got {x.shape}, {weight.shape}")
    cout, cin, k, k2 = weight.shape
    if k != k2:
        raise ShapeMismatch("conv2d kernels must be square")
    _check_window(k, stride)
    if x.shape[1] != cin:
        raise ShapeMismatch(f"input channels {x.shape[1]} != weight channels {cin}")
    b, _, h, w = x.shape
    oh, ow = _out_hw(h, w, k, stride, padding)
    xd, wd = x.data, weight.data

    if k == 1:
        sl = np.ascontiguousarray(xd[:, :, ::stride, ::stride]).reshape(b, cin, oh * ow)
        cols = sl
        out = np.matmul(wd.reshape(cout, cin), sl).reshape(b, cout, oh, ow)
    else:
        cols = _unfold_raw(xd, k, stride, padding)
        out = np.matmul(wd.reshape(cout, -1), cols).reshape(b, cout, oh, ow)
    _count_macs(b * cout * cin * k * k * oh * ow)
    inputs = [x, weight]
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
        inputs.append(bias)
    # keep the column buffer only if the weight gradient will need it
    saved_cols = cols if weight.requires_grad and is_grad_enabled() else None

    def bwd(g):
        gf = g.reshape(b, cout, oh * ow)
        dx = dw = db = None
        if x.requires_grad:
            gcols = np.matmul(wd.reshape(cout, -1).T, gf)
            if k == 1 and stride == 1:
                dx = gcols.reshape(b, cin, h, w)
            elif k == 1:
                dx = np.zeros((b, cin, h, w), dtype=gcols.dtype)
                dx[:, :, ::stride, ::stride] = gcols.reshape(b, cin, oh, ow)
            else:
                dx = _fold_raw(gcols, (h, w), k, stride, padding)
        if weight.requires_grad:
            dw = np.tensordot(gf, saved_cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        return (dx, dw, db) if bias is not None else (dx, dw)

    return custom_op(out, tuple(inputs), bwd)


# --------------------------------------------------------------------------
# batch norm / pooling
# --------------------------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over a (B,C,H,W) tensor.

    Training mode normalizes with batch statistics and updates the running
    buffers in place; eval mode uses the running buffers.
    """
    if x.ndim != 4:
        raise ShapeMismatch(f"batch_norm expects (B,C,H,W), got {x.shape}")
    b, c, h, w = x.shape
    xd = x.data
    if training:
        n = b * h * w
        if n < 2:
            raise DegenerateBatch("need at least 2 values per channel for batch statistics")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / max(n - 1, 1)
    else:
        mean = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)

    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(1, c, 1, 1)) * invstd.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    gd = gamma.data

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            gi = g * gd.reshape(1, c, 1, 1)
            if training:
                n = b * h * w
                s1 = gi.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (gi * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gi -= s1 / n
                gi -= xhat * (s2 / n)
                gi *= invstd.reshape(1, c, 1, 1)
            else:
                gi *= invstd.reshape(1, c, 1, 1)
            dx = gi
        return dx, dgamma, dbeta

    return custom_op(out, (x, gamma, beta), bwd)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k average pooling; spatial dims must divide by k."""
    if x.ndim != 4:
        raise ShapeMismatch(f"avg_pool2d expects (B,C,H,W), got {x.shape}")
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeMismatch(f"spatial dims {h}x{w} not divisible by pool {k}")
    out = x.data.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bwd(g):
        g = g[:, :, :, None, :, None] / (k * k)
        return (np.broadcast_to(g, (b, c, h // k, k, w // k, k)).reshape(b, c, h, w).copy(),)

    return custom_op(out, (x,), bwd)


# --------------------------------------------------------------------------
# masked softmax / cross entropy
# --------------------------------------------------------------------------

def softmax_masked(logits: Tensor, mask: Tensor, eps: float = 1e-12) -> Tensor:
    """Mask-weighted softmax over the last axis.

    out = exp(a - a_max) * M / (sum exp(a - a_max) * M + eps). The shift by the
    rowwise max is held constant in backward; its eps-induced dependence is
    O(eps) and far below every tolerance in use. Gradient flows to both the
    logits and the mask.
    """
    if eps <= 0 and not np.any(mask.data > 0):
        raise AllMaskedWithoutEpsilon("mask is all zeros and no epsilon guard is enabled")
    _check_broadcast(logits.shape, mask.shape)
    shift = logits.data.max(axis=-1, keepdims=True)
    e = np.exp(logits.data - shift)
    u = e * mask.data
    denom = u.sum(axis=-1, keepdims=True) + eps
    out = u / denom

    def bwd(g):
        rowdot = (g * out).sum(axis=-1, keepdims=True)
        t = g - rowdot
        dlogits = _unbroadcast(out * t, logits.shape) if logits.requires_grad else None
        dmask = _unbroadcast(e / denom * t, mask.shape) if mask.requires_grad else None
        return dlogits, dmask

    return custom_op(out, (logits, mask), bwd)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of (B,C) logits against integer labels (B,)."""
    if logits.ndim != 2:
        raise ShapeMismatch(f"cross_entropy expects (B,C) logits, got {logits.shape}")
    b = logits.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    ld = logits.data
    shift = ld.max(axis=1, keepdims=True)
    e = np.exp(ld - shift)
    z = e.sum(axis=1, keepdims=True)
    log_probs = ld - shift - np.log(z)
    loss = -log_probs[np.arange(b), labels].mean()

    def bwd(g):
        d = e / z
        d[np.arange(b), labels] -= 1.0
        return (d * (g / b),)

    return custom_op(np.asarray(loss, dtype=ld.dtype), (logits,), bwd)
