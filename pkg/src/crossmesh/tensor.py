"""Dense float tensors with tape-based reverse-mode differentiation.

The operator set is exactly what the mesh-regression model needs: matmul,
softmax, layer norm, (transposed) convolution, pooling, pointwise
nonlinearities, reductions, concat/slice. Everything runs on float64 numpy
buffers by default (float32 is allowed for the benchmark path), single
threaded, and deterministically: the same inputs always produce the same
bits.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Shape contract violation; the message names the offending shapes."""


class ContractViolation(RuntimeError):
    """Numeric contract violation (non-finite values, bad backward calls)."""


def _contig(a) -> np.ndarray:
    """C-contiguous view/copy that preserves 0-d arrays (ascontiguousarray does not)."""
    return np.asarray(a, order="C")


_default_dtype = np.dtype(np.float64)


def set_default_dtype(dtype) -> None:
    """Global conversion dtype for tensors built without an explicit dtype.

    float64 is the default everywhere; float32 exists for the benchmark path
    only.
    """
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _default_dtype = dt


_ids = itertools.count()
_local = threading.local()


@dataclass
class TapeNode:
    out_id: int
    input_ids: tuple[int, ...]
    inputs: tuple["Tensor", ...]
    out: "Tensor"
    backward: "callable"


@dataclass
class Tape:
    """Ordered record of executed differentiable operations.

    Nodes appear in execution order, so every node's inputs precede it and a
    single reverse sweep visits each node exactly once. A tape is rebuilt per
    forward pass and consumed by :func:`backward`.
    """

    nodes: list[TapeNode] = field(default_factory=list)

    def clear(self) -> None:
        self.nodes.clear()


def active_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def tape_scope(tape: Tape | None = None):
    """Run with a private tape (one per batch element in parallel mode)."""
    prev = getattr(_local, "tape", None)
    _local.tape = tape if tape is not None else Tape()
    try:
        yield _local.tape
    finally:
        _local.tape = prev


@contextmanager
def no_grad():
    """Disable tape recording (inference / benchmark path)."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """A dense numeric array plus an optional gradient buffer.

    Invariants: the buffer is contiguous, all values are finite (checked on
    every op output), and ``grad`` exists only after a backward pass and then
    has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "tid")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype)
        arr = _contig(arr)
        if not np.isfinite(arr).all():
            raise ContractViolation("tensor contains non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tid = next(_ids)

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op output, recording a tape node when gradients are on."""
    if not np.isfinite(data).all():
        raise ContractViolation(f"op produced non-finite values (inputs {[t.shape for t in inputs]})")
    track = _grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = _contig(data)
    out.requires_grad = track
    out.grad = None
    out.tid = next(_ids)
    if track:
        active_tape().nodes.append(
            TapeNode(out.tid, tuple(t.tid for t in inputs), inputs, out, backward_fn)
        )
    return out


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; populates .grad and consumes the tape."""
    if loss.ndim != 0:
        raise ContractViolation(f"backward requires a scalar, got shape {loss.shape}")
    tape = active_tape()
    grads: dict[int, np.ndarray] = {loss.tid: np.ones((), dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out_id, None)
        if g is None:
            continue
        if node.out.requires_grad:
            node.out.grad = g
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            acc = grads.get(t.tid)
            grads[t.tid] = gi if acc is None else acc + gi
        for t in node.inputs:
            if t.requires_grad and t.tid in grads:
                t.grad = grads[t.tid]
    tape.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (adjoint of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return _contig(g)


# -- arithmetic -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), back)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), back)


# -- shape ops --------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape

    def back(g):
        return (g.reshape(old),)

    return _result(x.data.reshape(shape), (x,), back)


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def back(g):
        return (_contig(g.transpose(inv)),)

    return _result(_contig(x.data.transpose(axes)), (x,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            _contig(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(ts))
        )

    return _result(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), back)


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``[start, stop)`` along one axis (token-range slicing)."""
    x = as_tensor(x)
    if not (0 <= start <= stop <= x.shape[axis]):
        raise DimensionError(f"narrow: range [{start}, {stop}) outside axis of extent {x.shape[axis]}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def back(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _result(x.data[idx].copy(), (x,), back)


def broadcast_rows(x: Tensor, n: int) -> Tensor:
    """Tile a (D,) or (1, D) vector into an (n, D) matrix."""
    x = as_tensor(x)
    row = x.data.reshape(1, -1)

    def back(g):
        return (g.sum(axis=0).reshape(x.shape),)

    return _result(np.repeat(row, n, axis=0), (x,), back)


# -- reductions -------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def back(g):
        if axis is None:
            return (np.full(x.shape, g, dtype=g.dtype),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, x.shape).copy(),)

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), back)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]

    def back(g):
        if axis is None:
            return (np.full(x.shape, g / count, dtype=g.dtype),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge / count, x.shape).copy(),)

    return _result(x.data.mean(axis=axis, keepdims=keepdims), (x,), back)


def absolute(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def back(g):
        return (g * np.sign(x.data),)

    return _result(np.abs(x.data), (x,), back)


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.sqrt(x.data)

    def back(g):
        return (g * 0.5 / y,)

    return _result(y, (x,), back)


def l1_mean(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"l1_mean: shapes differ {a.shape} vs {b.shape}")
    return tmean(absolute(sub(a, b)))


def sum_squares(x: Tensor) -> Tensor:
    """Squared-L2 reduction over all elements."""
    x = as_tensor(x)
    return tsum(mul(x, x))


# -- pointwise nonlinearities ------------------------------------------------


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def back(g):
        return (g * (x.data > 0),)

    return _result(np.maximum(x.data, 0.0), (x,), back)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation gelu (smooth, self-contained)."""
    x = as_tensor(x)
    u = _GELU_C * (x.data + _GELU_A * x.data**3)
    t = np.tanh(u)

    def back(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _result(0.5 * x.data * (1.0 + t), (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))

    def back(g):
        return (g * s * (1.0 - s),)

    return _result(s, (x,), back)


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)

    def back(g):
        return (g * (1.0 - t * t),)

    return _result(t, (x,), back)


def softplus(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def back(g):
        return (g / (1.0 + np.exp(-x.data)),)

    return _result(np.logaddexp(0.0, x.data), (x,), back)


# -- normalization -----------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax; slices along `axis` sum to 1."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _result(s, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row (last axis) normalization followed by the affine (gamma, beta)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: params {gamma.shape}/{beta.shape} do not match feature dim {d}")
    if eps <= 0:
        raise ContractViolation("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def back(g):
        reduce_axes = tuple(range(x.ndim - 1))
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        gh = g * gamma.data
        dx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), back)


# -- spatial ops -------------------------------------------------------------


def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: int):
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0 or h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(
            f"conv geometry invalid: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )
    return oh, ow


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Strided sliding-window view of a padded (C, H, W) map: (C, oh, ow, kh, kw)."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv2d_loop_reference(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
                          stride: int = 1, padding: int = 0) -> np.ndarray:
    """Reference cross-correlation via explicit window loops (forward only)."""
    cout, cin, kh, kw = w.shape
    oh, ow = _conv_geometry(x.shape[1], x.shape[2], kh, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((cout, oh, ow), dtype=x.dtype)
    for oy in range(oh):
        for ox in range(ow):
            patch = xp[:, oy * stride : oy * stride + kh, ox * stride : ox * stride + kw]
            for co in range(cout):
                out[co, oy, ox] = np.dot(w[co].ravel(), patch.ravel())
    if b is not None:
        out += b.reshape(-1, 1, 1)
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, impl: str = "im2col") -> Tensor:
    """2D cross-correlation. x: (Cin, H, W); w: (Cout, Cin, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    cout, cin, kh, kw = w.shape
    if x.ndim != 3 or x.shape[0] != cin:
        raise DimensionError(f"conv2d: input {x.shape} does not match kernel {w.shape}")
    oh, ow = _conv_geometry(x.shape[1], x.shape[2], kh, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    win = _windows(xp, kh, kw, stride)
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(oh * ow, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    if impl == "loop":
        out = conv2d_loop_reference(x.data, w.data, None, stride, padding)
    elif impl == "im2col":
        out = (cols @ wmat.T).T.reshape(cout, oh, ow)
    else:
        raise ValueError(f"conv2d: unknown impl {impl!r}")

    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise DimensionError(f"conv2d: bias {b.shape} does not match {cout} output channels")
        out = out + b.data.reshape(-1, 1, 1)
        inputs = (x, w, b)
    else:
        inputs = (x, w)

    def back(g):
        gmat = g.reshape(cout, -1)
        gw = (gmat @ cols).reshape(w.shape)
        # dx: scatter-add the per-window gradients back onto the padded input
        # (rows/cols no window covered, under floor semantics, stay zero).
        gc = (gmat.T @ wmat).reshape(oh, ow, cin, kh, kw)
        hp, wp = x.shape[1] + 2 * padding, x.shape[2] + 2 * padding
        gxp = np.zeros((cin, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + oh * stride : stride, j : j + ow * stride : stride] += (
                    gc[:, :, :, i, j].transpose(2, 0, 1)
                )
        h, wd = x.shape[1], x.shape[2]
        gx = gxp[:, padding : padding + h, padding : padding + wd]
        if b is None:
            return _contig(gx), gw
        return _contig(gx), gw, g.sum(axis=(1, 2))

    return _result(out, inputs, back)


def zero_dilate(x: Tensor, stride: int) -> Tensor:
    """Insert stride-1 zeros between spatial elements (transposed-conv helper)."""
    x = as_tensor(x)
    c, h, w = x.shape
    oh, ow = (h - 1) * stride + 1, (w - 1) * stride + 1

    def back(g):
        return (_contig(g[:, ::stride, ::stride]),)

    out = np.zeros((c, oh, ow), dtype=x.dtype)
    out[:, ::stride, ::stride] = x.data
    return _result(out, (x,), back)


def flip2d(w: Tensor) -> Tensor:
    """Reverse both spatial axes of a (A, B, kh, kw) kernel stack."""
    w = as_tensor(w)

    def back(g):
        return (_contig(g[..., ::-1, ::-1]),)

    return _result(_contig(w.data[..., ::-1, ::-1]), (w,), back)


def transposed_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
                      stride: int = 2, padding: int = 1) -> Tensor:
    """Transposed convolution; w: (Cin, Cout, kh, kw).

    Output extent is (n - 1) * stride - 2 * padding + k. Expressed as
    zero-dilation followed by a unit-stride convolution with the flipped,
    channel-swapped kernel, so gradients come for free.
    """
    x, w = as_tensor(x), as_tensor(w)
    cin, cout, kh, kw = w.shape
    if kh != kw:
        raise DimensionError(f"transposed_conv2d: square kernels only, got {w.shape}")
    if x.shape[0] != cin:
        raise DimensionError(f"transposed_conv2d: input {x.shape} does not match kernel {w.shape}")
    if padding > kh - 1:
        raise DimensionError(f"transposed_conv2d: padding {padding} exceeds kernel-1 {kh - 1}")
    xd = zero_dilate(x, stride) if stride > 1 else x
    wf = transpose(flip2d(w), (1, 0, 2, 3))
    return conv2d(xd, wf, b, stride=1, padding=kh - 1 - padding)


def max_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling over the spatial grid; ties break to the first window cell."""
    x = as_tensor(x)
    stride = kernel if stride is None else stride
    c, h, w = x.shape
    oh, ow = _conv_geometry(h, w, kernel, kernel, stride, 0)
    stack = np.stack(
        [
            x.data[:, i : i + oh * stride : stride, j : j + ow * stride : stride]
            for i in range(kernel)
            for j in range(kernel)
        ]
    )  # (k*k, C, oh, ow), window cells in row-major order
    amax = stack.argmax(axis=0)
    out = np.take_along_axis(stack, amax[None], axis=0)[0]

    def back(g):
        gx = np.zeros_like(x.data)
        for idx in range(kernel * kernel):
            i, j = divmod(idx, kernel)
            mask = amax == idx
            view = gx[:, i : i + oh * stride : stride, j : j + ow * stride : stride]
            view += g * mask
        return (gx,)

    return _result(out, (x,), back)
