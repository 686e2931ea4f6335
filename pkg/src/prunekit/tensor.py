"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a Tensor wraps a numpy array, every
operation that involves a gradient-requiring input attaches a TapeNode
holding the input tensors and a closure that maps the upstream gradient to
per-input gradients. ``backward`` walks the graph once in reverse
topological order, accumulates gradients additively into ``.grad``, and
frees the tape as it goes. Only first-order derivatives are supported.

Custom-gradient operations (the straight-through pruning op, the analytic
sparsity penalties) build their own TapeNodes through ``attach_node``.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .dtypes import default_dtype
from .errors import ContractError, DimensionError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording (evaluation passes, data labelling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class TapeNode:
    __slots__ = ("inputs", "backward_fn")

    def __init__(self, inputs: Sequence["Tensor"],
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 name: Optional[str] = None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[TapeNode] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad}{tag})"

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return mul(self, pow_const(other, -1.0))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def attach_node(out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Record a custom-gradient node if any input participates in autodiff."""
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting introduced."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# elementwise -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return attach_node(out, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    return attach_node(out, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.data.shape),
        _unbroadcast(g * a.data, b.data.shape)))


def neg(a: Tensor) -> Tensor:
    return attach_node(Tensor(-a.data), (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    return attach_node(out, (a,), lambda g: (g * c,))


def add_const(a: Tensor, c: float) -> Tensor:
    return attach_node(Tensor(a.data + c), (a,), lambda g: (g,))


def pow_const(a: Tensor, p: float) -> Tensor:
    out_data = a.data ** p
    out = Tensor(out_data)
    return attach_node(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    keep = a.data > 0.0
    return attach_node(out, (a,), lambda g: (g * keep,))


# shape -------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return attach_node(out, (a,), lambda g: (g.reshape(a.data.shape),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.data.shape[0], -1))


# reductions --------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).astype(a.data.dtype, copy=True),)

    return attach_node(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)
    return attach_node(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# convolution -------------------------------------------------------------

def _conv_out_extent(extent: int, k: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(
        b, c * kh * kw, ho * wo)
    return cols, ho, wo


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int,
            ho: int, wo: int) -> np.ndarray:
    b, c, h, w = x_shape
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols6[:, :, i, j]
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])
    return xp


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation over NCHW input with an OIHW kernel.

    Cross-correlation convention: the kernel is not flipped. Backward
    computes the input gradient with the transposed convolution of the
    kernel and the weight gradient by correlating input with the upstream
    gradient.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-d input/kernel, got {x.data.shape} and {w.data.shape}")
    b, cin, h, ww = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise DimensionError(
            f"conv2d channel mismatch: input has {cin}, kernel expects {cin_w}")
    ho = _conv_out_extent(h, kh, stride, padding)
    wo = _conv_out_extent(ww, kw, stride, padding)
    if ho <= 0 or wo <= 0 or kh > h + 2 * padding or kw > ww + 2 * padding:
        raise DimensionError(
            f"conv2d output would be empty: input {h}x{ww}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(cout, -1)
    out = Tensor(np.matmul(wmat, cols).reshape(b, cout, ho, wo))

    def backward(g):
        g2 = g.reshape(b, cout, ho * wo)
        grad_w = np.einsum("bol,bfl->of", g2, cols).reshape(w.data.shape)
        gcols = np.matmul(wmat.T, g2)
        grad_x = _col2im(gcols, x.data.shape, kh, kw, stride, padding, ho, wo)
        return grad_x, grad_w

    return attach_node(out, (x, w), backward)


# losses ------------------------------------------------------------------

def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over a batch of logits (B, K)."""
    if logits.data.ndim != 2:
        raise DimensionError(f"expected (batch, classes) logits, got {logits.data.shape}")
    z = logits.data
    n = z.shape[0]
    labels = np.asarray(labels)
    zmax = z.max(axis=1, keepdims=True)
    zs = z - zmax
    lse = np.log(np.exp(zs).sum(axis=1)) + zmax[:, 0]
    picked = z[np.arange(n), labels]
    out = Tensor(np.asarray((lse - picked).mean(), dtype=z.dtype))

    def backward(g):
        soft = np.exp(zs)
        soft /= soft.sum(axis=1, keepdims=True)
        soft[np.arange(n), labels] -= 1.0
        return (soft * (float(g) / n),)

    return attach_node(out, (logits,), backward)


# backward ----------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if id(inp) not in seen:
                    stack.append((inp, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable gradient-requiring tensor.

    Gradients accumulate additively across multiple uses of a tensor and
    across repeated backward calls; the tape itself is freed on the way out.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad and t.node is None:
            # leaf parameter: accumulate persistently
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
        node = t.node
        if node is None:
            continue
        input_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            prev = grads.get(id(inp))
            if prev is None:
                grads[id(inp)] = np.array(ig, dtype=inp.data.dtype, copy=True)
            else:
                prev += ig
    for t in order:  # tape is per-forward; free it
        t.node = None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
