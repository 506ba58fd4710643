"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays and record the op graph through backward
closures.  Every op validates its inputs at the boundary: shapes must be
equal or scalar-vs-tensor (structural ops like ``broadcast_to`` are the
explicit escape hatch), and any op producing NaN/Inf raises immediately.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class DomainError(ValueError):
    """Operand values outside an op's domain (log of non-positive, div by zero)."""


class NonFiniteError(ArithmeticError):
    """An op produced or received NaN/Inf values."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar seed, repeated backward)."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference/eval paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor data contains NaN/Inf")
    return arr


class Tensor:
    """A float64 array node in a reverse-mode differentiation graph.

    Gradients accumulate additively across graph fan-out; call
    :meth:`zero_grad` on leaves between optimization steps.  A graph may be
    traversed by :meth:`backward` exactly once.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_backward_ran", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = _as_array(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = None
        self._backward_ran = False
        self.name = name

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{req}{nm})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff core -------------------------------------------------------

    def backward(self) -> None:
        """Seed d(self)/d(self)=1 on a scalar and populate leaf gradients."""
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._backward_ran:
            raise GraphError("backward() already ran on this graph; rebuild it or zero grads")
        self._backward_ran = True
        self.grad = np.ones_like(self.data)
        for node in reversed(topological_order(self)):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)


def topological_order(root: Tensor) -> list[Tensor]:
    """Parents-first ordering of the graph below ``root`` (each node once)."""
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _accumulate(node: Tensor, contribution: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.array(contribution, dtype=np.float64)
    else:
        node.grad += contribution


def _make(data: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("op produced NaN/Inf")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._backward_ran = False
    needs_graph = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs_graph
    if needs_graph:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def _check_elementwise(x: Tensor, y: Tensor, op: str) -> None:
    if x.shape == y.shape or x.size == 1 or y.size == 1:
        return
    raise ShapeError(f"{op}: shapes {x.shape} and {y.shape} are neither equal nor scalar")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (scalar or equal-shape operands only)."""
    if grad.shape == shape:
        return grad
    return grad.sum().reshape(shape) if np.prod(shape, dtype=int) == 1 else grad


# -- elementwise ops -----------------------------------------------------------


def add(x: Tensor, y: Tensor) -> Tensor:
    _check_elementwise(x, y, "add")

    def backward(g):
        if x.requires_grad:
            _accumulate(x, _reduce_to(g, x.shape))
        if y.requires_grad:
            _accumulate(y, _reduce_to(g, y.shape))

    return _make(x.data + y.data, (x, y), backward)


def sub(x: Tensor, y: Tensor) -> Tensor:
    _check_elementwise(x, y, "sub")

    def backward(g):
        if x.requires_grad:
            _accumulate(x, _reduce_to(g, x.shape))
        if y.requires_grad:
            _accumulate(y, _reduce_to(-g, y.shape))

    return _make(x.data - y.data, (x, y), backward)


def mul(x: Tensor, y: Tensor) -> Tensor:
    _check_elementwise(x, y, "mul")

    def backward(g):
        if x.requires_grad:
            _accumulate(x, _reduce_to(g * y.data, x.shape))
        if y.requires_grad:
            _accumulate(y, _reduce_to(g * x.data, y.shape))

    return _make(x.data * y.data, (x, y), backward)


def div(x: Tensor, y: Tensor) -> Tensor:
    _check_elementwise(x, y, "div")
    if np.any(y.data == 0.0):
        raise DomainError("div: zero in divisor")

    def backward(g):
        if x.requires_grad:
            _accumulate(x, _reduce_to(g / y.data, x.shape))
        if y.requires_grad:
            _accumulate(y, _reduce_to(-g * x.data / (y.data * y.data), y.shape))

    return _make(x.data / y.data, (x, y), backward)


def neg(x: Tensor) -> Tensor:
    def backward(g):
        if x.requires_grad:
            _accumulate(x, -g)

    return _make(-x.data, (x,), backward)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out_data = np.exp(x.data)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * out_data)

    return _make(out_data, (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise DomainError("log: non-positive operand")

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g / x.data)

    return _make(np.log(x.data), (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0.0):
        raise DomainError("sqrt: negative operand")
    out_data = np.sqrt(x.data)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * 0.5 / out_data)

    return _make(out_data, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator,
            training: bool) -> Tensor:
    """Inverted dropout: train-time mask scaled by 1/(1-rate), identity at eval."""
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * keep * scale)

    return _make(x.data * keep * scale, (x,), backward)


# -- linear algebra --------------------------------------------------------------


def matmul(x: Tensor, y: Tensor) -> Tensor:
    """Matrix product; batched when both operands carry identical batch dims."""
    if x.ndim < 2 or y.ndim < 2:
        raise ShapeError("matmul needs at least 2-d operands")
    if x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {x.shape} @ {y.shape}")
    if x.shape[:-2] != y.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {x.shape} @ {y.shape}")

    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.matmul(g, np.swapaxes(y.data, -1, -2)))
        if y.requires_grad:
            _accumulate(y, np.matmul(np.swapaxes(x.data, -1, -2), g))

    return _make(np.matmul(x.data, y.data), (x, y), backward)


# -- reductions and structure -----------------------------------------------------


def _norm_axis(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)

    def backward(g):
        if x.requires_grad:
            gk = g if keepdims else np.expand_dims(g, axes)
            _accumulate(x, np.broadcast_to(gk, x.shape))

    return _make(x.data.sum(axis=axes, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes], dtype=int))

    def backward(g):
        if x.requires_grad:
            gk = g if keepdims else np.expand_dims(g, axes)
            _accumulate(x, np.broadcast_to(gk, x.shape) / count)

    return _make(x.data.mean(axis=axes, keepdims=keepdims), (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.transpose(g, inverse))

    return _make(np.transpose(x.data, axes), (x,), backward)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast; backward sums over the expanded axes."""
    shape = tuple(shape)
    try:
        out_data = np.broadcast_to(x.data, shape)
    except ValueError as err:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from err
    added = len(shape) - x.ndim
    expanded = tuple(range(added)) + tuple(
        added + i for i, d in enumerate(x.shape) if d == 1 and shape[added + i] != 1)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g.sum(axis=expanded, keepdims=False).reshape(x.shape)
                        if expanded else g.reshape(x.shape))

    return _make(out_data, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                _accumulate(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), backward)


# -- softmax family ----------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row-stable softmax along ``axis``; rows sum to 1."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            _accumulate(x, (g - inner) * out_data)

    return _make(out_data, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        if x.requires_grad:
            soft = np.exp(out_data)
            _accumulate(x, g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean/unit variance, then affine."""
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm: normalized axis must have length >= 2")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm: gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out_data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gxh = g * gain.data
            term = gxh - gxh.mean(axis=-1, keepdims=True) \
                - xhat * (gxh * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, term * inv_std)

    return _make(out_data, (x, gain, bias), backward)


def batch_norm2d(x: Tensor, gain: Tensor, bias: Tensor,
                 running_mean: np.ndarray, running_var: np.ndarray,
                 momentum: float, eps: float, training: bool) -> Tensor:
    """Per-channel normalization of (b, c, h, w) maps, fused forward/backward.

    Train mode normalizes by batch statistics over (b, h, w) and updates the
    running arrays in place; eval mode normalizes by the running statistics.
    """
    if x.ndim != 4:
        raise ShapeError("batch_norm2d expects a (b, c, h, w) input")
    c = x.shape[1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError("batch_norm2d: gain/bias must have one entry per channel")
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        running_mean += momentum * (mu.reshape(c) - running_mean)
        running_var += momentum * (var.reshape(c) - running_var)
    else:
        mu = running_mean.reshape(1, c, 1, 1)
        var = running_var.reshape(1, c, 1, 1)
        centered = x.data - mu
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    g4 = gain.data.reshape(1, c, 1, 1)
    out_data = xhat * g4 + bias.data.reshape(1, c, 1, 1)

    def backward(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).sum(axis=axes))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=axes))
        if x.requires_grad:
            gxh = g * g4
            if training:
                dx = (gxh - gxh.mean(axis=axes, keepdims=True)
                      - xhat * (gxh * xhat).mean(axis=axes, keepdims=True)) * inv_std
            else:
                dx = gxh * inv_std
            _accumulate(x, dx)

    return _make(out_data, (x, gain, bias), backward)


# -- lookup / gather ------------------------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows ``table[ids]``; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids out of range [0, {table.shape[0]})")

    def backward(g):
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, ids.ravel(), g.reshape(-1, table.shape[1]))
            _accumulate(table, buf)

    return _make(table.data[ids], (table,), backward)


def take_along_last(x: Tensor, ids: np.ndarray) -> Tensor:
    """Pick one entry per row along the last axis (``out[...] = x[..., ids[...]]``)."""
    ids = np.asarray(ids)
    if ids.shape != x.shape[:-1]:
        raise ShapeError(f"take_along_last: index shape {ids.shape} != {x.shape[:-1]}")
    expanded = ids[..., None]

    def backward(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            np.put_along_axis(buf, expanded, g[..., None], axis=-1)
            _accumulate(x, buf)

    return _make(np.take_along_axis(x.data, expanded, axis=-1)[..., 0], (x,), backward)


# -- spatial ops -----------------------------------------------------------------------


def _windows(padded: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    return view[:, :, ::stride, ::stride, :, :]


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor],
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation over (batch, channel, height, width) maps."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    b, c, h, w = x.shape
    out_c, in_c, kh, kw = weight.shape
    if in_c != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {in_c}")
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _windows(padded, kh, kw, stride)          # view: (b, c, ho, wo, kh, kw)
    _, _, ho, wo, _, _ = win.shape
    out_data = np.einsum("bchwij,ocij->bohw", win, weight.data, optimize=True)
    if bias is not None:
        if bias.shape != (out_c,):
            raise ShapeError("conv2d: bias must have one entry per output channel")
        out_data += bias.data[None, :, None, None]

    def backward(g):
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            _accumulate(weight, np.einsum("bohw,bchwij->ocij", g, win, optimize=True))
        if x.requires_grad:
            dwin = np.einsum("bohw,ocij->bchwij", g, weight.data, optimize=True)
            dpad = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    dpad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] \
                        += dwin[:, :, :, :, i, j]
            if padding:
                dpad = dpad[:, :, padding:-padding, padding:-padding]
            _accumulate(x, dpad)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out_data, parents, backward)


def max_pool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Max pooling; padded border cells never win (padded with -inf)."""
    if x.ndim != 4:
        raise ShapeError("max_pool2d expects a 4-d input")
    b, c, h, w = x.shape
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    win = _windows(padded, kernel, kernel, stride)
    _, _, ho, wo, _, _ = win.shape
    flat = win.reshape(b, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        if x.requires_grad:
            dpad = np.zeros_like(padded)
            bi, ci, hi, wi = np.ogrid[:b, :c, :ho, :wo]
            rows = hi * stride + arg // kernel
            cols = wi * stride + arg % kernel
            np.add.at(dpad, (bi, ci, rows, cols), g)
            if padding:
                dpad = dpad[:, :, padding:-padding, padding:-padding]
            _accumulate(x, dpad)

    return _make(out_data, (x,), backward)


# -- gradient checking -------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max guarded relative error between analytic and central-difference grads.

    Per coordinate: |analytic - numeric| / max(|analytic|, |numeric|, 1e-3).
    The 1e-3 floor keeps finite-difference roundoff on near-zero gradients
    from dominating the ratio; both-zero coordinates report zero error.
    ``f`` must be deterministic with dropout disabled.
    """
    leaf = Tensor(x.data.copy(), requires_grad=True)
    loss = f(leaf)
    loss.backward()
    analytic = np.zeros_like(x.data) if leaf.grad is None else leaf.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.copy().ravel()
    probe = flat.copy()
    for i in range(flat.size):
        probe[i] = flat[i] + h
        hi = f(Tensor(probe.reshape(x.shape))).item()
        probe[i] = flat[i] - h
        lo = f(Tensor(probe.reshape(x.shape))).item()
        probe[i] = flat[i]
        numeric.ravel()[i] = (hi - lo) / (2.0 * h)

    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    return float((diff / denom).max()) if diff.size else 0.0


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()
