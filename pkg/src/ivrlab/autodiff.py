"""Minimal reverse-mode automatic differentiation on numpy arrays.

Everything runs in float64. The graph is built eagerly: each op returns a
Tensor holding a closure that routes the output gradient to its parents.
Inside a ``no_grad()`` block no closures are created, so the numerical
forward path is bit-identical with and without gradient tracking.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A numpy array plus (optionally) a node in the backward graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad: bool = False,
                 parents: Sequence["Tensor"] = (), bw: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._bw = bw

    # -- graph plumbing ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad: np.ndarray | None = None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        # Topological order by iterative DFS.
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            if node._bw is not None and node.grad is not None:
                node._bw(node.grad)
            if not node.requires_grad and node._bw is not None:
                node.grad = None  # free intermediate grads

    def _accum(self, g: np.ndarray):
        # Ops never mutate gradient arrays in place, so sharing is safe.
        self.grad = g if self.grad is None else self.grad + g

    def _track(self, *parents: "Tensor") -> bool:
        return _GRAD_ENABLED and any(p.requires_grad or p._bw is not None for p in parents)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out_data = self.data + other.data
        if not self._track(self, other):
            return Tensor(out_data)

        def bw(g):
            self._accum(_unbroadcast(g, self.shape))
            other._accum(_unbroadcast(g, other.shape))

        return Tensor(out_data, parents=(self, other), bw=bw)

    __radd__ = __add__

    def __neg__(self):
        out_data = -self.data
        if not self._track(self):
            return Tensor(out_data)

        def bw(g):
            self._accum(-g)

        return Tensor(out_data, parents=(self,), bw=bw)

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out_data = self.data * other.data
        if not self._track(self, other):
            return Tensor(out_data)

        def bw(g):
            self._accum(_unbroadcast(g * other.data, self.shape))
            other._accum(_unbroadcast(g * self.data, other.shape))

        return Tensor(out_data, parents=(self, other), bw=bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out_data = self.data / other.data
        if not self._track(self, other):
            return Tensor(out_data)

        def bw(g):
            self._accum(_unbroadcast(g / other.data, self.shape))
            other._accum(_unbroadcast(-g * self.data / (other.data ** 2), other.shape))

        return Tensor(out_data, parents=(self, other), bw=bw)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p: float):
        out_data = self.data ** p
        if not self._track(self):
            return Tensor(out_data)

        def bw(g):
            self._accum(g * p * self.data ** (p - 1))

        return Tensor(out_data, parents=(self,), bw=bw)

    def __matmul__(self, other):
        other = as_tensor(other)
        out_data = self.data @ other.data
        if not self._track(self, other):
            return Tensor(out_data)

        def bw(g):
            a, b = self.data, other.data
            if a.ndim == 1 and b.ndim == 1:
                self._accum(g * b)
                other._accum(g * a)
                return
            ga = g @ np.swapaxes(b, -1, -2) if b.ndim > 1 else np.outer(g, b).reshape(a.shape)
            gb = np.swapaxes(a, -1, -2) @ g if a.ndim > 1 else np.outer(a, g).reshape(b.shape)
            self._accum(_unbroadcast(ga, a.shape))
            other._accum(_unbroadcast(gb, b.shape))

        return Tensor(out_data, parents=(self, other), bw=bw)

    # -- elementwise functions ----------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)
        if not self._track(self):
            return Tensor(out_data)

        def bw(g):
            self._accum(g * out_data)

        return Tensor(out_data, parents=(self,), bw=bw)

    def log(self):
        out_data = np.log(self.data)
        if not self._track(self):
            return Tensor(out_data)

        def bw(g):
            self._accum(g / self.data)

        return Tensor(out_data, parents=(self,), bw=bw)

    def sqrt(self):
        out_data = np.sqrt(self.data)
        if not self._track(self):
            return Tensor(out_data)

        def bw(g):
            self._accum(g * 0.5 / out_data)

        return Tensor(out_data, parents=(self,), bw=bw)

    def tanh(self):
        out_data = np.tanh(self.data)
        if not self._track(self):
            return Tensor(out_data)

        def bw(g):
            self._accum(g * (1.0 - out_data ** 2))

        return Tensor(out_data, parents=(self,), bw=bw)

    def sigmoid(self):
        out_data = 1.0 / (1.0 + np.exp(-self.data))
        if not self._track(self):
            return Tensor(out_data)

        def bw(g):
            self._accum(g * out_data * (1.0 - out_data))

        return Tensor(out_data, parents=(self,), bw=bw)

    def gelu(self):
        # tanh approximation; derivative written out by hand.
        x = self.data
        c = np.sqrt(2.0 / np.pi)
        inner = c * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)
        out_data = 0.5 * x * (1.0 + t)
        if not self._track(self):
            return Tensor(out_data)

        def bw(g):
            d_inner = c * (1.0 + 3 * 0.044715 * x ** 2)
            d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner
            self._accum(g * d)

        return Tensor(out_data, parents=(self,), bw=bw)

    def clip(self, lo: float, hi: float):
        """Clamp; gradient passes through only where the value was in range."""
        out_data = np.clip(self.data, lo, hi)
        if not self._track(self):
            return Tensor(out_data)
        mask = (self.data >= lo) & (self.data <= hi)

        def bw(g):
            self._accum(g * mask)

        return Tensor(out_data, parents=(self,), bw=bw)

    # -- reductions / shape -------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        if not self._track(self):
            return Tensor(out_data)

        def bw(g):
            if axis is None:
                self._accum(np.broadcast_to(g, self.shape).copy() if np.ndim(g) else np.full(self.shape, g))
                return
            if not keepdims:
                ax = axis if isinstance(axis, tuple) else (axis,)
                ax = tuple(a % self.data.ndim for a in ax)
                g = np.expand_dims(g, ax)
            self._accum(np.broadcast_to(g, self.shape).copy())

        return Tensor(out_data, parents=(self,), bw=bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)
        if not self._track(self):
            return Tensor(out_data)
        src_shape = self.shape

        def bw(g):
            self._accum(g.reshape(src_shape))

        return Tensor(out_data, parents=(self,), bw=bw)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        out_data = self.data.transpose(axes)
        if not self._track(self):
            return Tensor(out_data)
        inv = np.argsort(axes)

        def bw(g):
            self._accum(g.transpose(inv))

        return Tensor(out_data, parents=(self,), bw=bw)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(*axes)

    def __getitem__(self, key):
        out_data = self.data[key]
        if not self._track(self):
            return Tensor(out_data)

        def bw(g):
            full = np.zeros(self.shape, dtype=np.float64)
            full[key] += g
            self._accum(full)

        return Tensor(out_data, parents=(self,), bw=bw)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    track = _GRAD_ENABLED and any(t.requires_grad or t._bw is not None for t in tensors)
    if not track:
        return Tensor(out_data)
    sizes = [t.shape[axis] for t in tensors]

    def bw(g):
        start = 0
        for t, s in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + s)
            t._accum(g[tuple(sl)])
            start += s

    return Tensor(out_data, parents=tuple(tensors), bw=bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    # Subtracting the detached max leaves value and gradient unchanged.
    m = Tensor(x.data.max(axis=axis, keepdims=True))
    e = (x - m).exp()
    return e / e.sum(axis=axis, keepdims=True)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution, NHWC layout, weights [kh, kw, Cin, Cout], zero padding."""
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"conv2d expects [N,H,W,C], got {xd.shape}")
    kh, kw, cin, cout = w.shape
    if xd.shape[3] != cin:
        raise ValueError(f"channel mismatch: input {xd.shape[3]} vs kernel {cin}")
    if pad:
        xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    else:
        xp = xd
    n, hp, wp, _ = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]                      # [N,Ho,Wo,Cin,kh,kw]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n, ho, wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out_data = cols @ wmat
    if b is not None:
        out_data = out_data + b.data
    parents = (x, w) if b is None else (x, w, b)
    track = _GRAD_ENABLED and any(p.requires_grad or p._bw is not None for p in parents)
    if not track:
        return Tensor(out_data)

    def bw(g):
        gw = cols.reshape(-1, kh * kw * cin).T @ g.reshape(-1, cout)
        w._accum(gw.reshape(w.shape))
        if b is not None:
            b._accum(g.sum(axis=(0, 1, 2)))
        gxp = np.zeros_like(xp)
        for di in range(kh):
            for dj in range(kw):
                # output (p,q) read input (p*stride+di, q*stride+dj)
                gxp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :] += \
                    g @ w.data[di, dj].T
        gx = gxp[:, pad:pad + xd.shape[1], pad:pad + xd.shape[2], :] if pad else gxp
        x._accum(gx)

    return Tensor(out_data, parents=parents, bw=bw)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling, NHWC."""
    xd = x.data
    out_data = xd.repeat(2, axis=1).repeat(2, axis=2)
    if not x._track(x):
        return Tensor(out_data)
    n, h, w, c = xd.shape

    def bw(g):
        x._accum(g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)))

    return Tensor(out_data, parents=(x,), bw=bw)


class Parameter(Tensor):
    """A trainable leaf tensor with a name for checkpointing."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
