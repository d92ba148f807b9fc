"""Minimal dense tensor with reverse-mode differentiation.

Values live in numpy arrays (float32 or float64). Every op records its
inputs and a closure mapping the output gradient to input gradients; the
closures are replayed in reverse topological order by :func:`backward`.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError

GELU_COEF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

_DTYPES = {"f32": np.float32, "f64": np.float64}
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_dtype(dtype):
    if dtype is None:
        return None
    if isinstance(dtype, str):
        return np.dtype(_DTYPES[dtype])
    return np.dtype(dtype)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        dt = _as_dtype(dtype)
        arr = np.asarray(data, dtype=dt)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # ---- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self):
        return self.data.shape[0]

    # ---- operator sugar ------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self, leaves=None):
        backward(self, leaves=leaves)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dt = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dt))


def _make(value, parents, backward_fn, op):
    out = Tensor(value)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---- graph ---------------------------------------------------------------


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor


@dataclass
class Graph:
    """Ops reachable from a root, in topological order (inputs first)."""

    nodes: list = field(default_factory=list)
    leaves: list = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order, leaves, seen = [], [], set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._backward is None:
                if t.requires_grad:
                    leaves.append(t)
                continue
            stack.append((t, True))
            for p in t._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        nodes = [Node(t.op, t._parents, t) for t in order]
        return cls(nodes, leaves)


def backward(loss: Tensor, leaves=None, graph: Graph | None = None):
    """Populate ``.grad`` on every differentiable leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers. Leaves listed in
    ``leaves`` that the loss does not depend on receive a zero gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if leaves is not None:
        for leaf in leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
    if not loss.requires_grad:
        return
    graph = graph or Graph.trace(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        out = node.output
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = out._backward(g)
        for p, pg in zip(node.inputs, in_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for leaf in graph.leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        g = np.asarray(g, dtype=leaf.data.dtype)
        if leaf.grad is None:
            leaf.grad = g.copy()
        else:
            leaf.grad = leaf.grad + g


# ---- elementwise ---------------------------------------------------------


def add(a, b):
    a = _wrap(a)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a = _wrap(a)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a = _wrap(a)
    b = _wrap(b, a)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def div(a, b):
    a = _wrap(a)
    b = _wrap(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape))

    return _make(out, (a, b), bw, "div")


def power(a, p: float):
    a = _wrap(a)
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a):
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid_np(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a):
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid_np(x),), "softplus")


def relu(a):
    x = a.data
    return _make(np.maximum(x, 0), (a,), lambda g: (g * (x > 0),), "relu")


def gelu(a):
    """GELU, tanh approximation with cubic coefficient ``GELU_COEF``."""
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + GELU_COEF * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bw, "gelu")


def clip(a, lo, hi):
    x = a.data
    keep = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * keep,), "clip")


# ---- reductions and shape ops ------------------------------------------


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx):
    shape, dt = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dt)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw, "getitem")


def take(a, indices, axis):
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    indices = np.asarray(indices, dtype=np.intp)
    shape, dt = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dt)
        gm = np.moveaxis(g, axis, 0)
        om = np.moveaxis(out, axis, 0)
        np.add.at(om, indices, gm)
        return (out,)

    return _make(np.take(a.data, indices, axis=axis), (a,), bw, "take")


def pad_edge(a, pads):
    """Replicate-pad; ``pads`` is a sequence of (before, after) per axis."""
    out = a
    for axis, (lo, hi) in enumerate(pads):
        if lo == 0 and hi == 0:
            continue
        n = a.shape[axis]
        idx = np.clip(np.arange(-lo, n + hi), 0, n - 1)
        out = take(out, idx, axis)
    return out


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors, axis=0):
    tensors = list(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def flip(a, axis):
    return _make(np.flip(a.data, axis).copy(), (a,),
                 lambda g: (np.flip(g, axis).copy(),), "flip")


def cumsum(a, axis):
    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis).copy(),)

    return _make(np.cumsum(a.data, axis=axis), (a,), bw, "cumsum")


# ---- linear algebra ------------------------------------------------------


def matmul(a, b):
    a = _wrap(a)
    b = _wrap(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return _make(ad @ bd, (a, b), bw, "matmul")


def layernorm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ContractError("layernorm over an empty axis")
    if eps <= 0:
        raise ContractError("layernorm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        dxhat = g * gd
        dx = inv / d * (d * dxhat - dxhat.sum(-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw, "layernorm")


def softmax(x, axis=-1):
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


# ---- sampling and convolution -------------------------------------------


def trilinear_sample(vol, coords):
    """Sample ``vol[D,H,W]`` at continuous ``coords[n,3]`` given as (z, y, x).

    Coordinates outside ``[0, extent-1]`` are clamped to the box; the
    gradient with respect to a clamped coordinate component is zero.
    """
    if vol.ndim != 3 or min(vol.shape, default=0) == 0:
        raise DimensionError(f"trilinear_sample needs a non-empty 3D volume, got {vol.shape}")
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise DimensionError(f"coords must be [n, 3], got {coords.shape}")
    v = vol.data
    c = coords.data
    ext = np.asarray(v.shape, dtype=c.dtype)
    cc = np.clip(c, 0, ext - 1)
    inside = (c >= 0) & (c <= ext - 1)
    i0 = np.floor(cc).astype(np.intp)
    i0 = np.minimum(i0, np.maximum(np.asarray(v.shape) - 2, 0))
    f = cc - i0
    i1 = np.minimum(i0 + 1, np.asarray(v.shape) - 1)
    f = np.where(i1 == i0, 0.0, f).astype(c.dtype)

    z = (i0[:, 0], i1[:, 0])
    y = (i0[:, 1], i1[:, 1])
    xx = (i0[:, 2], i1[:, 2])
    wz = (1 - f[:, 0], f[:, 0])
    wy = (1 - f[:, 1], f[:, 1])
    wx = (1 - f[:, 2], f[:, 2])
    corner = {}
    wyx = {(b, d): wy[b] * wx[d] for b in (0, 1) for d in (0, 1)}
    out = np.zeros(c.shape[0], dtype=v.dtype)
    for a in (0, 1):
        for b in (0, 1):
            for d in (0, 1):
                corner[a, b, d] = v[z[a], y[b], xx[d]]
        # grouped so that exchanging the y and x roles is bit-for-bit symmetric
        diag = wyx[0, 0] * corner[a, 0, 0] + wyx[1, 1] * corner[a, 1, 1]
        anti = wyx[0, 1] * corner[a, 0, 1] + wyx[1, 0] * corner[a, 1, 0]
        out += wz[a] * (diag + anti)

    H, W = v.shape[1], v.shape[2]

    def bw(g):
        gvol = np.zeros(v.size, dtype=v.dtype)
        for a in (0, 1):
            for b in (0, 1):
                for d in (0, 1):
                    flat = (z[a] * H + y[b]) * W + xx[d]
                    gvol += np.bincount(flat, weights=g * wz[a] * wyx[b, d],
                                        minlength=v.size).astype(v.dtype)
        dz = dy = dx = 0.0
        for a in (0, 1):
            for b in (0, 1):
                for d in (0, 1):
                    val = corner[a, b, d]
                    sz = 1 if a else -1
                    sy = 1 if b else -1
                    sx = 1 if d else -1
                    dz = dz + sz * wy[b] * wx[d] * val
                    dy = dy + sy * wz[a] * wx[d] * val
                    dx = dx + sx * wz[a] * wy[b] * val
        gc = np.stack([dz, dy, dx], axis=1) * g[:, None] * inside
        gc = np.where(i1 == i0, 0.0, gc)
        return gvol.reshape(v.shape), gc.astype(c.dtype)

    return _make(out, (vol, coords), bw, "trilinear_sample")


def conv2d(x, w, b=None):
    """Stride-1, zero-padded ("same") 2D convolution of ``x[C,H,W]`` by ``w[O,C,k,k]``."""
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d shapes incompatible: x {x.shape}, w {w.shape}")
    k = w.shape[2]
    if k % 2 == 0 or w.shape[3] != k:
        raise DimensionError("conv2d needs a square odd kernel")
    C, H, W = x.shape
    O = w.shape[0]
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p)))
    cols = np.empty((C, k, k, H, W), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i:i + H, j:j + W]
    cols = cols.reshape(C * k * k, H * W)
    wm = w.data.reshape(O, -1)
    out = (wm @ cols).reshape(O, H, W)
    parents = (x, w)
    if b is not None:
        out = out + b.data[:, None, None]
        parents = (x, w, b)

    def bw(g):
        gm = g.reshape(O, H * W)
        gw = (gm @ cols.T).reshape(w.shape)
        gcols = (wm.T @ gm).reshape(C, k, k, H, W)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + H, j:j + W] += gcols[:, i, j]
        gx = gxp[:, p:p + H, p:p + W]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2))

    return _make(out, parents, bw, "conv2d")


def upsample_nearest(x, factor: int):
    """Nearest-neighbour upsampling of ``x[C,H,W]`` by an integer factor."""
    C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def bw(g):
        return (g.reshape(C, H, factor, W, factor).sum(axis=(2, 4)),)

    return _make(out, (x,), bw, "upsample_nearest")
