"""Dense arrays with a reverse-mode gradient tape.

Values are plain ``numpy.ndarray`` objects (row-major). A :class:`TapeVar`
wraps one value and records the operation that produced it so that
:func:`backward` can propagate gradients to every antecedent variable.

Broadcasting is deliberately narrow: elementwise binary ops accept equal
shapes or a size-1 operand, and per-channel broadcasting goes through the
explicit :func:`add_bias` and :func:`channel_mul` ops.
"""

from __future__ import annotations

import hashlib
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from diffgan.errors import ArgumentError, DimensionError, NumericError

Tensor = np.ndarray

_MASK64 = (1 << 64) - 1
_local = threading.local()


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (per thread)."""
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class TapeVar:
    """A value on the gradient tape.

    Leaves created with ``requires_grad=True`` are trainable parameters;
    everything else built from them by the ops below records its parents and
    a backward rule. Gradients accumulate across :func:`backward` calls until
    :meth:`zero_grad` is called.
    """

    __slots__ = ("value", "_grad", "parents", "rule", "_backward", "requires_grad")

    def __init__(self, value, requires_grad: bool = False, parents: tuple = (),
                 rule: str = "leaf", backward: Callable | None = None):
        self.value = np.asarray(value)
        self._grad = None
        self.parents = parents
        self.rule = rule
        self._backward = backward
        self.requires_grad = requires_grad

    @property
    def grad(self) -> Tensor:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = g

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self._grad = None

    def detach(self) -> "TapeVar":
        return TapeVar(self.value)

    def __repr__(self):
        return f"TapeVar(shape={self.shape}, rule={self.rule!r})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, like: TapeVar) -> TapeVar:
    if isinstance(x, TapeVar):
        return x
    return TapeVar(np.asarray(x, dtype=like.value.dtype))


def constant(x, dtype=None) -> TapeVar:
    return TapeVar(np.asarray(x, dtype=dtype))


def param(x, dtype=None) -> TapeVar:
    return TapeVar(np.array(x, dtype=dtype), requires_grad=True)


def _node(value, parents: Sequence[TapeVar], rule: str, backward) -> TapeVar:
    if grad_enabled() and any(p.requires_grad for p in parents):
        # parents that are constants now stay constants, even if unfrozen later
        parents = tuple(p if p.requires_grad else TapeVar(p.value) for p in parents)
        return TapeVar(value, True, parents, rule, backward)
    return TapeVar(value)


def _reduce_to(g: Tensor, shape: tuple) -> Tensor:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _check_binary(a: TapeVar, b: TapeVar, name: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not agree")


# ---------------------------------------------------------------- elementwise

def add(a: TapeVar, b: TapeVar) -> TapeVar:
    _check_binary(a, b, "add")

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _node(a.value + b.value, (a, b), "add", bw)


def sub(a: TapeVar, b: TapeVar) -> TapeVar:
    _check_binary(a, b, "sub")

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _node(a.value - b.value, (a, b), "sub", bw)


def mul(a: TapeVar, b: TapeVar) -> TapeVar:
    _check_binary(a, b, "mul")

    def bw(g):
        ga = _reduce_to(g * b.value, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.value * b.value, (a, b), "mul", bw)


def scale(a: TapeVar, c: float) -> TapeVar:
    c = float(c)
    return _node(a.value * a.value.dtype.type(c), (a,), "scale",
                 lambda g: (g * g.dtype.type(c),))


def square(a: TapeVar) -> TapeVar:
    return _node(a.value * a.value, (a,), "square", lambda g: (2 * g * a.value,))


def power(a: TapeVar, p: float) -> TapeVar:
    """Elementwise ``a**p``; the caller keeps ``a`` positive for fractional p."""
    out = a.value ** p
    return _node(out, (a,), "power", lambda g: (g * p * a.value ** (p - 1),))


def sqrt(a: TapeVar) -> TapeVar:
    out = np.sqrt(a.value)
    return _node(out, (a,), "sqrt", lambda g: (g * 0.5 / out,))


def exp(a: TapeVar) -> TapeVar:
    out = np.exp(a.value)
    return _node(out, (a,), "exp", lambda g: (g * out,))


def log(a: TapeVar) -> TapeVar:
    return _node(np.log(a.value), (a,), "log", lambda g: (g / a.value,))


def tanh(a: TapeVar) -> TapeVar:
    out = np.tanh(a.value)
    return _node(out, (a,), "tanh", lambda g: (g * (1 - out * out),))


def _sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: TapeVar) -> TapeVar:
    out = _sigmoid(a.value)
    return _node(out, (a,), "sigmoid", lambda g: (g * out * (1 - out),))


def leaky_relu(a: TapeVar, slope: float = 0.2) -> TapeVar:
    x = a.value
    factor = np.where(x > 0, 1.0, slope).astype(x.dtype)
    return _node(x * factor, (a,), "leaky_relu", lambda g: (g * factor,))


def softplus(a: TapeVar) -> TapeVar:
    x = a.value
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _node(out, (a,), "softplus", lambda g: (g * _sigmoid(x),))


# ---------------------------------------------------------------- reductions

def sum(a: TapeVar) -> TapeVar:  # noqa: A001 - mirrors numpy naming
    return _node(np.asarray(a.value.sum()), (a,), "sum",
                 lambda g: (np.broadcast_to(g, a.shape).copy(),))


def reduce_mean(a: TapeVar) -> TapeVar:
    if a.size == 0:
        raise ArgumentError("reduce_mean of an empty tensor")
    n = a.size
    return _node(np.asarray(a.value.mean()), (a,), "reduce_mean",
                 lambda g: (np.full(a.shape, g / n, dtype=a.value.dtype),))


def sum_axis(a: TapeVar, axis: int | tuple, keepdims: bool = False) -> TapeVar:
    out = a.value.sum(axis=axis, keepdims=keepdims)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % a.value.ndim for ax in axes)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), "sum_axis", bw)


def mean_axis(a: TapeVar, axis: int | tuple, keepdims: bool = False) -> TapeVar:
    axes = axis if isinstance(axis, tuple) else (axis,)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_axis(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape ops

def reshape(a: TapeVar, shape) -> TapeVar:
    shape = tuple(shape)
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _node(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: TapeVar) -> TapeVar:
    if a.value.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.shape}")
    return _node(a.value.T.copy(), (a,), "transpose", lambda g: (g.T.copy(),))


def concat(xs: Sequence[TapeVar], axis: int = 0) -> TapeVar:
    if not xs:
        raise ArgumentError("concat of an empty list")
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(
            f"concat: shapes {[x.shape for x in xs]} along axis {axis}") from exc
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def bw(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(xs)))

    return _node(out, tuple(xs), "concat", bw)


def upsample2x(a: TapeVar) -> TapeVar:
    """Nearest-neighbour 2x upsampling of an NCHW tensor."""
    if a.value.ndim != 4:
        raise DimensionError(f"upsample2x expects NCHW, got {a.shape}")
    n, c, h, w = a.shape
    out = np.repeat(np.repeat(a.value, 2, axis=2), 2, axis=3)
    return _node(out, (a,), "upsample2x",
                 lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


# ---------------------------------------------------------------- linear algebra

def matmul(a: TapeVar, b: TapeVar) -> TapeVar:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def bw(g):
        ga = g @ b.value.T if a.requires_grad else None
        gb = a.value.T @ g if b.requires_grad else None
        return ga, gb

    return _node(a.value @ b.value, (a, b), "matmul", bw)


def _per_channel_view(v: Tensor, ndim: int, per_sample: bool) -> Tensor:
    if per_sample:
        return v.reshape(v.shape + (1,) * (ndim - 2))
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def add_bias(x: TapeVar, b: TapeVar) -> TapeVar:
    """Add a per-channel bias ``b[C]`` to ``x[N, C, ...]``."""
    if b.value.ndim != 1 or x.value.ndim < 2 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match input {x.shape}")
    axes = (0,) + tuple(range(2, x.value.ndim))
    bv = _per_channel_view(b.value, x.value.ndim, False)
    return _node(x.value + bv, (x, b), "add_bias", lambda g: (g, g.sum(axis=axes)))


def channel_mul(x: TapeVar, s: TapeVar) -> TapeVar:
    """Scale ``x[N, C, ...]`` by ``s[C]`` or per-sample ``s[N, C]``."""
    nd = x.value.ndim
    per_sample = s.value.ndim == 2
    ok = (nd >= 2 and s.shape[-1] == x.shape[1]
          and (s.value.ndim == 1 or (per_sample and s.shape[0] == x.shape[0])))
    if not ok:
        raise DimensionError(f"channel_mul: scale {s.shape} does not match input {x.shape}")
    sv = _per_channel_view(s.value, nd, per_sample)

    def bw(g):
        gx = g * sv if x.requires_grad else None
        gs = None
        if s.requires_grad:
            prod = g * x.value
            axes = tuple(range(2, nd)) if per_sample else (0,) + tuple(range(2, nd))
            gs = prod.sum(axis=axes) if axes else prod
        return gx, gs

    return _node(x.value * sv, (x, s), "channel_mul", bw)


def conv2d(x: TapeVar, k: TapeVar, stride: int = 1, pad: int = 0) -> TapeVar:
    """2-D cross-correlation of ``x[N,C,H,W]`` with ``k[O,C,kh,kw]``."""
    if x.value.ndim != 4 or k.value.ndim != 4 or x.shape[1] != k.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} and kernel {k.shape} are incompatible")
    if stride < 1 or pad < 0:
        raise ArgumentError(f"conv2d: stride={stride}, pad={pad}")
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise DimensionError(
            f"conv2d: kernel {k.shape} larger than padded input {x.shape} (pad={pad})")
    out, cols = _conv_forward(x.value, k.value, stride, pad)

    def bw(g):
        gx = gk = None
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        if k.requires_grad:
            gk = (g2 @ cols.T).reshape(k.shape)
        if x.requires_grad:
            dcols = k.value.reshape(o, -1).T @ g2
            gx = _col2im(dcols, x.shape, kh, kw, stride, pad)
        return gx, gk

    return _node(out, (x, k), "conv2d", bw)


def _conv_forward(x: Tensor, k: Tensor, stride: int, pad: int):
    n = x.shape[0]
    o, c, kh, kw = k.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    out = (k.reshape(o, -1) @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def _im2col(x: Tensor, kh: int, kw: int, stride: int, pad: int):
    # rows ordered (c, i, j) to match k.reshape(O, -1); columns ordered (n, y, x)
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    return cols, ho, wo


def _col2im(dcols: Tensor, shape: tuple, kh: int, kw: int, stride: int, pad: int) -> Tensor:
    n, c, h, w = shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    d = dcols.reshape(c, kh, kw, n, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                d[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        xp = xp[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(xp)


def conv2d_value(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Tape-free convolution used by the feature extractor."""
    return _conv_forward(x, k, stride, pad)[0]


# ---------------------------------------------------------------- network helpers

def minibatch_stddev(x: TapeVar, group: int, eps: float = 1e-8) -> TapeVar:
    """Append one channel holding the group-wise feature standard deviation.

    Samples ``n`` and ``n + M`` (``M = N / group``) share a group. The value
    is ``sqrt(var + eps) - sqrt(eps)`` averaged over features, so a group of
    identical samples yields exactly zero.
    """
    n, c, h, w = x.shape
    g = min(group, n)
    while n % g:
        g -= 1
    m = n // g
    xv = x.value.reshape(g, m, c, h, w)
    dev = xv - xv.mean(axis=0)
    var = (dev * dev).mean(axis=0)
    root = np.sqrt(var + eps)
    stat = (root - np.sqrt(eps)).mean(axis=(1, 2, 3))
    chan = np.broadcast_to(np.tile(stat, g).reshape(n, 1, 1, 1), (n, 1, h, w))
    out = np.concatenate([x.value, chan.astype(x.value.dtype)], axis=1)
    feat = c * h * w

    def bw(gout):
        gx = gout[:, :c].copy()
        gs = gout[:, c].sum(axis=(1, 2)).reshape(g, m).sum(axis=0)
        coef = gs.reshape(1, m, 1, 1, 1) / (feat * g * root[None])
        gx += (coef * dev).reshape(n, c, h, w).astype(gx.dtype)
        return (gx,)

    return _node(out, (x,), "minibatch_stddev", bw)


# ---------------------------------------------------------------- backprop

def _topo_order(root: TapeVar) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: TapeVar) -> None:
    """Accumulate ``d root / d v`` into ``v.grad`` for every reachable ``v``.

    Repeated calls without :meth:`TapeVar.zero_grad` add up.
    """
    if root.size != 1:
        raise ArgumentError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node._grad is None else node._grad + g
            continue
        node.grad = g if node._grad is None else node._grad + g
        for p, pg in zip(node.parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg


def grad_check(f: Callable[[TapeVar], TapeVar], x: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    Error per coordinate is ``|ad - fd| / max(1, |fd|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ArgumentError(f"grad_check: eps={eps} outside [1e-7, 1e-3]")
    x = np.array(x, dtype=np.float64)
    xv = TapeVar(x.copy(), requires_grad=True)
    out = f(xv)
    if not np.all(np.isfinite(out.value)):
        raise NumericError("grad_check: non-finite function value")
    backward(out)
    ad = xv.grad.reshape(-1)
    fd = np.empty(x.size)
    flat = x.reshape(-1)
    for i in range(x.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += eps
        xm[i] -= eps
        fp = float(f(TapeVar(xp.reshape(x.shape))).value)
        fm = float(f(TapeVar(xm.reshape(x.shape))).value)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"grad_check: non-finite value at coordinate {i}")
        fd[i] = (fp - fm) / (2 * eps)
    return float(np.max(np.abs(ad - fd) / np.maximum(1.0, np.abs(fd))))


# ---------------------------------------------------------------- randomness

def stream_id(tag: str, *index: int) -> int:
    """Stable 64-bit stream identifier for a purpose tag and indices."""
    key = ":".join([tag, *map(str, index)]).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


class Rng:
    """Counter-based generator keyed by ``(seed, stream_id)``.

    Backed by Philox-4x64 with the pair as its 128-bit key, so the output
    sequence depends on nothing but the pair.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream) & _MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, tag: str, *index: int) -> "Rng":
        return Rng(self.seed, stream_id(tag, self.stream_id, *index))

    def normal(self, shape, dtype=np.float64) -> Tensor:
        return self.gen.standard_normal(shape, dtype=dtype)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        return self.gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, n: int, size: int, p=None):
        return self.gen.choice(n, size=size, p=p)


def randn(rng: Rng, shape, dtype=np.float64) -> Tensor:
    """Standard normal draws (numpy's ziggurat transform over Philox)."""
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    if int(np.prod(shape)) <= 0:
        raise ArgumentError(f"randn: empty shape {shape}")
    return rng.normal(shape, dtype=dtype)
