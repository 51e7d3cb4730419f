"""Minimal n-d array with reverse-mode automatic differentiation.

Every op returns a fresh :class:`Tensor`.  When gradient recording is on and
at least one input is tracked, the op appends a node to the thread's active
:class:`Tape`; :func:`backward` walks that tape once in reverse and then
discards it.

Storage is float32.  Inside :func:`double_precision` every op computes in
float64 instead, which is what :func:`grad_check` uses for sharp finite
differences.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError, UsageError

__all__ = [
    "Tensor", "Tape", "tensor", "backward", "grad_check", "no_grad",
    "double_precision", "get_dtype", "set_debug", "fresh_tape",
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "exp", "log",
    "sqrt", "sin", "cos", "tanh", "silu", "gelu", "square", "sum", "mean",
    "reshape", "transpose", "swapaxes", "concat", "softmax", "log_softmax",
    "layer_norm", "group_norm", "conv2d", "cross_entropy", "getitem",
]


class _State(threading.local):
    def __init__(self) -> None:
        self.dtype = np.float32
        self.grad_enabled = True
        self.debug = False
        self.tape = Tape()


class Node:
    __slots__ = ("op", "parents", "backward", "index", "tape")

    def __init__(self, op, parents, backward, index, tape):
        self.op = op
        self.parents = parents
        self.backward = backward
        self.index = index
        self.tape = tape

    def __repr__(self) -> str:
        return f"Node({self.op}, #{self.index})"


class Tape:
    """Ordered record of differentiable ops; consumed by one backward pass."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def record(self, op: str, parents: tuple, backward: Callable) -> Node:
        node = Node(op, parents, backward, len(self.nodes), self)
        self.nodes.append(node)
        return node

    def __len__(self) -> int:
        return len(self.nodes)

    def release(self) -> None:
        # Node.tape points back here; dropping the list and closures breaks the
        # cycle so activations are freed by refcount rather than by the cyclic GC
        for n in self.nodes:
            n.backward = None
            n.parents = ()
        self.nodes = []


_state = _State()


def get_dtype():
    return _state.dtype


def set_debug(flag: bool) -> None:
    """Check every forward result for NaN/Inf (slow; for debugging)."""
    _state.debug = bool(flag)


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def double_precision():
    """Evaluate ops in float64.  Meant for gradient checking only."""
    prev = _state.dtype
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def fresh_tape():
    """Run the block on its own tape, restoring the caller's tape afterwards."""
    prev = _state.tape
    _state.tape = Tape()
    try:
        yield _state.tape
    finally:
        _state.tape.release()
        _state.tape = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape_id", "__weakref__")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_state.dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_id: Node | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ------------------------------------------------
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)
    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)
    def swapaxes(self, a, b): return swapaxes(self, a, b)


def _not_scalar(t: Tensor):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------

def _tracked(t) -> bool:
    if not isinstance(t, Tensor) or not t.requires_grad:
        return False
    return t.tape_id is None or t.tape_id.tape is _state.tape


def _arr(x) -> np.ndarray:
    a = x.data if isinstance(x, Tensor) else np.asarray(x)
    dt = _state.dtype
    return a if a.dtype == dt else a.astype(dt)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: tuple, bw: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.tape_id = None
    if _state.debug and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from {op}")
    if _state.grad_enabled and any(_tracked(p) for p in parents):
        out.requires_grad = True
        out.tape_id = _state.tape.record(op, parents, bw)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict:
    """Reverse sweep from a scalar ``loss``; returns ``{leaf: gradient}``.

    With ``wrt`` given, only those leaves are reported and no ``.grad``
    attribute is touched.  Otherwise every tracked leaf accumulates into its
    ``.grad``.  The tape is consumed either way.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise UsageError(f"backward() needs a scalar loss, got {shape}")
    node = loss.tape_id
    tape = _state.tape
    if node is None or node.tape is not tape:
        raise UsageError("loss is not on the active tape (detached or already consumed)")
    targets = None if wrt is None else {id(t) for t in wrt}

    pending: dict[int, np.ndarray] = {node.index: np.ones_like(loss.data)}
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    nodes = tape.nodes
    for i in range(node.index, -1, -1):
        g = pending.pop(i, None)
        if g is None:
            continue
        n = nodes[i]
        need = tuple(_tracked(p) for p in n.parents)
        pgrads = n.backward(g, need)
        for p, pg, nd in zip(n.parents, pgrads, need):
            if not nd or pg is None:
                continue
            pg = _unbroadcast(pg, p.data.shape)
            if p.tape_id is not None:
                j = p.tape_id.index
                pending[j] = pending[j] + pg if j in pending else pg
            elif id(p) in leaves:
                leaves[id(p)] = (p, leaves[id(p)][1] + pg)
            else:
                leaves[id(p)] = (p, pg)
    _state.tape = Tape()
    tape.release()

    result = {}
    for key, (leaf, g) in leaves.items():
        if targets is not None:
            if key in targets:
                result[leaf] = g
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = leaf.grad
    return result


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Largest analytic-vs-central-difference discrepancy, relative to the
    largest gradient magnitude, computed in float64.

    ``max_coords`` limits the finite-difference sweep to a random subset of
    coordinates for large inputs.
    """
    with double_precision(), fresh_tape():
        x64 = Tensor(np.array(x.data, dtype=np.float64), requires_grad=True)
        out = f(x64)
        grads = backward(out, wrt=[x64])
        analytic = grads.get(x64, np.zeros_like(x64.data)).reshape(-1)

        base = x64.data.reshape(-1)
        coords = np.arange(base.size)
        if max_coords is not None and max_coords < base.size:
            coords = np.sort(np.random.default_rng(seed).choice(base.size, max_coords, replace=False))
        numeric = np.empty(coords.size)
        with no_grad():
            for k, i in enumerate(coords):
                xp = base.copy()
                xp[i] += eps
                fp = f(Tensor(xp.reshape(x64.shape))).item()
                xp[i] -= 2 * eps
                fm = f(Tensor(xp.reshape(x64.shape))).item()
                numeric[k] = (fp - fm) / (2 * eps)
    a = analytic[coords]
    scale_ = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale_ == 0.0:
        return 0.0
    return float(np.abs(a - numeric).max() / scale_)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    x, y = _arr(a), _arr(b)
    _broadcast_shape(x, y, "add")
    return _make("add", x + y, (a, b), lambda g, need: (g, g))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    x, y = _arr(a), _arr(b)
    _broadcast_shape(x, y, "sub")
    return _make("sub", x - y, (a, b), lambda g, need: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    x, y = _arr(a), _arr(b)
    _broadcast_shape(x, y, "mul")
    return _make("mul", x * y, (a, b),
                 lambda g, need: (g * y if need[0] else None, g * x if need[1] else None))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    x, y = _arr(a), _arr(b)
    _broadcast_shape(x, y, "div")
    out = x / y
    return _make("div", out, (a, b),
                 lambda g, need: (g / y if need[0] else None,
                                  -g * out / y if need[1] else None))


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make("neg", -_arr(a), (a,), lambda g, need: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    a = _wrap(a)
    c = _state.dtype(c)
    return _make("scale", _arr(a) * c, (a,), lambda g, need: (g * c,))


def square(a) -> Tensor:
    a = _wrap(a)
    x = _arr(a)
    return _make("square", x * x, (a,), lambda g, need: (2 * x * g,))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(_arr(a))
    return _make("exp", out, (a,), lambda g, need: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    x = _arr(a)
    return _make("log", np.log(x), (a,), lambda g, need: (g / x,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(_arr(a))
    return _make("sqrt", out, (a,), lambda g, need: (g * 0.5 / out,))


def sin(a) -> Tensor:
    a = _wrap(a)
    x = _arr(a)
    return _make("sin", np.sin(x), (a,), lambda g, need: (g * np.cos(x),))


def cos(a) -> Tensor:
    a = _wrap(a)
    x = _arr(a)
    return _make("cos", np.cos(x), (a,), lambda g, need: (-g * np.sin(x),))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(_arr(a))
    return _make("tanh", out, (a,), lambda g, need: (g * (1 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a) -> Tensor:
    a = _wrap(a)
    x = _arr(a)
    s = _sigmoid(x)
    return _make("silu", x * s, (a,), lambda g, need: (g * s * (1 + x * (1 - s)),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = _wrap(a)
    x = _arr(a)
    x2 = x * x
    inner = _GELU_C * x * (1 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * x * (1 + th)

    def bw(g, need):
        d = 0.5 * (1 + th) + 0.5 * x * (1 - th * th) * _GELU_C * (1 + 3 * 0.044715 * x2)
        return (g * d,)

    return _make("gelu", out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _wrap(a)
    x = _arr(a)
    axes = _norm_axes(axis, x.ndim)
    out = x.sum(axis=axes, keepdims=keepdims)

    def bw(g, need):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _make("sum", np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    x = _arr(a)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[i] for i in axes])) if axes else 1
    out = x.mean(axis=axes, keepdims=keepdims)

    def bw(g, need):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return _make("mean", np.asarray(out, dtype=x.dtype), (a,), bw)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    x = _arr(a)
    try:
        out = x.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g, need: (g.reshape(x.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    x = _arr(a)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", x.transpose(axes), (a,), lambda g, need: (g.transpose(inv),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _wrap(a)
    x = _arr(a)
    return _make("swapaxes", x.swapaxes(ax1, ax2), (a,), lambda g, need: (g.swapaxes(ax1, ax2),))


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a, idx) -> Tensor:
    a = _wrap(a)
    x = _arr(a)
    fancy = _is_fancy(idx)

    def bw(g, need):
        z = np.zeros_like(x)
        if fancy:
            np.add.at(z, idx, g)
        else:
            z[idx] += g
        return (z,)

    return _make("getitem", np.array(x[idx]), (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_wrap(t) for t in tensors)
    arrays = [_arr(t) for t in ts]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[a.shape for a in arrays]}") from None
    splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def bw(g, need):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", out, ts, bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = _wrap(a), _wrap(b)
    x, y = _arr(a), _arr(b)
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise DimensionError(f"matmul: shapes {x.shape} and {y.shape} are not aligned")
    try:
        np.broadcast_shapes(x.shape[:-2], y.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {x.shape} and {y.shape} do not broadcast") from None

    def bw(g, need):
        ga = g @ np.swapaxes(y, -1, -2) if need[0] else None
        gb = np.swapaxes(x, -1, -2) @ g if need[1] else None
        return ga, gb

    return _make("matmul", x @ y, (a, b), bw)


# ---------------------------------------------------------------------------
# normalisation / softmax
# ---------------------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    x = _arr(a)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", out, (a,),
                 lambda g, need: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    x = _arr(a)
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    return _make("log_softmax", out, (a,),
                 lambda g, need: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits[N, C]``."""
    logits = _wrap(logits)
    x = _arr(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise DimensionError(f"cross_entropy: logits {x.shape} vs labels {labels.shape}")
    n = x.shape[0]
    shifted = x - x.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    out = np.asarray(-logp[rows, labels].mean(), dtype=x.dtype)

    def bw(g, need):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return (d * (g / n),)

    return _make("cross_entropy", out, (logits,), bw)


def _normalize_bw(g_hat, xhat, inv_std, axes):
    # gradient of xhat = (x - mean) * inv_std w.r.t. x, reduced over `axes`
    m1 = g_hat.mean(axis=axes, keepdims=True)
    m2 = (g_hat * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (g_hat - m1 - xhat * m2)


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis (biased variance), then ``* gamma + beta``."""
    x = _wrap(x)
    a = _arr(x)
    d = a.shape[-1]
    for p, nm in ((gamma, "gamma"), (beta, "beta")):
        if p is not None and tuple(_wrap(p).shape) != (d,):
            raise DimensionError(f"layer_norm: {nm} shape {_wrap(p).shape} != ({d},)")
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    parents = [x]
    out = xhat
    if gamma is not None:
        gamma = _wrap(gamma)
        gm = _arr(gamma)
        out = out * gm
        parents.append(gamma)
    if beta is not None:
        beta = _wrap(beta)
        out = out + _arr(beta)
        parents.append(beta)
    lead = tuple(range(a.ndim - 1))

    def bw(g, need):
        g_hat = g * gm if gamma is not None else g
        grads = [_normalize_bw(g_hat, xhat, inv_std, -1) if need[0] else None]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _make("layer_norm", out.astype(a.dtype, copy=False), tuple(parents), bw)


def group_norm(x, groups: int, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Group normalisation over ``[N, C, H, W]`` with per-channel affine."""
    x = _wrap(x)
    a = _arr(x)
    n, c = a.shape[:2]
    if c % groups:
        raise DimensionError(f"group_norm: {c} channels not divisible into {groups} groups")
    grouped = a.reshape(n, groups, -1)
    mu = grouped.mean(axis=-1, keepdims=True)
    xc = grouped - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv_std).reshape(a.shape)
    bshape = (1, c) + (1,) * (a.ndim - 2)
    parents = [x]
    out = xhat
    if gamma is not None:
        gamma = _wrap(gamma)
        gm = _arr(gamma).reshape(bshape)
        out = out * gm
        parents.append(gamma)
    if beta is not None:
        beta = _wrap(beta)
        out = out + _arr(beta).reshape(bshape)
        parents.append(beta)
    red = (0,) + tuple(range(2, a.ndim))

    def bw(g, need):
        g_hat = g * gm if gamma is not None else g
        grads = [None]
        if need[0]:
            gx = _normalize_bw(g_hat.reshape(n, groups, -1), xhat.reshape(n, groups, -1), inv_std, -1)
            grads[0] = gx.reshape(a.shape)
        if gamma is not None:
            grads.append((g * xhat).sum(axis=red))
        if beta is not None:
            grads.append(g.sum(axis=red))
        return tuple(grads)

    return _make("group_norm", out.astype(a.dtype, copy=False), tuple(parents), bw)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix ``[N*Ho*Wo, kh*kw*C]`` (kernel-row, kernel-col, channel order)."""
    n, c = xp.shape[:2]
    xn = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xn[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _conv_out_size(h: int, k: int, stride: int, pad: int) -> int:
    return (h + 2 * pad - k) // stride + 1


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation, ``x[N,C,H,W] * w[O,C,kh,kw]``."""
    x, w = _wrap(x), _wrap(w)
    xa, wa = _arr(x), _arr(w)
    if xa.ndim != 4 or wa.ndim != 4 or xa.shape[1] != wa.shape[1]:
        raise DimensionError(f"conv2d: input {xa.shape} incompatible with kernel {wa.shape}")
    n, c, h, wd = xa.shape
    o, _, kh, kw = wa.shape
    ho = _conv_out_size(h, kh, stride, pad)
    wo = _conv_out_size(wd, kw, stride, pad)
    if ho <= 0 or wo <= 0 or kh > h + 2 * pad or kw > wd + 2 * pad:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} with pad {pad} does not fit input {h}x{wd}")
    xp = np.pad(xa, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xa
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = wa.transpose(0, 2, 3, 1).reshape(o, -1)
    out = cols @ w2.T
    parents = [x, w]
    if b is not None:
        b = _wrap(b)
        out = out + _arr(b)
        parents.append(b)
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def bw(g, need):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = None
        if need[0] and stride == 1 and pad <= kh - 1 and pad <= kw - 1:
            # input gradient of a stride-1 conv is a full conv with the flipped kernel
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1 - pad, kh - 1 - pad), (kw - 1 - pad, kw - 1 - pad)))
            wf = wa[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, -1)
            gx = (_im2col(gp, kh, kw, 1, h, wd) @ wf.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
        elif need[0]:
            dcols = (g2 @ w2).reshape(n, ho, wo, kh, kw, c)
            dxp = np.zeros((n, xp.shape[2], xp.shape[3], c), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
            dxp = dxp.transpose(0, 3, 1, 2)
            gx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        gw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2) if need[1] else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make("conv2d", out, tuple(parents), bw)
