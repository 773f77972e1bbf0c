"""Dense-tensor engine with reverse-mode automatic differentiation.

A `Tensor` wraps a numpy array and, when it is produced by an operation,
remembers its parents and a backward rule. Creation order doubles as a
topological order (an op's inputs necessarily exist before the op), so
`backward()` sorts the reachable subgraph by node id and walks it once in
reverse, summing gradient contributions at fan-out points.

Ops are functional: no op mutates an input array, and every stochastic or
learned quantity enters as a leaf tensor. The engine is precision-agnostic;
dtype is whatever the leaves carry (float64 for oracles and gradient
checks, float32 for training loops).
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.special import erf as _erf

from .errors import ConfigError, DegenerateInputError, ShapeError

__all__ = [
    "Tensor",
    "set_debug_checks",
    "add", "mul", "matmul", "reshape", "transpose", "concat", "broadcast_to",
    "index_select", "slice_axis", "tsum", "tmean", "exp", "log", "sqrt",
    "gelu", "softmax", "layer_norm", "linear", "multi_head_attention",
    "mse", "cosine_similarity",
]

_node_ids = itertools.count()
_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """When on, every op asserts its output is finite (tests use this)."""
    global _debug_checks
    _debug_checks = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward_fn", "node_id")

    # keep numpy from absorbing us into object arrays; reflected operators
    # (e.g. np.float64 + Tensor) then dispatch to our __radd__ and friends
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self.node_id = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, cut off from the graph (stop-gradient)."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed=None) -> None:
        """Reverse-mode sweep from this node; accumulates into `.grad`."""
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without a seed needs a scalar output, got shape {self.data.shape}"
                )
            seed = np.ones_like(self.data)
        if not self.requires_grad:
            return
        nodes = []
        visited = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in visited:
                continue
            visited.add(id(node))
            nodes.append(node)
            for p in node.parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append(p)
        nodes.sort(key=lambda n: n.node_id)
        self.grad = np.asarray(seed, dtype=self.data.dtype).reshape(self.data.shape)
        for node in reversed(nodes):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # operator sugar -------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values out of op {op!r}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out.op = op
    if out.requires_grad:
        out.parents = parents
        out._backward_fn = backward_fn
    else:
        out.parents = ()
        out._backward_fn = None
    out.node_id = next(_node_ids)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _unbroadcast(np.asarray(g), t.data.shape)
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=False)
    else:
        t.grad = t.grad + g


# elementwise arithmetic ---------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, g)
        _accum(b, g)
    return _make(a.data + b.data, "add", (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, g)
        _accum(b, -g)
    return _make(a.data - b.data, "sub", (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    return _make(a.data * b.data, "mul", (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))
    return _make(a.data / b.data, "div", (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, -g)
    return _make(-a.data, "neg", (a,), bwd)


def power(a: Tensor, p) -> Tensor:
    p = float(p)

    def bwd(g):
        _accum(a, g * p * a.data ** (p - 1.0))
    return _make(a.data ** p, "pow", (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out_data)
    return _make(out_data, "exp", (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, g / a.data)
    return _make(np.log(a.data), "log", (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bwd(g):
        _accum(a, g * 0.5 / out_data)
    return _make(out_data, "sqrt", (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    inv_sqrt2pi = 1.0 / math.sqrt(2.0 * math.pi)
    cdf = 0.5 * (1.0 + _erf(a.data * inv_sqrt2))

    def bwd(g):
        pdf = np.exp(-0.5 * a.data * a.data) * inv_sqrt2pi
        _accum(a, g * (cdf + a.data * pdf))
    return _make(a.data * cdf, "gelu", (a,), bwd)


# structural ops -----------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))
    return _make(a.data.reshape(shape), "reshape", (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        _accum(a, g.transpose(inverse))
    return _make(a.data.transpose(axes), "transpose", (a,), bwd)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(g):
        _accum(a, g)
    return _make(np.broadcast_to(a.data, shape).copy(), "broadcast_to", (a,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])
    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, bwd)


def index_select(a: Tensor, idx, axis: int) -> Tensor:
    """Gather along `axis`; backward scatter-adds (repeats accumulate)."""
    idx = np.asarray(idx, dtype=np.intp)

    def bwd(g):
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        _accum(a, ga)
    return _make(np.take(a.data, idx, axis=axis), "index_select", (a,), bwd)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sel = [slice(None)] * a.data.ndim
    sel[axis] = slice(start, stop)
    sel = tuple(sel)

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[sel] = g
        _accum(a, ga)
    return _make(a.data[sel].copy(), "slice_axis", (a,), bwd)


# reductions ---------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))
    return _make(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis] if isinstance(axis, int) else int(np.prod([a.data.shape[i] for i in axis]))

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / count, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / count, a.data.shape))
    return _make(a.data.mean(axis=axis, keepdims=keepdims), "mean", (a,), bwd)


# linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim == 0 or b.data.ndim == 0:
        raise ShapeError("matmul needs at least 1-d operands")
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul shapes do not conform: {a.data.shape} vs {b.data.shape}")

    def bwd(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1:
            ad = ad[None, :]
        if bd.ndim == 1:
            bd = bd[:, None]
        gm = g
        if a.data.ndim == 1:
            gm = np.expand_dims(gm, -2)
        if b.data.ndim == 1:
            gm = np.expand_dims(gm, -1)
        ga = gm @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ gm
        if a.data.ndim == 1:
            ga = ga.reshape(ga.shape[:-2] + (ga.shape[-1],))
        if b.data.ndim == 1:
            gb = gb.reshape(gb.shape[:-1])
        _accum(a, ga)
        _accum(b, gb)
    return _make(a.data @ b.data, "matmul", (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b with b broadcast along the leading axes."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(
            f"linear: input last dim {x.data.shape} does not match weight {w.data.shape}"
        )
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"linear: bias {b.data.shape} does not match weight {w.data.shape}")
    return add(matmul(x, w), b)


# fused neural-net ops -----------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - dot))
    return _make(out_data, "softmax", (a,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1] if x.data.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm: empty last axis")
    if eps <= 0:
        raise ConfigError(f"layer_norm: eps must be positive, got {eps}")
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.data.shape} / beta {beta.data.shape} do not match last axis {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std

    def bwd(g):
        _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        _accum(beta, g.reshape(-1, d).sum(axis=0))
        gx = g * gamma.data
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv_std * (gx - m1 - xhat * m2))
    return _make(xhat * gamma.data + beta.data, "layer_norm", (x, gamma, beta), bwd)


def multi_head_attention(x: Tensor, wq: Tensor, bq: Tensor, wk: Tensor, bk: Tensor,
                         wv: Tensor, bv: Tensor, wo: Tensor, bo: Tensor,
                         num_heads: int) -> Tensor:
    """Standard scaled-dot-product attention over tokens, B x T x D in/out."""
    if x.data.ndim != 3:
        raise ShapeError(f"attention expects [B, T, D], got {x.data.shape}")
    bsz, t, d = x.data.shape
    if d % num_heads != 0:
        raise ConfigError(f"width {d} not divisible by {num_heads} heads")
    dh = d // num_heads

    def split_heads(h: Tensor) -> Tensor:
        return transpose(reshape(h, (bsz, t, num_heads, dh)), (0, 2, 1, 3))

    q = split_heads(linear(x, wq, bq))
    k = split_heads(linear(x, wk, bk))
    v = split_heads(linear(x, wv, bv))
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (bsz, t, d))
    return linear(merged, wo, bo)


# losses / similarity ------------------------------------------------------

def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse: shapes differ: {a.data.shape} vs {b.data.shape}")
    diff = sub(a, b)
    return tmean(mul(diff, diff))


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 0.0) -> Tensor:
    """cos(a, b) for 1-d vectors; rejects zero-norm inputs."""
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError(f"cosine_similarity wants equal 1-d vectors, got {a.data.shape} vs {b.data.shape}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine_similarity: zero-norm vector")
    dot = tsum(mul(a, b))
    return div(dot, sqrt(mul(tsum(mul(a, a)), tsum(mul(b, b)))))
