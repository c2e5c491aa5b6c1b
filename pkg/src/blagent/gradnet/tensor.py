"""Reverse-mode differentiable tensors over dense float64 numpy arrays.

Each operation builds a node on a single-use tape; ``backward`` walks the
tape in reverse topological order and accumulates gradients additively
into every reachable leaf. The primitive inventory is exactly what the
view network, the risk-aversion network, and the Black-Litterman
closed-form pipeline need, nothing more.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import erf

from ..errors import NotScalar, ShapeMismatch, SingularCovariance

_GRAD_ENABLED = True

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@contextmanager
def no_grad():
    """Disable tape construction inside the block (forward values only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense float64 array with a gradient slot and an optional tape node."""

    __slots__ = ("value", "grad", "needs_grad", "_parents", "_backward", "name")

    def __init__(self, value, needs_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.needs_grad = bool(needs_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.value.shape}, needs_grad={self.needs_grad})"


def constant(value, name=None) -> Tensor:
    return Tensor(value, needs_grad=False, name=name)


def leaf(value, name=None) -> Tensor:
    return Tensor(value, needs_grad=True, name=name)


def _node(value, parents, backward_fn) -> Tensor:
    """Create a result tensor; attach the tape node only when tracking."""
    out = Tensor(value)
    if _GRAD_ENABLED and any(p.needs_grad for p in parents):
        out.needs_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.value.shape} with {b.value.shape}")


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = _node(a.value + b.value, (a, b), None)

    def backward(g):
        a.accumulate(_unbroadcast(g, a.value.shape))
        b.accumulate(_unbroadcast(g, b.value.shape))

    out._backward = backward if out._parents else None
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = _node(a.value - b.value, (a, b), None)

    def backward(g):
        a.accumulate(_unbroadcast(g, a.value.shape))
        b.accumulate(_unbroadcast(-g, b.value.shape))

    out._backward = backward if out._parents else None
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = _node(a.value * b.value, (a, b), None)

    def backward(g):
        a.accumulate(_unbroadcast(g * b.value, a.value.shape))
        b.accumulate(_unbroadcast(g * a.value, b.value.shape))

    out._backward = backward if out._parents else None
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    out = _node(a.value / b.value, (a, b), None)

    def backward(g):
        a.accumulate(_unbroadcast(g / b.value, a.value.shape))
        b.accumulate(_unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    out._backward = backward if out._parents else None
    return out


def neg(a: Tensor) -> Tensor:
    out = _node(-a.value, (a,), None)

    def backward(g):
        a.accumulate(-g)

    out._backward = backward if out._parents else None
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _node(a.value * c, (a,), None)

    def backward(g):
        a.accumulate(g * c)

    out._backward = backward if out._parents else None
    return out


def abs_(a: Tensor) -> Tensor:
    # subgradient at 0 is 0 (np.sign gives exactly that)
    out = _node(np.abs(a.value), (a,), None)
    sign = np.sign(a.value)

    def backward(g):
        a.accumulate(g * sign)

    out._backward = backward if out._parents else None
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatch(f"matmul: {a.value.shape} @ {b.value.shape}")
    out = _node(a.value @ b.value, (a, b), None)

    def backward(g):
        a.accumulate(g @ b.value.T)
        b.accumulate(a.value.T @ g)

    out._backward = backward if out._parents else None
    return out


def transpose(a: Tensor) -> Tensor:
    if a.value.ndim != 2:
        raise ShapeMismatch(f"transpose: expected 2-D, got {a.value.shape}")
    out = _node(a.value.T.copy(), (a,), None)

    def backward(g):
        a.accumulate(g.T)

    out._backward = backward if out._parents else None
    return out


def reshape(a: Tensor, shape) -> Tensor:
    if int(np.prod(shape)) != a.value.size:
        raise ShapeMismatch(f"reshape: {a.value.shape} -> {shape}")
    out = _node(a.value.reshape(shape), (a,), None)

    def backward(g):
        a.accumulate(g.reshape(a.value.shape))

    out._backward = backward if out._parents else None
    return out


def concat(parts, axis=0) -> Tensor:
    parts = list(parts)
    out = _node(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), None)
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            p.accumulate(g[tuple(idx)])

    out._backward = backward if out._parents else None
    return out


def narrow(a: Tensor, axis: int, start: int, size: int) -> Tensor:
    """Contiguous slice along one axis."""
    if start < 0 or start + size > a.value.shape[axis]:
        raise ShapeMismatch(f"narrow: [{start}:{start + size}] out of {a.value.shape[axis]}")
    idx = [slice(None)] * a.value.ndim
    idx[axis] = slice(start, start + size)
    idx = tuple(idx)
    out = _node(a.value[idx].copy(), (a,), None)

    def backward(g):
        full = np.zeros_like(a.value)
        full[idx] = g
        a.accumulate(full)

    out._backward = backward if out._parents else None
    return out


def spd_solve(a: Tensor, b: Tensor) -> Tensor:
    """Solve A x = b for SPD A; gradient via the adjoint solve."""
    if a.value.ndim != 2 or a.value.shape[0] != a.value.shape[1]:
        raise ShapeMismatch(f"spd_solve: matrix {a.value.shape} not square")
    if b.value.ndim != 2 or b.value.shape[0] != a.value.shape[0]:
        raise ShapeMismatch(f"spd_solve: rhs {b.value.shape} vs matrix {a.value.shape}")
    factor = spd_factor(a.value)
    x = cho_solve(factor, b.value)
    out = _node(x, (a, b), None)

    def backward(g):
        gb = cho_solve(factor, g)
        b.accumulate(gb)
        a.accumulate(-gb @ x.T)

    out._backward = backward if out._parents else None
    return out


def spd_factor(matrix: np.ndarray):
    """Cholesky factor with a pivot-ratio positivity check."""
    try:
        factor = cho_factor(matrix, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(str(exc)) from exc
    pivots = np.diag(factor[0]) ** 2
    if pivots.min() <= 1e-12 * pivots.max():
        raise SingularCovariance("pivot ratio below 1e-12")
    return factor


def diag_part(a: Tensor) -> Tensor:
    if a.value.ndim != 2 or a.value.shape[0] != a.value.shape[1]:
        raise ShapeMismatch(f"diag_part: {a.value.shape} not square")
    out = _node(np.diag(a.value).copy(), (a,), None)

    def backward(g):
        a.accumulate(np.diag(g))

    out._backward = backward if out._parents else None
    return out


def diag_embed(v: Tensor) -> Tensor:
    if v.value.ndim != 1:
        raise ShapeMismatch(f"diag_embed: expected 1-D, got {v.value.shape}")
    out = _node(np.diag(v.value), (v,), None)

    def backward(g):
        v.accumulate(np.diag(g))

    out._backward = backward if out._parents else None
    return out


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    out = _node(np.asarray(a.value.sum()), (a,), None)

    def backward(g):
        a.accumulate(np.full_like(a.value, float(g)))

    out._backward = backward if out._parents else None
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.value.size
    out = _node(np.asarray(a.value.mean()), (a,), None)

    def backward(g):
        a.accumulate(np.full_like(a.value, float(g) / n))

    out._backward = backward if out._parents else None
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def softmax_rows(a: Tensor) -> Tensor:
    if a.value.ndim != 2:
        raise ShapeMismatch(f"softmax_rows: expected 2-D, got {a.value.shape}")
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = _node(y, (a,), None)

    def backward(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        a.accumulate(y * (g - dot))

    out._backward = backward if out._parents else None
    return out


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization with learned gain and bias."""
    if a.value.ndim != 2:
        raise ShapeMismatch(f"layer_norm: expected 2-D, got {a.value.shape}")
    n = a.value.shape[1]
    if gain.value.shape != (n,) or bias.value.shape != (n,):
        raise ShapeMismatch("layer_norm: gain/bias width mismatch")
    mu = a.value.mean(axis=1, keepdims=True)
    xc = a.value - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _node(xhat * gain.value + bias.value, (a, gain, bias), None)

    def backward(g):
        gxhat = g * gain.value
        # standard layer-norm backward, vectorized per row
        gvar = (gxhat * xc).sum(axis=1, keepdims=True) * (-0.5) * inv**3
        gmu = -(gxhat.sum(axis=1, keepdims=True)) * inv + gvar * (-2.0 / n) * xc.sum(
            axis=1, keepdims=True
        )
        a.accumulate(gxhat * inv + gvar * 2.0 * xc / n + gmu / n)
        gain.accumulate((g * xhat).sum(axis=0))
        bias.accumulate(g.sum(axis=0))

    out._backward = backward if out._parents else None
    return out


def gelu(a: Tensor) -> Tensor:
    x = a.value
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = _node(x * cdf, (a,), None)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        a.accumulate(g * (cdf + x * pdf))

    out._backward = backward if out._parents else None
    return out


def log_sigmoid(a: Tensor) -> Tensor:
    # natural-log convention: value at 0 is -ln 2, derivative 0.5
    x = a.value
    out = _node(-np.logaddexp(0.0, -x), (a,), None)

    def backward(g):
        a.accumulate(g * _sigmoid(-x))

    out._backward = backward if out._parents else None
    return out


def softplus(a: Tensor) -> Tensor:
    x = a.value
    out = _node(np.logaddexp(0.0, x), (a,), None)

    def backward(g):
        a.accumulate(g * _sigmoid(x))

    out._backward = backward if out._parents else None
    return out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# convolution and pooling (channel-first, stride 1, zero padding)


def conv2d(x: Tensor, w: Tensor, b: Tensor, pad: int = 1) -> Tensor:
    if x.value.ndim != 3 or w.value.ndim != 4:
        raise ShapeMismatch(f"conv2d: input {x.value.shape}, kernel {w.value.shape}")
    cin, h, wd = x.value.shape
    cout, cin_k, kh, kw = w.value.shape
    if cin_k != cin or b.value.shape != (cout,):
        raise ShapeMismatch("conv2d: channel mismatch")
    xp = np.pad(x.value, ((0, 0), (pad, pad), (pad, pad)))
    ho = h + 2 * pad - kh + 1
    wo = wd + 2 * pad - kw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeMismatch(f"conv2d: kernel {kh}x{kw} exceeds padded input {xp.shape}")
    y = np.zeros((cout, ho, wo))
    for di in range(kh):
        for dj in range(kw):
            y += np.tensordot(w.value[:, :, di, dj], xp[:, di : di + ho, dj : dj + wo], axes=(1, 0))
    y += b.value[:, None, None]
    out = _node(y, (x, w, b), None)

    def backward(g):
        gx = np.zeros_like(xp)
        gw = np.zeros_like(w.value)
        for di in range(kh):
            for dj in range(kw):
                patch = xp[:, di : di + ho, dj : dj + wo]
                gw[:, :, di, dj] = np.tensordot(g, patch, axes=([1, 2], [1, 2]))
                gx[:, di : di + ho, dj : dj + wo] += np.tensordot(
                    w.value[:, :, di, dj].T, g, axes=(1, 0)
                )
        if pad:
            gx = gx[:, pad:-pad, pad:-pad]
        x.accumulate(gx)
        w.accumulate(gw)
        b.accumulate(g.sum(axis=(1, 2)))

    out._backward = backward if out._parents else None
    return out


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pool, stride 2; a dimension shorter than 2 is left unpooled."""
    if x.value.ndim != 3:
        raise ShapeMismatch(f"maxpool2d: expected 3-D, got {x.value.shape}")
    c, h, w = x.value.shape
    kh = 2 if h >= 2 else 1
    kw = 2 if w >= 2 else 1
    ho, wo = h // kh, w // kw
    crop = x.value[:, : ho * kh, : wo * kw]
    win = crop.reshape(c, ho, kh, wo, kw).transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, kh * kw)
    idx = win.argmax(axis=3)
    y = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]
    out = _node(y, (x,), None)

    def backward(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=3)
        gcrop = gwin.reshape(c, ho, wo, kh, kw).transpose(0, 1, 3, 2, 4).reshape(c, ho * kh, wo * kw)
        gx = np.zeros_like(x.value)
        gx[:, : ho * kh, : wo * kw] = gcrop
        x.accumulate(gx)

    out._backward = backward if out._parents else None
    return out


# ---------------------------------------------------------------------------
# tape traversal

OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "scale": scale,
    "abs": abs_,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "concat": concat,
    "narrow": narrow,
    "spd_solve": spd_solve,
    "diag_part": diag_part,
    "diag_embed": diag_embed,
    "sum": sum_all,
    "mean": mean_all,
    "softmax": softmax_rows,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "log_sigmoid": log_sigmoid,
    "softplus": softplus,
    "conv2d": conv2d,
    "maxpool2d": maxpool2d,
}


def op_set():
    """Registered differentiable primitives, name -> callable."""
    return dict(OPS)


def backward(objective: Tensor):
    """Run the reverse pass from a scalar objective and free the tape."""
    if objective.value.size != 1:
        raise NotScalar(f"backward from shape {objective.value.shape}")
    topo = []
    seen = set()
    stack = [(objective, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or node._backward is None:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._backward is not None and id(p) not in seen:
                stack.append((p, False))
    objective.accumulate(np.ones_like(objective.value))
    for node in reversed(topo):
        fn = node._backward
        if fn is not None:
            fn(node.grad)
        node._parents = ()
        node._backward = None
        if node is not objective:
            node.grad = None
