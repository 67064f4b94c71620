"""Primitive operations with forward values and vector-Jacobian products.

Each primitive is registered under a kind name. A forward function takes the
raw input arrays plus attributes and returns ``(output, vjp)`` where ``vjp``
maps the output cotangent to one cotangent per input (``None`` when an input
is not differentiable).
"""

from __future__ import annotations

from typing import Callable, Dict, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError, NumericOverflowError, ShapeError
from .tensor import Node, Tensor, active_tape

PRIMITIVES: Dict[str, Callable] = {}

SQRT_CLAMP = 1e-12


def primitive(kind):
    def register(fn):
        PRIMITIVES[kind] = fn
        return fn

    return register


def _as_tensor(x, like: Optional[np.ndarray] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def apply_primitive(kind: str, inputs: Sequence, attrs: Optional[dict] = None) -> Tensor:
    """Run primitive ``kind`` and record it on the active tape."""
    if kind not in PRIMITIVES:
        raise ContractError(f"unknown primitive {kind!r}")
    first = next((x.data for x in inputs if isinstance(x, Tensor)), None)
    tensors = [_as_tensor(x, first) for x in inputs]
    # overflow is reported below as a structured error, not a warning
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out, vjp = PRIMITIVES[kind]([t.data for t in tensors], **(attrs or {}))
    if not np.all(np.isfinite(out)):
        raise NumericOverflowError(kind)
    result = Tensor(out)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in tensors):
        result.requires_grad = True
        ids = tuple(t.id if t.requires_grad else None for t in tensors)
        tape.record(Node(kind, ids, result.id, vjp))
    return result


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


@primitive("add")
def _add(xs):
    a, b = xs
    _broadcast_shape("add", a, b)
    return a + b, lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape))


@primitive("sub")
def _sub(xs):
    a, b = xs
    _broadcast_shape("sub", a, b)
    return a - b, lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape))


@primitive("mul")
def _mul(xs):
    a, b = xs
    _broadcast_shape("mul", a, b)
    return a * b, lambda g: (unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape))


@primitive("scale")
def _scale(xs, factor):
    (x,) = xs
    c = x.dtype.type(factor)
    return x * c, lambda g: (g * c,)


@primitive("relu")
def _relu(xs):
    (x,) = xs
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), lambda g: (g * mask,)


@primitive("sigmoid")
def _sigmoid(xs):
    (x,) = xs
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    return y, lambda g: (g * y * (1 - y),)


@primitive("sqrt")
def _sqrt(xs):
    (x,) = xs
    if np.any(x < 0):
        raise NumericOverflowError("sqrt")
    y = np.sqrt(x)
    return y, lambda g: (g * 0.5 / np.sqrt(np.maximum(x, SQRT_CLAMP)),)


@primitive("exp")
def _exp(xs):
    (x,) = xs
    with np.errstate(over="ignore"):
        y = np.exp(x)
    return y, lambda g: (g * y,)


@primitive("log")
def _log(xs):
    (x,) = xs
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return y, lambda g: (g / x,)


# ---------------------------------------------------------------- reductions


@primitive("softmax")
def _softmax(xs):
    (x,) = xs
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return y, vjp


@primitive("log_softmax")
def _log_softmax(xs):
    (x,) = xs
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return y, vjp


@primitive("mean")
def _mean(xs, axis, keepdims=False):
    (x,) = xs
    axes = _axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if n == 0:
        raise ShapeError("mean", x.shape, detail=f"empty reduction over axis {axis}")
    y = x.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / x.dtype.type(n), x.shape).copy(),)

    return y, vjp


@primitive("sum")
def _sum(xs, axis=None, keepdims=False):
    (x,) = xs
    axes = _axes(axis, x.ndim)
    y = x.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return np.asarray(y), vjp


def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@primitive("max_last")
def _max_last(xs):
    (x,) = xs
    if x.shape[-1] == 0:
        raise ShapeError("max_last", x.shape, detail="empty last axis")
    idx = np.argmax(x, axis=-1)
    y = np.take_along_axis(x, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gx = np.zeros_like(x)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return y, vjp


@primitive("pick")
def _pick(xs, index):
    """Gather one entry of the last axis per leading position."""
    (x,) = xs
    index = np.asarray(index, dtype=np.intp)
    if index.shape != x.shape[:-1]:
        raise ShapeError("pick", x.shape, index.shape)
    if np.any(index < 0) or np.any(index >= x.shape[-1]):
        raise ContractError(f"pick: index out of range [0, {x.shape[-1]})")
    y = np.take_along_axis(x, index[..., None], axis=-1)[..., 0]

    def vjp(g):
        gx = np.zeros_like(x)
        np.put_along_axis(gx, index[..., None], g[..., None], axis=-1)
        return (gx,)

    return y, vjp


# ---------------------------------------------------------------- linear algebra


@primitive("matmul")
def _matmul(xs):
    a, b = xs
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    y = a @ b

    def vjp(g):
        ga = unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
        gb = unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
        return ga, gb

    return y, vjp


@primitive("scale_channels")
def _scale_channels(xs):
    """Broadcast multiply of per-channel weights S (..., C) over X (..., C, H, W)."""
    s, x = xs
    if x.ndim < 3 or s.shape != x.shape[:-2]:
        raise ShapeError("scale_channels", s.shape, x.shape)
    y = x * s[..., None, None]

    def vjp(g):
        return (g * x).sum(axis=(-2, -1)), g * s[..., None, None]

    return y, vjp


@primitive("spatial_weighted_sum")
def _spatial_weighted_sum(xs):
    """Z[..., c] = sum_ij X[..., c, i, j] * W[c, i, j]."""
    x, w = xs
    if x.ndim < 3 or w.shape != x.shape[-3:]:
        raise ShapeError("spatial_weighted_sum", x.shape, w.shape)
    y = np.einsum("...chw,chw->...c", x, w)

    def vjp(g):
        gx = g[..., None, None] * w
        lead = x.reshape((-1,) + x.shape[-3:])
        gw = np.einsum("nc,nchw->chw", g.reshape(-1, x.shape[-3]), lead)
        return gx, gw

    return y, vjp


@primitive("conv2d")
def _conv2d(xs, stride=1, padding=0):
    """Direct 2-D cross-correlation, x (N, Cin, H, W), w (Cout, Cin, kh, kw)."""
    x, w = xs[0], xs[1]
    b = xs[2] if len(xs) > 2 else None
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("conv2d", w.shape, b.shape, detail="bias")
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    p, s = padding, stride
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than input")
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    # columns: (N, Ho, Wo, Cin*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, -1)
    wmat = w.reshape(cout, -1)
    y = (cols @ wmat.T).transpose(0, 3, 1, 2)
    if b is not None:
        y = y + b[None, :, None, None]
    y = np.ascontiguousarray(y)

    def vjp(g):
        gt = g.transpose(0, 2, 3, 1).reshape(-1, cout)  # (N*Ho*Wo, Cout)
        gw = (gt.T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
        gcols = (gt @ wmat).reshape(n, ho, wo, cin, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return y, vjp


@primitive("layer_norm")
def _layer_norm(xs, eps=1e-5):
    x, gamma, beta = xs
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma + beta

    def vjp(g):
        gxhat = g * gamma
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return y, vjp


# ---------------------------------------------------------------- structural


@primitive("concat")
def _concat(xs, axis=0):
    try:
        y = np.concatenate(xs, axis=axis)
    except ValueError:
        raise ShapeError("concat", *[x.shape for x in xs]) from None
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return np.split(g, sizes, axis=axis)

    return y, vjp


@primitive("reshape")
def _reshape(xs, shape):
    (x,) = xs
    try:
        y = x.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return y, lambda g: (g.reshape(x.shape),)


@primitive("transpose")
def _transpose(xs, axes=None):
    (x,) = xs
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    y = np.transpose(x, axes)
    inv = np.argsort(axes)
    return y, lambda g: (np.transpose(g, inv),)


@primitive("getitem")
def _getitem(xs, key):
    (x,) = xs
    y = np.array(x[key])

    def vjp(g):
        gx = np.zeros_like(x)
        gx[key] += g
        return (gx,)

    return y, vjp


# ---------------------------------------------------------------- functional API


def add(a, b):
    return apply_primitive("add", [a, b])


def sub(a, b):
    return apply_primitive("sub", [a, b])


def mul(a, b):
    return apply_primitive("mul", [a, b])


def scale(x, factor):
    return apply_primitive("scale", [x], {"factor": factor})


def relu(x):
    return apply_primitive("relu", [x])


def sigmoid(x):
    return apply_primitive("sigmoid", [x])


def sqrt(x):
    return apply_primitive("sqrt", [x])


def exp(x):
    return apply_primitive("exp", [x])


def log(x):
    return apply_primitive("log", [x])


def softmax(x):
    return apply_primitive("softmax", [x])


def log_softmax(x):
    return apply_primitive("log_softmax", [x])


def mean(x, axis=None, keepdims=False):
    return apply_primitive("mean", [x], {"axis": axis, "keepdims": keepdims})


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    return apply_primitive("sum", [x], {"axis": axis, "keepdims": keepdims})


def max_last(x):
    """Max over the last axis. Returns the values and the argmax indices."""
    x = _as_tensor(x)
    idx = np.argmax(x.data, axis=-1) if x.shape[-1] else None
    return apply_primitive("max_last", [x]), idx


def pick(x, index):
    return apply_primitive("pick", [x], {"index": index})


def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def scale_channels(s, x):
    return apply_primitive("scale_channels", [s, x])


def spatial_weighted_sum(x, w):
    return apply_primitive("spatial_weighted_sum", [x, w])


def conv2d(x, w, b=None, stride=1, padding=0):
    inputs = [x, w] if b is None else [x, w, b]
    return apply_primitive("conv2d", inputs, {"stride": stride, "padding": padding})


def layer_norm(x, gamma, beta, eps=1e-5):
    return apply_primitive("layer_norm", [x, gamma, beta], {"eps": eps})


def concat(xs, axis=0):
    return apply_primitive("concat", list(xs), {"axis": axis})


def reshape(x, shape):
    return apply_primitive("reshape", [x], {"shape": tuple(shape)})


def flatten(x, start=1):
    x = _as_tensor(x)
    return reshape(x, x.shape[:start] + (-1,))


def transpose(x, axes=None):
    return apply_primitive("transpose", [x], {"axes": axes})


def getitem(x, key):
    return apply_primitive("getitem", [x], {"key": key})


def linear(x, w, b=None):
    """x @ w.T + b with w stored as (out, in)."""
    y = matmul(x, transpose(w))
    return y if b is None else add(y, b)
