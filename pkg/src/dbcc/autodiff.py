"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operator takes/returns :class:`Var` nodes. A node records its parents
and a closure mapping the output gradient to one gradient per parent.
Node ids come from a global counter, so parents always have smaller ids
than children and sorting by id gives a valid topological order.

Spatial operators treat the last three axes as ``(H, W, C)``; any leading
axes (usually a batch axis) are carried through unchanged.
"""

from __future__ import annotations

import itertools
import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateEstimateError, GraphError, ShapeError
from .tensor import check_finite

log = logging.getLogger(__name__)

_ids = itertools.count()

NORM_EPS = 1e-12


class Var:
    """A node in the computation graph."""

    __slots__ = ("value", "parents", "backward_fn", "op", "id", "requires_grad", "name", "grad", "info")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf", requires_grad=False, name=None):
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.id = next(_ids)
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name
        self.grad = None
        self.info = {}

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        label = self.name or self.op
        return f"Var({label}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def param(value, name=None):
    """Wrap ``value`` as a trainable leaf."""
    return Var(np.asarray(value), requires_grad=True, name=name)


def constant(value):
    return Var(np.asarray(value))


def as_var(x):
    return x if isinstance(x, Var) else constant(x)


def _node(value, parents, backward_fn, op):
    check_finite(value, op)
    return Var(value, parents, backward_fn, op)


def backward(loss, seed=None):
    """Reverse sweep from a scalar ``loss``.

    Returns ``{leaf: gradient}`` for every leaf created with
    :func:`param` that the loss depends on; the same gradient is also stored
    on ``leaf.grad``. Constant leaves are skipped.
    """
    if not isinstance(loss, Var):
        raise GraphError("loss must be a recorded Var")
    if loss.value.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any parameter")

    nodes = {}
    stack = [loss]
    while stack:
        v = stack.pop()
        if v.id in nodes:
            continue
        nodes[v.id] = v
        stack.extend(p for p in v.parents if p.requires_grad and p.id not in nodes)

    grads = {loss.id: np.ones_like(loss.value) if seed is None else np.asarray(seed, loss.dtype)}
    leaves = {}
    for nid in sorted(nodes, reverse=True):
        v = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if not v.parents:
            v.grad = g
            leaves[v] = g
            continue
        pgrads = v.backward_fn(g)
        for p, pg in zip(v.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            check_finite(pg, f"{v.op}.backward")
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg
    return leaves


# elementwise -----------------------------------------------------------


def add(a, b):
    a, b = as_var(a), as_var(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _node(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = as_var(a), as_var(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _node(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    """Hadamard product of two equally shaped tensors."""
    a, b = as_var(a), as_var(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return _node(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a, c):
    """Multiply by a Python/numpy scalar constant."""
    a = as_var(a)
    c = a.dtype.type(c)
    return _node(a.value * c, (a,), lambda g: (g * c,), "scale")


def scalar_mul(s, x):
    """Broadcast product of a learnable scalar ``s`` (size 1) with ``x``."""
    s, x = as_var(s), as_var(x)
    if s.value.size != 1:
        raise ShapeError(f"scalar_mul: expected a single scalar, got {s.shape}")
    sv = s.value.reshape(())
    xv = x.value

    def bw(g):
        gs = np.asarray(np.sum(g * xv, dtype=g.dtype)).reshape(s.shape)
        return gs, g * sv

    return _node(sv * xv, (s, x), bw, "scalar_mul")


def relu(x):
    """ReLU with subgradient 0 at exactly 0."""
    x = as_var(x)
    mask = x.value > 0
    out = np.where(mask, x.value, 0).astype(x.dtype, copy=False)
    return _node(out, (x,), lambda g: (g * mask,), "relu")


def concat_depth(a, b):
    a, b = as_var(a), as_var(b)
    if a.value.ndim != b.value.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_depth: spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[-1]
    out = np.concatenate([a.value, b.value], axis=-1)
    return _node(out, (a, b), lambda g: (g[..., :ca], g[..., ca:]), "concat_depth")


def sum_all(x):
    x = as_var(x)
    shape = x.shape
    return _node(np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x):
    x = as_var(x)
    shape, n = x.shape, x.value.size
    return _node(np.asarray(x.value.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean")


# convolutions ----------------------------------------------------------


def same_padding(size, kernel, stride):
    """Output size and (leading, trailing) zero padding giving ``ceil(size/stride)`` outputs."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _spatial_pad(x, kernel, stride, pad):
    """Pad axes -3/-2 of ``x``; return padded array, output dims, leading pads."""
    kh, kw = kernel
    h, w = x.shape[-3], x.shape[-2]
    if pad == "same":
        ho, th, bh = same_padding(h, kh, stride)
        wo, tw, bw = same_padding(w, kw, stride)
    elif pad == "valid":
        if h < kh or w < kw:
            raise ShapeError(f"valid conv: input {h}x{w} smaller than kernel {kh}x{kw}")
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        th = bh = tw = bw = 0
    else:
        raise ValueError(f"unknown padding {pad!r}")
    widths = [(0, 0)] * (x.ndim - 3) + [(th, bh), (tw, bw), (0, 0)]
    xp = np.pad(x, widths) if (th or bh or tw or bw) else x
    return xp, ho, wo, (th, tw)


def _check_stride(stride):
    if int(stride) != stride or stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride}")
    return int(stride)


def pointwise_conv(weights, x, bias=None, stride=1):
    """1x1 convolution: ``out[i,j,f] = sum_m W[m,f] * x[i*s, j*s, m] (+ b[f])``.

    ``weights`` has shape ``(1, 1, M, F)`` (or ``(M, F)``); output spatial
    dims are ``ceil(K/s), ceil(L/s)``.
    """
    w, x = as_var(weights), as_var(x)
    s = _check_stride(stride)
    wshape = w.shape
    w2 = w.value.reshape(wshape[-2], wshape[-1])
    m = x.shape[-1]
    if w2.shape[0] != m:
        raise ShapeError(f"pointwise_conv: weights expect {w2.shape[0]} channels, input has {m}")
    xv = x.value
    xs = xv[..., ::s, ::s, :]
    out = xs @ w2
    parents = [w, x]
    if bias is not None:
        b = as_var(bias)
        if b.shape != (w2.shape[1],):
            raise ShapeError(f"pointwise_conv: bias shape {b.shape} != ({w2.shape[1]},)")
        out = out + b.value
        parents.append(b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gw = (xs.reshape(-1, m).T @ g2).reshape(wshape)
        gx = np.zeros_like(xv)
        gx[..., ::s, ::s, :] = g @ w2.T
        if bias is not None:
            return gw, gx, g2.sum(axis=0)
        return gw, gx

    return _node(out, parents, bw, "pointwise_conv")


def depthwise_conv(weights, x, stride=1, pad="same"):
    """Per-channel spatial convolution with a depth multiplier.

    ``weights`` has shape ``(P, Q, C, m)``. Output channel ``k`` reads input
    channel ``k // m`` through filter ``k % m``. With ``pad="same"`` the
    kernel is centred and zero padded so stride 1 keeps the spatial dims.
    """
    w, x = as_var(weights), as_var(x)
    s = _check_stride(stride)
    p_, q_, c, mult = w.shape
    if x.shape[-1] != c:
        raise ShapeError(f"depthwise_conv: weights expect {c} channels, input has {x.shape[-1]}")
    if mult < 1:
        raise ShapeError("depthwise_conv: multiplier must be >= 1")
    wv = w.value
    xp, ho, wo, _ = _spatial_pad(x.value, (p_, q_), s, pad)
    # windows: [..., Ho', Wo', C, P, Q] at stride 1, subsampled afterwards
    win = sliding_window_view(xp, (p_, q_), axis=(-3, -2))[..., ::s, ::s, :, :, :]
    win = win[..., :ho, :wo, :, :, :]
    out = np.einsum("...hwcpq,pqcm->...hwcm", win, wv, optimize=True)
    lead = out.shape[:-2]
    out = out.reshape(*lead, c * mult)
    xshape, xpshape = x.shape, xp.shape

    def bw(g):
        g5 = g.reshape(*lead, c, mult)
        gw = np.einsum("...hwcpq,...hwcm->pqcm", win, g5, optimize=True)
        gwin = np.einsum("...hwcm,pqcm->...hwcpq", g5, wv, optimize=True)
        gxp = np.zeros(xpshape, dtype=g.dtype)
        for i in range(p_):
            for j in range(q_):
                gxp[..., i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += gwin[..., i, j]
        th, tw = _lead_pads(xshape, (p_, q_), s, pad)
        return gw, gxp[..., th : th + xshape[-3], tw : tw + xshape[-2], :]

    return _node(out, (w, x), bw, "depthwise_conv")


def _lead_pads(xshape, kernel, s, pad):
    if pad != "same":
        return 0, 0
    _, th, _ = same_padding(xshape[-3], kernel[0], s)
    _, tw, _ = same_padding(xshape[-2], kernel[1], s)
    return th, tw


def conv2d(weights, x, bias=None, stride=1, pad="same"):
    """Dense convolution, ``weights`` shaped ``(P, Q, Cin, F)``."""
    w, x = as_var(weights), as_var(x)
    s = _check_stride(stride)
    p_, q_, cin, f = w.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d: weights expect {cin} channels, input has {x.shape[-1]}")
    wv = w.value
    xp, ho, wo, _ = _spatial_pad(x.value, (p_, q_), s, pad)
    win = sliding_window_view(xp, (p_, q_), axis=(-3, -2))[..., ::s, ::s, :, :, :]
    win = win[..., :ho, :wo, :, :, :]  # [..., Ho, Wo, Cin, P, Q]
    lead = win.shape[:-3]
    cols = np.ascontiguousarray(win.transpose(*range(win.ndim - 3), win.ndim - 2, win.ndim - 1, win.ndim - 3))
    cols = cols.reshape(-1, p_ * q_ * cin)
    wmat = wv.reshape(p_ * q_ * cin, f)
    out = (cols @ wmat).reshape(*lead, f)
    parents = [w, x]
    if bias is not None:
        b = as_var(bias)
        if b.shape != (f,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({f},)")
        out = out + b.value
        parents.append(b)
    xshape, xpshape = x.shape, xp.shape

    def bw(g):
        g2 = g.reshape(-1, f)
        gw = (cols.T @ g2).reshape(wv.shape)
        gcols = (g2 @ wmat.T).reshape(*lead, p_, q_, cin)
        gxp = np.zeros(xpshape, dtype=g.dtype)
        for i in range(p_):
            for j in range(q_):
                gxp[..., i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += gcols[..., i, j, :]
        th, tw = _lead_pads(xshape, (p_, q_), s, pad)
        gx = gxp[..., th : th + xshape[-3], tw : tw + xshape[-2], :]
        if bias is not None:
            return gw, gx, g2.sum(axis=0)
        return gw, gx

    return _node(out, parents, bw, "conv2d")


# pooling and reductions -----------------------------------------------


def avg_pool(x, size=2):
    """Non-overlapping ``size x size`` mean pooling (window == stride)."""
    x = as_var(x)
    h, w, c = x.shape[-3:]
    if h % size or w % size:
        raise ShapeError(f"avg_pool: spatial dims {h}x{w} not divisible by {size}")
    lead = x.shape[:-3]
    out = x.value.reshape(*lead, h // size, size, w // size, size, c).mean(axis=(-4, -2))
    out = out.astype(x.dtype, copy=False)
    inv = x.dtype.type(1.0 / (size * size))

    def bw(g):
        g = np.repeat(np.repeat(g, size, axis=-3), size, axis=-2)
        return (g * inv,)

    return _node(out, (x,), bw, "avg_pool")


def spatial_sum(x):
    """Per-channel sum over all spatial positions -> ``(..., 1, 1, K)``."""
    x = as_var(x)
    shape = x.shape
    out = x.value.sum(axis=(-3, -2), keepdims=True)
    return _node(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "spatial_sum")


def group_sizes(k, groups=3):
    """Contiguous partition of ``k`` channels; the larger groups come first."""
    if k < groups:
        raise ShapeError(f"need at least {groups} channels, got {k}")
    base, rem = divmod(k, groups)
    return [base + 1] * rem + [base] * (groups - rem)


def group_depth_sum(x, groups=3):
    """Sum contiguous channel groups of ``x`` into ``groups`` outputs."""
    x = as_var(x)
    sizes = group_sizes(x.shape[-1], groups)
    bounds = np.cumsum([0] + sizes)
    out = np.stack([x.value[..., a:b].sum(axis=-1) for a, b in zip(bounds[:-1], bounds[1:])], axis=-1)

    def bw(g):
        return (np.repeat(g, sizes, axis=-1),)

    return _node(out, (x,), bw, "group_depth_sum")


def l2_normalize(v, eps=NORM_EPS, fallback=False):
    """Scale each vector along the last axis to unit Euclidean norm.

    A vector with norm <= ``eps`` raises :class:`DegenerateEstimateError`
    unless ``fallback`` is set, in which case it is replaced by the neutral
    ``(1,1,1)/sqrt(3)`` direction with zero gradient. The number of
    substitutions is stored in ``out.info["degenerate"]``.
    """
    v = as_var(v)
    vv = v.value
    norm = np.sqrt(np.sum(vv * vv, axis=-1, keepdims=True))
    bad = norm <= eps
    nbad = int(bad.sum())
    if nbad and not fallback:
        raise DegenerateEstimateError(f"cannot normalize: {nbad} vector(s) with norm <= {eps}")
    safe = np.where(bad, 1.0, norm).astype(vv.dtype)
    y = vv / safe
    if nbad:
        log.warning("substituting neutral estimate for %d degenerate vector(s)", nbad)
        neutral = np.full(vv.shape[-1], 1.0 / np.sqrt(vv.shape[-1]), dtype=vv.dtype)
        y = np.where(bad, neutral, y)

    def bw(g):
        dot = np.sum(y * g, axis=-1, keepdims=True)
        gv = (g - y * dot) / safe
        return (np.where(bad, 0.0, gv).astype(vv.dtype, copy=False),)

    out = _node(y, (v,), bw, "l2_normalize")
    out.info["degenerate"] = nbad
    return out


def mse_loss(estimate, target):
    """Mean squared error averaged over every element (channels and batch)."""
    e, t = as_var(estimate), as_var(target)
    if e.shape != t.shape:
        raise ShapeError(f"mse_loss: shape mismatch {e.shape} vs {t.shape}")
    diff = e.value - t.value
    n = diff.size
    out = np.asarray(np.mean(diff * diff), dtype=e.dtype)
    return _node(out, (e, t), lambda g: (g * 2.0 / n * diff, g * -2.0 / n * diff), "mse_loss")
