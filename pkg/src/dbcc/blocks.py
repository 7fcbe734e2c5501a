"""Composite blocks of the dual-branch network.

Two branches run side by side. The semantic branch stacks depth-wise
convolutions (spatial context, no channel mixing); the color branch stacks
stride-2 point-wise convolutions (per-pixel channel mixing, no spatial
context). A *regularized* block additionally couples the branches through a
shared path::

    o_s'' = w_s * i_s + w_sc * i_c
    o_c'' = w_sc * i_s + w_c * i_c

where ``*`` is a 3x3 convolution (design A) or a scalar product followed by
4x4 average downsampling (design B). Each branch output is the unit-stack
output concatenated with its shared-path signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeError
from .tensor import random_init

VARIANTS = ("baseline", "design-a", "design-b")
SHARED_OPS = ("stride4", "stride2x2")
SHARED_NAMES = ("w_s", "w_c", "w_sc")
SHARED_INIT_SCALE = 0.1


@dataclass(frozen=True)
class BlockKind:
    """Static description of one block.

    ``width_factor`` sets how many channels the unit stack of each branch
    emits, as a multiple of ``in_depth``. ``None`` picks the default: 2 for
    the baseline (the block itself doubles depth), 1 for the regularized
    designs (the shared path supplies the other half).
    """

    variant: str = "design-a"
    in_depth: int = 32
    width_factor: int | None = None
    shared_op: str = "stride4"
    cross_terms: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown block variant {self.variant!r}; expected one of {VARIANTS}")
        if self.shared_op not in SHARED_OPS:
            raise ValueError(f"unknown shared_op {self.shared_op!r}; expected one of {SHARED_OPS}")
        if self.in_depth < 1:
            raise ValueError("in_depth must be >= 1")
        if self.width_factor is not None and self.width_factor < 1:
            raise ValueError("width_factor must be >= 1")

    @property
    def factor(self):
        if self.width_factor is not None:
            return self.width_factor
        return 2 if self.variant == "baseline" else 1

    @property
    def shared(self):
        return self.variant != "baseline"

    @property
    def unit_depth(self):
        return self.in_depth * self.factor

    @property
    def out_depth(self):
        return self.unit_depth + (self.in_depth if self.shared else 0)

    def output_shape(self, h, w):
        return (-(-h // 4), -(-w // 4), self.out_depth)


# units ------------------------------------------------------------------


def color_unit(weights, bias, y, stride=2):
    """ReLU of a stride-2 point-wise convolution."""
    return ad.relu(ad.pointwise_conv(weights, y, bias, stride=stride))


def semantic_unit(weights, y):
    """2x2 average pooling of ReLU of a same-padded depth-wise convolution."""
    return ad.avg_pool(ad.relu(ad.depthwise_conv(weights, y)), 2)


def channelwise_weighted_pool(s, c):
    """Mask every channel of one signal with the matching channel of the other."""
    return ad.mul(s, c)


def reduction_head(o, fallback=False):
    """Spatial sum, 3-way channel-group sum, then L2 normalization."""
    return ad.l2_normalize(ad.group_depth_sum(ad.spatial_sum(o)), fallback=fallback)


# shared path -------------------------------------------------------------


def _shared_term(kind, params, name, x):
    if kind.variant == "design-b":
        return ad.scalar_mul(params[name], x)
    if kind.shared_op == "stride4":
        return ad.conv2d(params[name], x, stride=4)
    return ad.conv2d(params[name + ".1"], ad.conv2d(params[name + ".0"], x, stride=2), stride=2)


def shared_path(kind, params, i_s, i_c):
    """Cross-branch signals ``(o_s'', o_c'')`` at a quarter of the input resolution."""
    if kind.cross_terms:
        os_ = ad.add(_shared_term(kind, params, "w_s", i_s), _shared_term(kind, params, "w_sc", i_c))
        oc_ = ad.add(_shared_term(kind, params, "w_sc", i_s), _shared_term(kind, params, "w_c", i_c))
    else:
        os_ = _shared_term(kind, params, "w_s", i_s)
        oc_ = _shared_term(kind, params, "w_c", i_c)
    if kind.variant == "design-b":
        os_, oc_ = ad.avg_pool(os_, 4), ad.avg_pool(oc_, 4)
    return os_, oc_


def regularized_block(kind, params, i_s, i_c):
    """Run one block and return the two branch outputs ``(o_s, o_c)``.

    ``params`` maps the names produced by :func:`init_block_params` to
    :class:`~dbcc.autodiff.Var` (or array) values.
    """
    i_s, i_c = ad.as_var(i_s), ad.as_var(i_c)
    if i_s.shape != i_c.shape:
        raise ShapeError(f"branch inputs differ: {i_s.shape} vs {i_c.shape}")
    h, w, d = i_s.shape[-3:]
    if d != kind.in_depth:
        raise ShapeError(f"block expects depth {kind.in_depth}, got {d}")
    if h % 4 or w % 4:
        raise ShapeError(f"block input {h}x{w} is not divisible by 4")

    o_s = semantic_unit(params["sem1.w"], semantic_unit(params["sem0.w"], i_s))
    o_c = color_unit(params["col1.w"], params["col1.b"], color_unit(params["col0.w"], params["col0.b"], i_c))
    if kind.shared:
        s2, c2 = shared_path(kind, params, i_s, i_c)
        o_s = ad.concat_depth(o_s, s2)
        o_c = ad.concat_depth(o_c, c2)
    return o_s, o_c


# parameters --------------------------------------------------------------


def block_param_shapes(kind):
    """Ordered ``{name: shape}`` of a block's learnable tensors."""
    d, f = kind.in_depth, kind.factor
    u = kind.unit_depth
    shapes = {
        "sem0.w": (3, 3, d, f),
        "sem1.w": (3, 3, u, 1),
        "col0.w": (1, 1, d, u),
        "col0.b": (u,),
        "col1.w": (1, 1, u, u),
        "col1.b": (u,),
    }
    if not kind.shared:
        return shapes
    names = SHARED_NAMES if kind.cross_terms else ("w_s", "w_c")
    for n in names:
        if kind.variant == "design-b":
            shapes[n] = (1,)
        elif kind.shared_op == "stride4":
            shapes[n] = (3, 3, d, d)
        else:
            shapes[n + ".0"] = (3, 3, d, d)
            shapes[n + ".1"] = (3, 3, d, d)
    return shapes


def init_block_params(kind, rng, precision="fp32"):
    """Initial values: uniform fan-in init, zero biases.

    Design B scalars start at ``(w_s, w_c, w_sc) = (1, 1, 0)``; design A
    shared kernels are random with ``w_sc`` damped by 0.1.
    """
    out = {}
    for name, shape in block_param_shapes(kind).items():
        if name.endswith(".b"):
            out[name] = np.zeros(shape, dtype=np.float32)
        elif kind.variant == "design-b" and name in SHARED_NAMES:
            out[name] = np.full(shape, 0.0 if name == "w_sc" else 1.0, dtype=np.float32)
        else:
            if name.startswith("sem"):
                fan_in = shape[0] * shape[1]
            else:
                fan_in = int(np.prod(shape[:-1]))
            w = random_init(shape, fan_in, rng)
            if name.startswith("w_sc"):
                w = w * np.float32(SHARED_INIT_SCALE)
            out[name] = w
    dtype = np.float64 if precision == "fp64" else np.float32
    return {k: v.astype(dtype) for k, v in out.items()}
