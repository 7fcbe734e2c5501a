"""Dense tensor helpers.

Tensors are plain :class:`numpy.ndarray` objects laid out channels-last and
row-major: ``[H, W, C]`` or ``[N, H, W, C]``. The helpers here enforce the
shape/precision rules the rest of the package relies on.
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteError, ShapeError

FP32 = np.float32
FP64 = np.float64
_PRECISIONS = {"fp32": FP32, "fp64": FP64}
MAX_ELEMENTS = 2**31 - 1


def dtype_of(precision):
    """Map ``"fp32"``/``"fp64"`` (or a numpy dtype) to a numpy dtype."""
    if isinstance(precision, str):
        try:
            return np.dtype(_PRECISIONS[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}") from None
    dt = np.dtype(precision)
    if dt not in (np.dtype(FP32), np.dtype(FP64)):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


def check_shape(shape):
    shape = tuple(int(d) for d in np.atleast_1d(shape))
    if not 1 <= len(shape) <= 4:
        raise ShapeError(f"rank must be 1..4, got {len(shape)}")
    if any(d < 1 for d in shape):
        raise ShapeError(f"all dims must be >= 1, got {shape}")
    n = 1
    for d in shape:
        n *= d
    if n > MAX_ELEMENTS:
        raise ShapeError(f"element count {n} overflows the 2^31 limit")
    return shape


def full(shape, value, precision="fp32"):
    return np.full(check_shape(shape), value, dtype=dtype_of(precision))


def zeros(shape, precision="fp32"):
    return full(shape, 0.0, precision)


def ones(shape, precision="fp32"):
    return full(shape, 1.0, precision)


def check_finite(x, op):
    """Raise :class:`NonFiniteError` naming ``op`` if ``x`` holds NaN/Inf."""
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NonFiniteError(op, f"{bad} of {np.size(x)} elements")
    return x


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "max": np.maximum,
}


def elementwise(op, a, b=None):
    """Apply ``op`` pointwise.

    ``op`` is one of ``add``, ``sub``, ``mul``, ``max`` (binary; ``b`` is a
    tensor of identical shape or a scalar), ``relu`` (unary) or ``scale``
    (``b`` must be a scalar).
    """
    a = np.asarray(a)
    if op == "relu":
        out = np.maximum(a, 0).astype(a.dtype, copy=False)
    elif op == "scale":
        if np.ndim(b) != 0:
            raise ShapeError("scale expects a scalar factor")
        out = a * a.dtype.type(b)
    elif op in _BINARY:
        if np.ndim(b) == 0:
            b = a.dtype.type(b)
        else:
            b = np.asarray(b)
            if b.shape != a.shape:
                raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        out = _BINARY[op](a, b)
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return check_finite(out, op)


def concat_depth(a, b):
    """Concatenate along the channel axis; channels of ``a`` come first."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != b.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_depth: spatial mismatch {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=-1)


class Rng:
    """Seeded random stream backed by the counter-based Philox generator.

    Philox output depends only on (key, counter), so a seed yields the same
    stream on every platform. Independent sub-streams are derived with
    :meth:`spawn`.
    """

    def __init__(self, seed=0, stream=0):
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def spawn(self, stream):
        return Rng(self.seed, stream)

    def uniform(self, low, high, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"


def random_init(shape, fan_in, rng, precision="fp32"):
    """Glorot-style uniform draw in ``[-sqrt(6/fan_in), sqrt(6/fan_in)]``."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    shape = check_shape(shape)
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype_of(precision))
