"""Full illuminant-estimation network, efficiency counters and checkpoints.

Layout (default config, 512x512 input)::

    input (512,512,3)
    stem: 3x3 conv, stride 2, 32 filters, ReLU      -> (256,256,32)
    block 0 (both branches fed by the stem)          -> (64,64,64) x2
    block 1                                          -> (16,16,128) x2
    channel-wise weighted pooling                    -> (16,16,128)
    spatial sum                                      -> (1,1,128)
    channel-group sum + L2 normalization             -> (1,1,3)
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .blocks import BlockKind, block_param_shapes, init_block_params, regularized_block
from .blocks import channelwise_weighted_pool
from .errors import ChecksumError, ConfigError, FormatError, ShapeError, VersionError
from .tensor import Rng, dtype_of, random_init

MAGIC = b"DBCC"
FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    input_size: tuple = (512, 512)
    stem_filters: int = 32
    variant: str = "design-a"
    num_blocks: int = 2
    width_factor: int | None = None
    shared_op: str = "stride4"
    cross_terms: bool = True
    groups: int = 3
    precision: str = "fp32"

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        if len(self.input_size) != 2:
            raise ConfigError("input_size must be (H, W)")
        if self.stem_filters < 1 or self.num_blocks < 1:
            raise ConfigError("stem_filters and num_blocks must be >= 1")
        if self.groups != 3:
            raise ConfigError("the head emits an RGB triple; groups must be 3")
        dtype_of(self.precision)
        # BlockKind validates variant / shared_op / width_factor
        self.block_kinds()

    @property
    def reduction(self):
        return 2 * 4**self.num_blocks

    def check_input(self, h, w):
        r = self.reduction
        if h % r or w % r:
            raise ShapeError(f"input {h}x{w} must be divisible by {r} (stem stride 2, /4 per block)")

    def block_kinds(self):
        kinds = []
        d = self.stem_filters
        for _ in range(self.num_blocks):
            kind = BlockKind(self.variant, d, self.width_factor, self.shared_op, self.cross_terms)
            kinds.append(kind)
            d = kind.out_depth
        return kinds

    @property
    def out_depth(self):
        return self.block_kinds()[-1].out_depth

    def to_dict(self):
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def param_shapes(config):
    """Ordered ``{name: shape}`` for every learnable tensor."""
    shapes = {"stem.w": (3, 3, 3, config.stem_filters), "stem.b": (config.stem_filters,)}
    for i, kind in enumerate(config.block_kinds()):
        for name, shape in block_param_shapes(kind).items():
            shapes[f"block{i}.{name}"] = shape
    return shapes


@dataclass
class Model:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.config)
        if list(expected) != list(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ShapeError(f"parameter set mismatch: missing={missing} unexpected={extra}")
        for name, shape in expected.items():
            if self.params[name].shape != tuple(shape):
                raise ShapeError(f"tensor {name!r}: expected shape {tuple(shape)}, got {self.params[name].shape}")

    @property
    def dtype(self):
        return dtype_of(self.config.precision)

    def astype(self, precision):
        cfg = ModelConfig.from_dict({**self.config.to_dict(), "precision": precision})
        dt = dtype_of(precision)
        return Model(cfg, {k: v.astype(dt) for k, v in self.params.items()})

    def copy(self):
        return Model(ModelConfig.from_dict(self.config.to_dict()), {k: v.copy() for k, v in self.params.items()})

    def param_vars(self):
        return {k: ad.param(v, name=k) for k, v in self.params.items()}

    def forward(self, x, params=None, trace=None, fallback=False):
        """Build the graph for images ``x`` (``[H,W,3]`` or ``[N,H,W,3]``).

        ``params`` maps names to :class:`~dbcc.autodiff.Var`; when omitted
        the stored arrays are used as constants. If ``trace`` is a list, the
        ``(label, shape)`` of every stage is appended to it.
        """
        cfg = self.config
        p = params if params is not None else self.params
        x = ad.as_var(np.asarray(ad.as_var(x).value, dtype=self.dtype))
        if x.shape[-1] != 3 or x.value.ndim not in (3, 4):
            raise ShapeError(f"expected [H,W,3] or [N,H,W,3] input, got {x.shape}")
        cfg.check_input(*x.shape[-3:-1])

        def rec(label, v):
            if trace is not None:
                trace.append((label, tuple(v.shape)))

        rec("input", x)
        t = ad.relu(ad.conv2d(p["stem.w"], x, p["stem.b"], stride=2))
        rec("stem", t)
        i_s = i_c = t
        for i, kind in enumerate(cfg.block_kinds()):
            prefix = f"block{i}."
            sub = {k[len(prefix):]: v for k, v in p.items() if k.startswith(prefix)}
            i_s, i_c = regularized_block(kind, sub, i_s, i_c)
            rec(f"block{i}.semantic", i_s)
            rec(f"block{i}.color", i_c)
        o = channelwise_weighted_pool(i_s, i_c)
        rec("weighted_pool", o)
        o = ad.spatial_sum(o)
        rec("spatial_sum", o)
        o = ad.group_depth_sum(o, cfg.groups)
        rec("group_sum", o)
        est = ad.l2_normalize(o, fallback=fallback)
        rec("output", est)
        return est

    def predict(self, images, batch_size=64, fallback=False):
        """Unit-norm illuminant estimates, shape ``(N, 3)``."""
        images = np.asarray(images)
        single = images.ndim == 3
        if single:
            images = images[None]
        out = []
        for i in range(0, len(images), batch_size):
            est = self.forward(images[i : i + batch_size], fallback=fallback)
            out.append(est.value.reshape(-1, 3))
        res = np.concatenate(out).astype(np.float64)
        return res[0] if single else res


def build(config, rng=None):
    """Initialise a model for ``config`` from ``rng`` (seed 0 if omitted)."""
    rng = rng if rng is not None else Rng(0)
    params = {}
    f = config.stem_filters
    params["stem.w"] = random_init((3, 3, 3, f), 27, rng)
    params["stem.b"] = np.zeros(f, dtype=np.float32)
    for i, kind in enumerate(config.block_kinds()):
        for name, value in init_block_params(kind, rng).items():
            params[f"block{i}.{name}"] = value
    dt = dtype_of(config.precision)
    return Model(config, {k: v.astype(dt) for k, v in params.items()})


# efficiency accounting ---------------------------------------------------


def count_params(model):
    """Exact number of learnable scalars."""
    cfg = model.config if isinstance(model, Model) else model
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def flops_breakdown(model, input_shape):
    """Per-layer floating point operation counts as ``[(label, flops)]``.

    Convolutions cost 2 flops per multiply-accumulate; bias adds, ReLU,
    element-wise products/sums and pooling cost 1 flop per element touched.
    """
    cfg = model.config if isinstance(model, Model) else model
    h, w = int(input_shape[0]), int(input_shape[1])
    cfg.check_input(h, w)
    rows = []
    f = cfg.stem_filters
    h, w = h // 2, w // 2
    rows += [("stem.conv", 2 * h * w * f * 27), ("stem.bias", h * w * f), ("stem.relu", h * w * f)]
    for i, kind in enumerate(cfg.block_kinds()):
        b = f"block{i}"
        d, u = kind.in_depth, kind.unit_depth
        # semantic branch: depthwise 3x3 (D -> u), relu, pool; depthwise 3x3 (u -> u), relu, pool
        rows += [
            (f"{b}.sem0.dwconv", 2 * h * w * u * 9),
            (f"{b}.sem0.relu", h * w * u),
            (f"{b}.sem0.pool", h * w * u),
            (f"{b}.sem1.dwconv", 2 * (h // 2) * (w // 2) * u * 9),
            (f"{b}.sem1.relu", (h // 2) * (w // 2) * u),
            (f"{b}.sem1.pool", (h // 2) * (w // 2) * u),
        ]
        h2, w2, h4, w4 = h // 2, w // 2, h // 4, w // 4
        rows += [
            (f"{b}.col0.pwconv", 2 * h2 * w2 * d * u),
            (f"{b}.col0.bias_relu", 2 * h2 * w2 * u),
            (f"{b}.col1.pwconv", 2 * h4 * w4 * u * u),
            (f"{b}.col1.bias_relu", 2 * h4 * w4 * u),
        ]
        if kind.shared:
            terms = 4 if kind.cross_terms else 2
            if kind.variant == "design-b":
                rows += [
                    (f"{b}.shared.scale", terms * h * w * d),
                    (f"{b}.shared.add", (2 if kind.cross_terms else 0) * h * w * d),
                    (f"{b}.shared.pool", 2 * h * w * d),
                ]
            else:
                if kind.shared_op == "stride4":
                    conv = 2 * h4 * w4 * d * d * 9
                else:
                    conv = 2 * h2 * w2 * d * d * 9 + 2 * h4 * w4 * d * d * 9
                rows += [
                    (f"{b}.shared.conv", terms * conv),
                    (f"{b}.shared.add", (2 if kind.cross_terms else 0) * h4 * w4 * d),
                ]
        h, w, f = h4, w4, kind.out_depth
    rows += [
        ("head.weighted_pool", h * w * f),
        ("head.spatial_sum", h * w * f),
        ("head.group_sum", f),
        ("head.normalize", 9),
    ]
    return rows


def count_flops(model, input_shape):
    return int(sum(v for _, v in flops_breakdown(model, input_shape)))


# checkpoints -------------------------------------------------------------


def _checksum(data):
    return hashlib.blake2b(data, digest_size=8).digest()


def encode_checkpoint(model):
    """Serialize to bytes: magic, version, config JSON, named fp32 tensors, checksum."""
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(cfg)), cfg]
    parts.append(struct.pack("<I", len(model.params)))
    for name, value in model.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + _checksum(body)


def decode_checkpoint(data):
    """Parse checkpoint bytes into ``(ModelConfig, {name: float32 array})``."""
    if len(data) < 8 or data[:4] != MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    body, digest = data[:-8], data[-8:]
    if len(data) < 16 or _checksum(body) != digest:
        raise ChecksumError("checkpoint checksum mismatch (truncated or corrupt file)")
    try:
        off = 8
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        config = ModelConfig.from_dict(json.loads(body[off : off + n].decode("utf-8")))
        off += n
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        params = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off : off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", body, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            size = int(np.prod(dims)) * 4
            if off + size > len(body):
                raise FormatError(f"tensor {name!r} payload truncated")
            params[name] = np.frombuffer(body, dtype="<f4", count=size // 4, offset=off).reshape(dims).astype(np.float32)
            off += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed checkpoint: {exc}") from exc
    if off != len(body):
        raise FormatError("trailing bytes after last tensor")
    return config, params


def _atomic_write(path, data):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(model, path):
    _atomic_write(path, encode_checkpoint(model))


def load(path):
    """Read a checkpoint file into a :class:`Model` (fp32 parameters)."""
    with open(path, "rb") as fh:
        config, params = decode_checkpoint(fh.read())
    model = Model(ModelConfig.from_dict({**config.to_dict(), "precision": "fp32"}), params)
    return model if config.precision == "fp32" else model.astype(config.precision)


def load_into(model, path):
    """Copy checkpoint tensors into ``model``, which must have matching shapes."""
    with open(path, "rb") as fh:
        _, params = decode_checkpoint(fh.read())
    for name, shape in param_shapes(model.config).items():
        if name not in params:
            raise ShapeError(f"checkpoint lacks tensor {name!r}")
        if params[name].shape != tuple(shape):
            raise ShapeError(f"tensor {name!r}: checkpoint shape {params[name].shape} != model shape {tuple(shape)}")
    extra = sorted(set(params) - set(param_shapes(model.config)))
    if extra:
        raise ShapeError(f"checkpoint has unexpected tensors: {extra}")
    model.params = {k: params[k].astype(model.dtype) for k in param_shapes(model.config)}
    return model
