"""Image I/O, image-formation helpers, manifests and synthetic scenes.

Images are float arrays ``[H, W, 3]`` with values in ``[0, 1]``. The
image-formation model is a per-channel product of scene reflectance and a
global illuminant; white balancing divides it back out. Both helpers scale
the illuminant by its largest channel so images stay in gamut.
"""

from __future__ import annotations

import csv
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError
from .tensor import Rng

WB_EPS = 1e-6
MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = ["file", "gt_r", "gt_g", "gt_b"]


# PPM ------------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def decode_ppm(data):
    """Decode binary PPM (P6, maxval <= 65535) bytes into a float64 image."""
    if data[:2] != b"P6":
        raise FormatError(f"unsupported PNM magic {data[:2]!r}; only binary P6 is read")
    pos = 2
    vals = []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if not m or not m.group(1).isdigit():
            raise FormatError("malformed PPM header")
        vals.append(int(m.group(1)))
        pos = m.end()
    width, height, maxval = vals
    if width < 1 or height < 1 or not 1 <= maxval <= 65535:
        raise FormatError(f"invalid PPM header values {vals}")
    if pos >= len(data) or data[pos : pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise FormatError("malformed PPM header: missing separator before raster")
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    count = width * height * 3
    nbytes = count * np.dtype(dtype).itemsize
    if len(data) - pos < nbytes:
        raise FormatError(f"truncated PPM raster: need {nbytes} bytes, have {len(data) - pos}")
    raw = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    return raw.reshape(height, width, 3).astype(np.float64) / maxval


def encode_ppm(image, maxval=65535):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected [H,W,3] image, got {image.shape}")
    if not 1 <= maxval <= 65535:
        raise ValueError("maxval must be in 1..65535")
    q = np.rint(np.clip(image, 0.0, 1.0) * maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    h, w, _ = image.shape
    return b"P6\n%d %d\n%d\n" % (w, h, maxval) + q.astype(dtype).tobytes()


def read_ppm(path):
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def write_ppm(path, image, maxval=65535):
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image, maxval))


# image formation --------------------------------------------------------------


def gamma(image, g):
    """Element-wise power ``x ** g`` (``g = 1/2.2`` for display encoding)."""
    return np.power(np.asarray(image), g)


def normalize(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n <= 1e-12):
        raise ValueError("cannot normalize a zero illuminant")
    return v / n


def _relative(illuminant):
    L = np.asarray(illuminant, dtype=np.float64)
    if L.shape != (3,):
        raise ShapeError(f"illuminant must be an RGB triple, got shape {L.shape}")
    if np.any(L < 0):
        raise ValueError("illuminant channels must be non-negative")
    if L.max() <= 0:
        raise ValueError("illuminant is zero")
    return L / L.max()


@dataclass
class Sample:
    image: np.ndarray
    gt: np.ndarray
    mask: list = field(default_factory=list)
    name: str = ""


def synthesize(base, illuminant, rng=None, noise=0.0):
    """Render reflectances ``base`` under ``illuminant``.

    ``image = clip(base * L / max(L), 0, 1)`` plus optional Gaussian sensor
    noise of std ``noise``. A zero illuminant channel is rejected because
    the result could not be white balanced.
    """
    L = _relative(illuminant)
    if np.any(L <= WB_EPS):
        raise ValueError("illuminant has a zero channel; white balance would be undefined")
    base = np.asarray(base, dtype=np.float64)
    if base.ndim != 3 or base.shape[2] != 3:
        raise ShapeError(f"expected [H,W,3] base, got {base.shape}")
    image = base * L
    if noise > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        image = image + rng.normal(0.0, noise, image.shape)
    return Sample(np.clip(image, 0.0, 1.0), normalize(illuminant))


def white_balance(image, illuminant):
    """Divide each channel by ``L / max(L)`` and clip to ``[0, 1]``."""
    L = _relative(illuminant)
    if np.any(L <= WB_EPS):
        raise ValueError("illuminant has a (near) zero channel")
    return np.clip(np.asarray(image, dtype=np.float64) / L, 0.0, 1.0)


# masks ---------------------------------------------------------------------------


def check_rects(rects, height, width):
    for x, y, w, h in rects:
        if w < 1 or h < 1 or x < 0 or y < 0 or x + w > width or y + h > height:
            raise ValueError(f"mask rectangle {(x, y, w, h)} outside {width}x{height} image")


def mask_array(rects, height, width):
    """Boolean ``[H, W]`` array, True where a pixel is *excluded*."""
    m = np.zeros((height, width), dtype=bool)
    for x, y, w, h in rects:
        m[y : y + h, x : x + w] = True
    return m


def apply_mask(image, rects):
    """Zero the excluded rectangles (copy)."""
    if not rects:
        return image
    out = np.array(image, copy=True)
    out[mask_array(rects, *out.shape[:2])] = 0.0
    return out


# manifests ---------------------------------------------------------------------


@dataclass
class ManifestEntry:
    file: str
    gt: tuple
    mask: list = field(default_factory=list)


@dataclass
class DatasetManifest:
    root: str
    entries: list
    gamma_applied: bool = False

    def __len__(self):
        return len(self.entries)

    def path(self, entry):
        return os.path.join(self.root, entry.file)

    def load(self, entry):
        image = read_ppm(self.path(entry))
        check_rects(entry.mask, *image.shape[:2])
        return Sample(image, normalize(entry.gt), list(entry.mask), entry.file)

    def samples(self):
        return [self.load(e) for e in self.entries]


def write_manifest(path, entries, gamma_applied=False):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# gamma_applied = {str(bool(gamma_applied)).lower()}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for e in entries:
            row = [e.file] + [repr(float(v)) for v in e.gt]
            for rect in e.mask:
                row += [int(v) for v in rect]
            w.writerow(row)


def read_manifest(path, check_files=True):
    """Parse a manifest CSV: ``file,gt_r,gt_g,gt_b[,mask_x,mask_y,mask_w,mask_h]*``.

    A leading ``# gamma_applied = true|false`` comment line is honoured;
    other ``#`` lines are ignored.
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    root = os.path.dirname(os.path.abspath(path))
    gamma_applied = False
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                m = re.match(r"#\s*gamma_applied\s*=\s*(\w+)", line)
                if m:
                    gamma_applied = m.group(1).lower() in ("1", "true", "yes")
                continue
            lines.append(line)
        rows = list(csv.reader(lines))
    if not rows or [c.strip() for c in rows[0][:4]] != MANIFEST_HEADER:
        raise FormatError(f"{path}: header row must start with {','.join(MANIFEST_HEADER)}")
    entries = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < 4 or (len(row) - 4) % 4:
            raise FormatError(f"{path}:{lineno}: expected 4 + 4k columns, got {len(row)}")
        try:
            gt = tuple(float(v) for v in row[1:4])
            ints = [int(v) for v in row[4:]]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        if min(gt) < 0 or max(gt) <= 0:
            raise FormatError(f"{path}:{lineno}: ground truth must be non-negative and not all zero")
        mask = [tuple(ints[i : i + 4]) for i in range(0, len(ints), 4)]
        entry = ManifestEntry(row[0].strip(), gt, mask)
        if check_files and not os.path.isfile(os.path.join(root, entry.file)):
            raise FileNotFoundError(f"{path}:{lineno}: image not found: {entry.file}")
        entries.append(entry)
    return DatasetManifest(root, entries, gamma_applied)


# synthetic scenes --------------------------------------------------------------


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def _surface_color(rng, max_value=0.6):
    # hue drawn from a mixture biased toward foliage greens and sky blues
    u = rng.random()
    if u < 0.35:
        hue = rng.normal(0.30, 0.05)
    elif u < 0.6:
        hue = rng.normal(0.58, 0.04)
    else:
        hue = rng.random()
    rgb = _hsv_to_rgb(hue % 1.0, rng.uniform(0.15, 0.85), 1.0)
    return rgb * rng.uniform(0.15, max_value)


def random_scene(rng, size=64, surface_max=0.6, neutral_min=0.7, patch=(0.25, 0.4)):
    """Procedural reflectance map in ``[0, 0.9]``.

    A background (achromatic or two-colour gradient), 3-8 coloured
    rectangles and 1-2 flat neutral squares whose side is a ``patch``
    fraction of the image. Surfaces other than the neutral patches never
    exceed ``surface_max``, while the patches have
    reflectance in ``[neutral_min, 0.9]``: the brightest surfaces in a
    scene are achromatic, so the illuminant is recoverable from content
    even where the average reflectance is far from grey.
    """
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] / max(size - 1, 1)
    t = np.cos(rng.uniform(0, 2 * np.pi)) * xx + np.sin(rng.uniform(0, 2 * np.pi)) * yy
    t = (t - t.min()) / max(np.ptp(t), 1e-9)
    if rng.random() < 0.4:
        a, b = rng.uniform(0.1, surface_max, 2)
        scene = np.repeat((a + (b - a) * t)[..., None], 3, axis=2)
    else:
        c0, c1 = _surface_color(rng, surface_max), _surface_color(rng, surface_max)
        scene = c0 + (c1 - c0) * t[..., None]
    for _ in range(int(rng.integers(3, 9))):
        rh, rw = (int(v) for v in rng.integers(size // 8, size // 2 + 1, 2))
        y0, x0 = int(rng.integers(0, h - rh + 1)), int(rng.integers(0, w - rw + 1))
        scene[y0 : y0 + rh, x0 : x0 + rw] = _surface_color(rng, surface_max)
    for _ in range(int(rng.integers(1, 3))):
        ph = int(rng.integers(max(1, int(size * patch[0])), max(1, int(size * patch[1])) + 1))
        y0, x0 = int(rng.integers(0, h - ph + 1)), int(rng.integers(0, w - ph + 1))
        scene[y0 : y0 + ph, x0 : x0 + ph] = rng.uniform(neutral_min, 0.9)
    return np.clip(scene, 0.0, 0.9)


def random_illuminant(rng, low=0.4, high=1.0):
    return normalize(rng.uniform(low, high, 3))


def generate_synthetic_dataset(n, root, rng=None, size=64, noise=0.0, **scene_kw):
    """Write ``n`` rendered scenes as 16-bit PPMs plus ``manifest.csv``.

    Layout: ``root/images/00000.ppm ...`` and ``root/manifest.csv``. Returns
    the manifest.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = rng if rng is not None else Rng(0)
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    entries = []
    width = max(5, len(str(n - 1)))
    for i in range(n):
        base = random_scene(rng, size, **scene_kw)
        L = random_illuminant(rng)
        sample = synthesize(base, L, rng, noise)
        name = f"images/{i:0{width}d}.ppm"
        write_ppm(os.path.join(root, name), sample.image)
        entries.append(ManifestEntry(name, tuple(float(v) for v in sample.gt)))
    path = os.path.join(root, MANIFEST_NAME)
    write_manifest(path, entries)
    return read_manifest(path)
