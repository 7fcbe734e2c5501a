"""Angular error, summary statistics and the grey-world baseline."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .data import mask_array, normalize
from .errors import DegenerateEstimateError

STAT_NAMES = ("mean", "median", "trimean", "best25", "worst25", "count")


def angular_error(gt, est):
    """Angle in degrees between illuminant vectors (works row-wise on ``[..., 3]``)."""
    gt = np.asarray(gt, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    ng = np.linalg.norm(gt, axis=-1)
    ne = np.linalg.norm(est, axis=-1)
    if np.any(ng == 0) or np.any(ne == 0):
        raise ValueError("angular error is undefined for a zero vector")
    # atan2 of |a x b| and a.b keeps precision near 0 and 180 degrees, where
    # arccos of a clamped cosine loses about half the significant digits
    a = gt / ng[..., None]
    b = est / ne[..., None]
    sin = np.linalg.norm(np.cross(a, b), axis=-1)
    cos = np.sum(a * b, axis=-1)
    return np.degrees(np.arctan2(sin, cos))


@dataclass
class MetricsReport:
    errors: np.ndarray
    mean: float
    median: float
    trimean: float
    best25: float
    worst25: float

    @property
    def count(self):
        return len(self.errors)

    def stats(self):
        return {name: getattr(self, name) for name in STAT_NAMES}

    def write_summary(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["stat", "value"])
            for name, value in self.stats().items():
                w.writerow([name, value if name == "count" else repr(float(value))])


def summarize(errors):
    """Mean, median, trimean and the best/worst quarter means.

    Quartiles for the trimean use linear interpolation between order
    statistics; the best/worst quarters hold ``ceil(n/4)`` samples.
    """
    e = np.sort(np.asarray(errors, dtype=np.float64).ravel())
    n = e.size
    if n == 0:
        raise ValueError("cannot summarize an empty error list")
    q1, med, q3 = np.quantile(e, [0.25, 0.5, 0.75], method="linear")
    k = math.ceil(n / 4)
    return MetricsReport(
        errors=np.asarray(errors, dtype=np.float64).ravel(),
        mean=float(e.mean()),
        median=float(med),
        trimean=float((q1 + 2 * med + q3) / 4),
        best25=float(e[:k].mean()),
        worst25=float(e[-k:].mean()),
    )


def grey_world(image, mask=None):
    """Normalized per-channel mean over pixels not covered by ``mask`` rectangles."""
    image = np.asarray(image, dtype=np.float64)
    if mask:
        keep = ~mask_array(mask, *image.shape[:2])
        if not keep.any():
            raise ValueError("every pixel is masked")
        pixels = image[keep]
    else:
        pixels = image.reshape(-1, 3)
    mean = pixels.mean(axis=0)
    if np.linalg.norm(mean) <= 1e-12:
        raise DegenerateEstimateError("grey-world estimate of a black image")
    return normalize(mean)


def write_per_sample(path, ids, gts, ests):
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 3)
    ests = np.asarray(ests, dtype=np.float64).reshape(-1, 3)
    errs = angular_error(gts, ests)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "gt_r", "gt_g", "gt_b", "est_r", "est_g", "est_b", "angular_error_deg"])
        for sid, g, e, err in zip(ids, gts, ests, errs):
            w.writerow([sid, *(repr(float(v)) for v in g), *(repr(float(v)) for v in e), repr(float(err))])
    return errs


def read_per_sample(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [r["sample_id"] for r in rows], np.array([float(r["angular_error_deg"]) for r in rows])
