"""End-to-end optimization: MSE on unit illuminants, Adam, augmentation, folds."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Sample, apply_mask, gamma
from .errors import NonFiniteError
from .metrics import angular_error
from .tensor import Rng

log = logging.getLogger(__name__)

DEFAULT_GAMMA = 1 / 2.2


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    patience: int = 20
    seed: int = 0
    crop: bool = True
    hflip: bool = True
    vflip: bool = True
    crop_min: float = 0.6
    gamma: float = DEFAULT_GAMMA
    clip_norm: float | None = 10.0
    lr_schedule: str = "constant"

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 < self.crop_min <= 1:
            raise ValueError("crop_min must be in (0, 1]")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, epoch):
        """Learning rate for a 1-based epoch; ``cosine`` anneals to zero at ``epochs``."""
        if self.lr_schedule == "constant" or self.epochs <= 1:
            return self.lr
        return 0.5 * self.lr * (1.0 + np.cos(np.pi * (epoch - 1) / self.epochs))


# loss and optimizer ----------------------------------------------------------


def illuminant_mse(est, gt, tol=1e-4):
    """``(1/3) * sum((est - gt)^2)`` for unit-norm RGB triples."""
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    for name, v in (("estimate", est), ("ground truth", gt)):
        if np.any(np.abs(np.linalg.norm(v, axis=-1) - 1.0) > tol):
            raise ValueError(f"{name} is not unit-normalized")
    return float(np.mean((est - gt) ** 2))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(state, params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns a new ``{name: array}`` dict."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("adam_step", f"gradient of {name!r} is not finite at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1 - beta2) * (g * g)
        step = (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
        out[name] = p - step
    return out


def clip_by_global_norm(grads, max_norm):
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if total <= max_norm or total == 0:
        return grads, total
    f = max_norm / total
    return {k: (g * f).astype(g.dtype) for k, g in grads.items()}, total


# augmentation ----------------------------------------------------------------


def resize_bilinear(image, out_h, out_w):
    """Bilinear resampling with half-pixel centres (same size returns a copy)."""
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return np.array(image, copy=True)

    def coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bot = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def _transform_rects(rects, x0, y0, side, out, hflip, vflip):
    s = out / side
    res = []
    for rx, ry, rw, rh in rects:
        ax, ay = max(rx, x0), max(ry, y0)
        bx, by = min(rx + rw, x0 + side), min(ry + rh, y0 + side)
        if bx <= ax or by <= ay:
            continue
        nx0, ny0 = int(np.floor((ax - x0) * s)), int(np.floor((ay - y0) * s))
        nx1, ny1 = int(np.ceil((bx - x0) * s)), int(np.ceil((by - y0) * s))
        nx1, ny1 = min(nx1, out), min(ny1, out)
        if hflip:
            nx0, nx1 = out - nx1, out - nx0
        if vflip:
            ny0, ny1 = out - ny1, out - ny0
        res.append((nx0, ny0, nx1 - nx0, ny1 - ny0))
    return res


def augment(sample, rng, out_size=None, crop=True, hflip=True, vflip=True, crop_min=0.6):
    """Random square crop (``crop_min``..100% of the short side) resized to
    ``out_size``, then independent 50% horizontal/vertical flips.

    The illuminant is a global property and is left untouched; mask
    rectangles follow the geometric transform.
    """
    image = sample.image
    h, w = image.shape[:2]
    short = min(h, w)
    out = out_size if out_size is not None else short
    if crop:
        side = int(round(rng.uniform(crop_min, 1.0) * short))
        side = max(1, min(side, short))
    else:
        side = short
    if side > h or side > w:
        raise ValueError("crop larger than image")
    y0 = int(rng.integers(0, h - side + 1))
    x0 = int(rng.integers(0, w - side + 1))
    img = resize_bilinear(image[y0 : y0 + side, x0 : x0 + side], out, out)
    do_h = bool(hflip and rng.random() < 0.5)
    do_v = bool(vflip and rng.random() < 0.5)
    if do_h:
        img = img[:, ::-1]
    if do_v:
        img = img[::-1]
    rects = _transform_rects(sample.mask, x0, y0, side, out, do_h, do_v)
    return Sample(np.ascontiguousarray(img), sample.gt, rects, sample.name)


def prepare(sample, gamma_value=DEFAULT_GAMMA):
    """Network input for a sample: masked pixels zeroed, then gamma encoded."""
    img = apply_mask(sample.image, sample.mask)
    if gamma_value != 1.0:
        img = gamma(img, gamma_value)
    return img


# folds ------------------------------------------------------------------------


def kfold_split(n, k=3, seed=0):
    """Shuffled partition of ``range(n)`` into ``k`` folds.

    Returns ``[(train_idx, test_idx), ...]``; test folds are disjoint,
    cover every index and differ in size by at most one.
    """
    n = n if isinstance(n, int) else len(n)
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"cannot split {n} samples into {k} folds")
    perm = Rng(seed, stream=7).permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i in range(k):
        test = np.sort(folds[i])
        train = np.sort(np.concatenate([folds[j] for j in range(k) if j != i]))
        out.append((train, test))
    return out


# training loop ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: object
    history: list
    best_epoch: int
    best_val: float
    degenerate: int = 0


def evaluate(model, samples, gamma_value=DEFAULT_GAMMA, batch_size=64):
    """Per-sample estimates ``(N, 3)`` and angular errors in degrees."""
    if not samples:
        raise ValueError("no samples to evaluate")
    images = np.stack([prepare(s, gamma_value) for s in samples])
    ests = model.predict(images, batch_size=batch_size, fallback=True)
    gts = np.stack([s.gt for s in samples])
    return ests, angular_error(gts, ests)


def loss_and_grads(model, images, gts, params=None):
    """Batch MSE and ``{name: gradient}`` for the current parameters."""
    pv = model.param_vars() if params is None else params
    est = model.forward(images, pv, fallback=True)
    n = images.shape[0] if images.ndim == 4 else 1
    loss = ad.mse_loss(est, np.asarray(gts, dtype=model.dtype).reshape(est.shape))
    leaves = ad.backward(loss)
    grads = {name: leaves.get(v, np.zeros_like(v.value)) for name, v in pv.items()}
    return float(loss.value), grads, est.info.get("degenerate", 0), n


def train(model, train_samples, val_samples, config, log_fh=None, on_epoch=None):
    """Optimize ``model`` (in place copy) and return the best-validation model.

    One tab-separated line ``epoch, train_mse, val_mean_deg`` is written to
    ``log_fh`` per epoch. Training stops after ``config.patience`` epochs
    without validation improvement.
    """
    if not train_samples:
        raise ValueError("training set is empty")
    cfg = config
    root = Rng(cfg.seed)
    order_rng, aug_rng = root.spawn(1), root.spawn(2)
    out_size = model.config.input_size[0]
    params = dict(model.params)
    state = AdamState()
    current = model.copy()
    best = (np.inf, 0, current.copy())
    history = []
    degenerate = 0
    stale = 0
    val_err = float("nan")
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        perm = order_rng.permutation(len(train_samples))
        total, seen = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            batch = [train_samples[i] for i in perm[start : start + cfg.batch_size]]
            if cfg.crop or cfg.hflip or cfg.vflip:
                batch = [
                    augment(s, aug_rng, out_size, cfg.crop, cfg.hflip, cfg.vflip, cfg.crop_min) for s in batch
                ]
            images = np.stack([prepare(s, cfg.gamma) for s in batch]).astype(current.dtype)
            gts = np.stack([s.gt for s in batch])
            current.params = params
            loss, grads, ndeg, n = loss_and_grads(current, images, gts)
            degenerate += ndeg
            if cfg.clip_norm:
                grads, _ = clip_by_global_norm(grads, cfg.clip_norm)
            params = adam_step(state, params, grads, lr, cfg.beta1, cfg.beta2, cfg.eps)
            total += loss * n
            seen += n
        current.params = params
        train_mse = total / seen
        if val_samples:
            _, errs = evaluate(current, val_samples, cfg.gamma)
            val_err = float(np.mean(errs))
        history.append((epoch, train_mse, val_err))
        if log_fh is not None:
            log_fh.write(f"{epoch}\t{train_mse:.8g}\t{val_err:.6g}\n")
            log_fh.flush()
        if on_epoch is not None:
            on_epoch(epoch, train_mse, val_err)
        score = val_err if val_samples else train_mse
        if score < best[0]:
            best = (score, epoch, current.copy())
            stale = 0
        else:
            stale += 1
            if val_samples and stale >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best[1])
                break
    if degenerate:
        log.warning("%d degenerate estimates replaced by the neutral illuminant during training", degenerate)
    if not history:
        return TrainResult(model.copy(), [], 0, float("nan"), 0)
    return TrainResult(best[2], history, best[1], float(best[0]), degenerate)
