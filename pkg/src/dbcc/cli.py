"""Command-line entry point: ``dbcc {train,eval,wb,count,synth}``.

Configuration comes from an optional ``key = value`` file (``--config``)
overridden by flags of the same name (``batch_size`` <-> ``--batch-size``).
Exit codes: 0 ok, 2 input error, 3 degenerate estimate, 1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import fields

import numpy as np

from . import network as net
from . import plotting
from .data import Sample, generate_synthetic_dataset, read_manifest, read_ppm, white_balance, write_ppm
from .errors import ConfigError, DegenerateEstimateError, FormatError, ShapeError
from .metrics import angular_error, grey_world, summarize, write_per_sample
from .tensor import Rng
from .train import DEFAULT_GAMMA, TrainConfig, evaluate, kfold_split, prepare, resize_bilinear, train

log = logging.getLogger("dbcc")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_DEGENERATE = 0, 1, 2, 3

MODEL_KEYS = [f.name for f in fields(net.ModelConfig)]
TRAIN_KEYS = [f.name for f in fields(TrainConfig)]
DATA_KEYS = ["manifest", "val_manifest", "val_fraction", "run_root", "run_dir"]
ALL_KEYS = MODEL_KEYS + TRAIN_KEYS + DATA_KEYS
DATA_DEFAULTS = {"manifest": None, "val_manifest": None, "val_fraction": 0.2, "run_root": "runs", "run_dir": None}

_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


class InputError(Exception):
    """Bad user input; reported with exit code 2."""


# config --------------------------------------------------------------------


def _parse_bool(text):
    try:
        return _BOOL[str(text).strip().lower()]
    except KeyError:
        raise ConfigError(f"expected true/false, got {text!r}") from None


def _parse_size(text):
    parts = str(text).lower().replace(",", "x").split("x")
    try:
        vals = [int(p) for p in parts if p.strip()]
    except ValueError:
        raise ConfigError(f"bad input size {text!r}; use e.g. 64 or 64x64") from None
    if len(vals) == 1:
        vals *= 2
    if len(vals) != 2:
        raise ConfigError(f"bad input size {text!r}")
    return tuple(vals)


def _optional(conv):
    def parse(text):
        return None if str(text).strip().lower() in ("none", "") else conv(text)

    return parse


_PARSERS = {
    "input_size": _parse_size,
    "stem_filters": int,
    "num_blocks": int,
    "width_factor": _optional(int),
    "cross_terms": _parse_bool,
    "groups": int,
    "lr": float,
    "batch_size": int,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "epochs": int,
    "patience": int,
    "seed": int,
    "crop": _parse_bool,
    "hflip": _parse_bool,
    "vflip": _parse_bool,
    "crop_min": float,
    "gamma": float,
    "clip_norm": _optional(float),
    "val_fraction": float,
    "manifest": _optional(str),
    "val_manifest": _optional(str),
    "run_dir": _optional(str),
}


def parse_config_text(text, source="<config>"):
    """``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in ALL_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def resolve_config(file_values, overrides):
    """Typed dict of every known key: defaults < config file < flags."""
    values = {**net.ModelConfig().to_dict(), **TrainConfig().__dict__, **DATA_DEFAULTS}
    values["input_size"] = tuple(values["input_size"])
    for source in (file_values, overrides):
        for key, text in source.items():
            if text is None:
                continue
            parser = _PARSERS.get(key, str)
            try:
                values[key] = parser(text) if isinstance(text, str) else text
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
    return values


def model_config(values):
    return net.ModelConfig(**{k: values[k] for k in MODEL_KEYS})


def train_config(values):
    return TrainConfig(**{k: values[k] for k in TRAIN_KEYS})


def format_config(values):
    """Canonical echo: one ``key = value`` per line in a fixed key order.

    ``run_dir`` is left out so re-running an echoed config starts a fresh
    directory instead of overwriting the one it came from.
    """
    lines = []
    for key in ALL_KEYS:
        if key == "run_dir":
            continue
        v = values[key]
        if key == "input_size":
            v = f"{v[0]}x{v[1]}"
        elif isinstance(v, bool):
            v = str(v).lower()
        elif v is None:
            v = "none"
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def _load_values(args):
    file_values = {}
    if getattr(args, "config", None):
        if not os.path.isfile(args.config):
            raise InputError(f"config file not found: {args.config}")
        with open(args.config, encoding="utf-8") as fh:
            file_values = parse_config_text(fh.read(), args.config)
    overrides = {k: getattr(args, k) for k in ALL_KEYS if getattr(args, k, None) is not None}
    return resolve_config(file_values, overrides)


def _add_config_flags(p, keys):
    p.add_argument("--config", help="key = value configuration file")
    for key in keys:
        p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="V")


# helpers -----------------------------------------------------------------------


def _atomic_text(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def make_run_dir(values, prefix=""):
    if values.get("run_dir"):
        path = values["run_dir"]
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        base = os.path.join(values["run_root"], f"{prefix}{stamp}-seed{values['seed']}")
        path, n = base, 1
        while os.path.exists(path):
            n += 1
            path = f"{base}-{n}"
    os.makedirs(path, exist_ok=True)
    return path


def _load_samples(path):
    manifest = read_manifest(path)
    if len(manifest) == 0:
        raise InputError(f"manifest has no samples: {path}")
    return manifest, manifest.samples()


def _input_gamma(values, manifest):
    # a manifest that says its images are already gamma encoded is fed as is
    return 1.0 if manifest.gamma_applied else values["gamma"]


def _split(n, fraction, seed):
    if not 0 < fraction < 1:
        raise ConfigError("val_fraction must be in (0, 1)")
    n_val = max(1, int(round(n * fraction)))
    if n_val >= n:
        raise InputError(f"cannot hold out {n_val} of {n} samples for validation")
    perm = Rng(seed, stream=11).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _write_report(out_dir, prefix, ids, gts, ests, images=None):
    errs = angular_error(gts, ests)
    report = summarize(errs)
    write_per_sample(os.path.join(out_dir, f"{prefix}per_sample.csv"), ids, gts, ests)
    report.write_summary(os.path.join(out_dir, f"{prefix}summary.csv"))
    gw = None
    if images is not None:
        gw = angular_error(gts, np.stack([grey_world(img, mask) for img, mask in images]))
    plotting.error_histogram(errs, os.path.join(out_dir, f"{prefix}errors.png"), baseline=gw)
    return report


def _print_report(report, label):
    stats = report.stats()
    print(f"{label}: " + "  ".join(f"{k}={stats[k]:.3f}" for k in ("mean", "median", "trimean", "best25", "worst25")))


# commands ------------------------------------------------------------------------


def cmd_train(args):
    values = _load_values(args)
    if not values["manifest"]:
        raise InputError("train needs --manifest (or 'manifest = ...' in the config)")
    mcfg, tcfg = model_config(values), train_config(values)
    manifest, samples = _load_samples(values["manifest"])
    tcfg.gamma = _input_gamma(values, manifest)
    if values["val_manifest"]:
        _, val = _load_samples(values["val_manifest"])
        tr_samples = samples
    else:
        tr_idx, va_idx = _split(len(samples), values["val_fraction"], tcfg.seed)
        tr_samples = [samples[i] for i in tr_idx]
        val = [samples[i] for i in va_idx]
    run = make_run_dir(values)
    _atomic_text(os.path.join(run, "config.txt"), format_config(values))
    model = net.build(mcfg, Rng(tcfg.seed, stream=1))
    log_path = os.path.join(run, "train_log.tsv")
    with open(log_path + ".tmp", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch\ttrain_mse\tval_mean_deg\n")
        result = train(model, tr_samples, val, tcfg, log_fh=fh)
    os.replace(log_path + ".tmp", log_path)
    net.save(result.model, os.path.join(run, "model.dbcc"))
    if result.history:
        plotting.loss_curve(result.history, os.path.join(run, "loss_curve.png"))
    ests, _ = evaluate(result.model, val, tcfg.gamma)
    report = _write_report(
        run, "val_", [s.name for s in val], np.stack([s.gt for s in val]), ests, [(s.image, s.mask) for s in val]
    )
    print(run)
    _print_report(report, f"validation (best epoch {result.best_epoch})")
    return EXIT_OK


def cmd_eval(args):
    values = _load_values(args)
    if not values["manifest"]:
        raise InputError("eval needs --manifest")
    manifest, samples = _load_samples(values["manifest"])
    gamma_value = _input_gamma(values, manifest)
    ids = [s.name for s in samples]
    gts = np.stack([s.gt for s in samples])
    if args.folds:
        mcfg, tcfg = model_config(values), train_config(values)
        tcfg.gamma = gamma_value
        ests = np.zeros_like(gts)
        rows = []
        for i, (tr_idx, te_idx) in enumerate(kfold_split(len(samples), args.folds, tcfg.seed)):
            test = [samples[j] for j in te_idx]
            model = net.build(mcfg, Rng(tcfg.seed, stream=1))
            result = train(model, [samples[j] for j in tr_idx], test, tcfg)
            ests[te_idx], errs = evaluate(result.model, test, gamma_value)
            rows.append((i, len(test), float(np.mean(errs)), result.best_epoch))
            log.info("fold %d: mean %.3f deg (best epoch %d)", i, rows[-1][2], result.best_epoch)
    else:
        if not args.checkpoint:
            raise InputError("eval needs --checkpoint or --folds")
        model = net.load(args.checkpoint)
        ests, _ = evaluate(model, samples, gamma_value)
        rows = None
    out = args.out or make_run_dir(values, prefix="eval-")
    os.makedirs(out, exist_ok=True)
    _atomic_text(os.path.join(out, "config.txt"), format_config(values))
    if rows is not None:
        text = "fold,count,mean_deg,best_epoch\n" + "".join(f"{i},{n},{m!r},{b}\n" for i, n, m, b in rows)
        _atomic_text(os.path.join(out, "folds.csv"), text)
    report = _write_report(out, "", ids, gts, ests, [(s.image, s.mask) for s in samples])
    print(out)
    _print_report(report, "evaluation")
    return EXIT_OK


def cmd_wb(args):
    model = net.load(args.checkpoint)
    image = read_ppm(args.image)
    h, w = model.config.input_size
    # the illuminant is global, so the estimate is taken at the trained resolution
    small = resize_bilinear(image, h, w) if image.shape[:2] != (h, w) else image
    x = prepare(Sample(small, np.ones(3) / np.sqrt(3)), args.gamma)
    est = model.forward(x.astype(model.dtype)).value.reshape(3).astype(np.float64)
    print(" ".join(f"{v:.6f}" for v in est))
    if np.any(est <= 1e-6):
        raise DegenerateEstimateError(f"estimate {est.tolist()} has a non-positive channel; cannot white balance")
    if args.gt is not None:
        print(f"angular_error_deg {float(angular_error(np.array(args.gt), est)):.4f}")
    write_ppm(args.out, white_balance(image, est))
    return EXIT_OK


def cmd_count(args):
    size = _parse_size(args.count_size)
    values = _load_values(args)
    chosen = values["variant"]
    rows = []
    for variant in [chosen] + [v for v in ("design-a", "design-b", "baseline") if v != chosen]:
        cfg = model_config({**values, "variant": variant})
        rows.append((variant, net.count_params(cfg), net.count_flops(cfg, size)))
    print(f"variant,params,flops_at_{size[0]}x{size[1]}")
    for variant, p, f in rows:
        print(f"{variant},{p},{f}")
    return EXIT_OK


def cmd_synth(args):
    if args.n < 1:
        raise InputError("n must be >= 1")
    manifest = generate_synthetic_dataset(args.n, args.out, Rng(args.seed), size=args.size, noise=args.noise)
    print(os.path.join(manifest.root, "manifest.csv"))
    return EXIT_OK


# parser ----------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="dbcc", description="Illuminant estimation with cross-branch regularization.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on a manifest")
    _add_config_flags(t, ALL_KEYS)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint, or k-fold train and evaluate")
    _add_config_flags(e, ALL_KEYS)
    e.add_argument("--checkpoint")
    e.add_argument("--folds", type=int, default=0)
    e.add_argument("--out", help="output directory (default: a new run directory)")
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("wb", help="estimate the illuminant of one PPM and white balance it")
    w.add_argument("checkpoint")
    w.add_argument("image")
    w.add_argument("out")
    w.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    w.add_argument("--gt", type=float, nargs=3, metavar=("R", "G", "B"), help="known illuminant, prints the error")
    w.set_defaults(func=cmd_wb)

    c = sub.add_parser("count", help="parameter and flop counts")
    _add_config_flags(c, [k for k in MODEL_KEYS if k != "input_size"])
    c.add_argument("--input-size", dest="count_size", default="224", help="e.g. 224 or 224x224")
    c.set_defaults(func=cmd_count)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("n", type=int)
    s.add_argument("out")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--noise", type=float, default=0.0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DegenerateEstimateError as exc:
        print(f"error: degenerate estimate: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (InputError, ConfigError, FormatError, ShapeError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - last-resort report for the operator
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
