"""PNG figures written next to the CSV reports (headless Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
}


def _save(fig, path):
    fig.tight_layout()
    # no Software tag, so identical inputs give identical PNG bytes
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curve(history, path):
    """Training MSE (left axis) and validation angular error (right axis) per epoch."""
    if not history:
        raise ValueError("empty training history")
    epochs = [h[0] for h in history]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot(epochs, [h[1] for h in history], color="tab:blue", label="train MSE")
        ax.set_xlabel("epoch")
        ax.set_ylabel("train MSE", color="tab:blue")
        ax.set_yscale("log")
        val = np.array([h[2] for h in history], dtype=float)
        if np.isfinite(val).any():
            ax2 = ax.twinx()
            ax2.plot(epochs, val, color="tab:orange", label="val error")
            ax2.set_ylabel("val mean angular error (deg)", color="tab:orange")
            ax2.grid(False)
        return _save(fig, path)


def error_histogram(errors, path, baseline=None, labels=("model", "grey-world")):
    """Histogram of per-sample angular errors, optionally overlaid with a baseline's."""
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise ValueError("no errors to plot")
    top = errors.max() if baseline is None else max(errors.max(), np.max(baseline))
    bins = np.linspace(0.0, max(top, 1e-3) * 1.02, 31)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.hist(errors, bins=bins, alpha=0.75, label=f"{labels[0]} (mean {errors.mean():.2f})")
        if baseline is not None:
            b = np.asarray(baseline, dtype=float)
            ax.hist(b, bins=bins, histtype="step", lw=1.5, label=f"{labels[1]} (mean {b.mean():.2f})")
        ax.set_xlabel("angular error (deg)")
        ax.set_ylabel("samples")
        ax.legend(frameon=False)
        return _save(fig, path)
