"""Classification error, rotation-error metrics, histograms and reports.

Angles are radians throughout; ``mod`` is the non-negative remainder.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import io

HALF_PI = np.pi / 2


def classification_error(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError("prediction / label length mismatch")
    return float(np.mean(preds != labels)) if preds.size else 0.0


def _mod(x, period):
    # np.mod can round a tiny negative operand up to ``period`` itself
    r = np.mod(x, period)
    return np.where(r >= period, 0.0, r)


def rot_err_henriques(alpha, alpha_hat):
    """``pi/2 - | |a mod pi/2 - b mod pi/2| - pi/2 |``, in [0, pi/2]."""
    a = _mod(alpha, HALF_PI)
    b = _mod(alpha_hat, HALF_PI)
    return HALF_PI - np.abs(np.abs(a - b) - HALF_PI)


def rot_err_full(alpha, alpha_hat):
    """Distance on the circle: ``pi - | |a - b| mod 2pi - pi |``, in [0, pi]."""
    d = _mod(np.abs(np.asarray(alpha) - np.asarray(alpha_hat)), 2 * np.pi)
    return np.pi - np.abs(d - np.pi)


def rot_err_half(alpha, alpha_hat):
    """Orientation distance ignoring front/rear: ``pi/2 - | |a - b| mod pi - pi/2 |``."""
    d = _mod(np.abs(np.asarray(alpha) - np.asarray(alpha_hat)), np.pi)
    return HALF_PI - np.abs(d - HALF_PI)


METRICS = {"full": rot_err_full, "half": rot_err_half, "henriques": rot_err_henriques}


def error_histogram(errors, bin_width):
    """Counts in fixed-width bins ``[k w, (k+1) w)`` starting at zero.

    Returns ``(lo, hi, counts)``; all three are empty for empty input.
    """
    e = np.asarray(errors, dtype=np.float64).ravel()
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    if e.size == 0:
        return np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int64)
    if np.any(e < 0):
        raise ValueError("errors must be non-negative")
    k = np.floor(e / bin_width).astype(np.int64)
    counts = np.bincount(k)
    lo = np.arange(len(counts)) * bin_width
    return lo, lo + bin_width, counts


def predicted_angles_deg(poses) -> np.ndarray:
    """Rotation latents that undo a planted rotation, read back as the planted angle."""
    return np.mod(-np.degrees(np.asarray(poses, dtype=np.float64).reshape(len(poses), -1)[:, 0]), 360.0)


def rotation_report(alpha_deg, alpha_hat_deg, metric: str = "full") -> dict:
    """Per-example errors (degrees) plus summary fractions."""
    fn = METRICS[metric]
    err = np.degrees(fn(np.radians(alpha_deg), np.radians(alpha_hat_deg)))
    return {
        "errors_deg": err,
        "mean_deg": float(err.mean()) if err.size else 0.0,
        "frac_below_15": float(np.mean(err < 15)) if err.size else 0.0,
        "frac_above_150": float(np.mean(err > 150)) if err.size else 0.0,
    }


def write_report(out_dir, alpha_deg, alpha_hat_deg, metric: str = "full", bin_width: float = 15.0,
                 images=None, prefix: str = "rotation", figures: bool = True) -> dict:
    """Write the per-example error CSV, the histogram CSV and their figure.

    ``images`` (optional) are dumped as PGMs.  Returns the summary of
    :func:`rotation_report` plus the paths written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    alpha_deg = np.asarray(alpha_deg, dtype=np.float64)
    alpha_hat_deg = np.asarray(alpha_hat_deg, dtype=np.float64)
    rep = rotation_report(alpha_deg, alpha_hat_deg, metric)
    lo, hi, counts = error_histogram(rep["errors_deg"], bin_width)
    paths = [out / f"{prefix}_errors.csv", out / f"{prefix}_histogram.csv"]
    io.write_rotation_errors(paths[0], alpha_deg, alpha_hat_deg, rep["errors_deg"])
    io.write_histogram(paths[1], lo, hi, counts)
    if images is not None:
        for i, img in enumerate(images):
            paths.append(out / f"{prefix}_{i:04d}.pgm")
            io.write_pgm(paths[-1], img)
    if figures:
        from . import plotting

        paths.append(plotting.error_histogram_figure(lo, hi, counts, out / f"{prefix}_histogram.png",
                                                     title=f"rotation error ({metric})"))
    rep["paths"] = paths
    return rep
