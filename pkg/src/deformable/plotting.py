"""Report figures.  Everything renders off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}

# no software/date stamps, so the same inputs give the same bytes
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_META, bbox_inches="tight")
    plt.close(fig)
    return path


def error_histogram_figure(lo, hi, counts, path, title="rotation error") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        lo, hi, counts = np.asarray(lo), np.asarray(hi), np.asarray(counts)
        total = max(int(counts.sum()), 1)
        ax.bar(lo, counts / total, width=hi - lo if len(lo) else 1.0, align="edge",
               color="0.35", edgecolor="white", linewidth=0.5)
        ax.set_xlabel("error (degrees)")
        ax.set_ylabel("fraction of examples")
        ax.set_title(title)
        if len(hi):
            ax.set_xlim(0, max(float(hi[-1]), 180.0))
        return _save(fig, path)


def image_grid_figure(images, path, titles=None, ncols: int = 10) -> Path:
    """Grey-scale tiles, e.g. templates next to masks."""
    images = [np.asarray(im).reshape(np.asarray(im).shape[-2:]) if np.asarray(im).ndim == 3 else np.asarray(im)
              for im in images]
    n = max(len(images), 1)
    ncols = min(ncols, n)
    nrows = -(-n // ncols)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nrows, ncols, figsize=(1.0 * ncols, 1.1 * nrows), squeeze=False)
        for k, ax in enumerate(axes.ravel()):
            ax.axis("off")
            if k < len(images):
                ax.imshow(images[k], cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
                if titles is not None:
                    ax.set_title(str(titles[k]))
        return _save(fig, path)


def history_figure(history, path) -> Path:
    """Loss and training error per epoch, one line per phase."""
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(6.5, 2.6))
        phases = sorted({rec.get("phase", "") for rec in history})
        for phase in phases:
            recs = [r for r in history if r.get("phase", "") == phase]
            ep = [r["epoch"] for r in recs]
            a1.plot(ep, [r["loss"] for r in recs], marker=".", label=phase or None)
            a2.plot(ep, [r["train_error"] for r in recs], marker=".", label=phase or None)
        a1.set_xlabel("epoch")
        a1.set_ylabel("loss")
        a2.set_xlabel("epoch")
        a2.set_ylabel("training error")
        if len(phases) > 1:
            a2.legend(frameon=False)
        return _save(fig, path)
