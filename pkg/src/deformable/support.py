"""Pose-aligned class templates, support masks and clutter removal.

Templates are means of training examples warped to the reference pose by
their own class's optimal latent.  Thresholding a template gives a binary
support mask; masking an aligned image removes clutter outside the object.
The stacked classifier looks at all C aligned-and-masked versions at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import io
from . import latent as L
from . import net
from . import warp as W
from .data import InsufficientDataError, LabeledDataset

DEFAULT_TAU = 0.25


@dataclass
class ClassTemplate:
    """Per-class mean aligned images ``(C, ch, H, W)`` and sample counts."""

    means: np.ndarray
    counts: np.ndarray

    def __len__(self):
        return len(self.means)


@dataclass
class SupportMask:
    """Binary masks ``(C, H, W)`` (values 0/1) and the threshold used."""

    masks: np.ndarray
    tau: float

    def __len__(self):
        return len(self.masks)


def class_means(images, labels, n_classes: int) -> ClassTemplate:
    """Per-class means in fixed class then index order."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    means = np.zeros((n_classes,) + images.shape[1:])
    counts = np.zeros(n_classes, dtype=np.int64)
    for j in range(n_classes):
        sel = images[labels == j]
        if len(sel) == 0:
            raise InsufficientDataError(f"class {j} has no examples for its template")
        means[j] = sel.sum(axis=0) / len(sel)
        counts[j] = len(sel)
    return ClassTemplate(np.clip(means, 0.0, 1.0), counts)


def align_to_label(model, ds: LabeledDataset, cfg: L.LatentSearchConfig) -> np.ndarray:
    """Every example warped to the reference pose of its true class."""
    z, _ = L.label_latents(model, ds.images, ds.labels, cfg)
    return np.clip(W.warp(ds.images, cfg.family, z), 0.0, 1.0)


def build_templates(model, ds: LabeledDataset, cfg: L.LatentSearchConfig) -> ClassTemplate:
    return class_means(align_to_label(model, ds, cfg), ds.labels, model.n_classes)


def sharpness(template) -> float:
    """Mean ``|2M - 1|`` over the bounding box of the template's nonzero mass."""
    m = np.asarray(template, dtype=np.float64)
    m = m.max(axis=0) if m.ndim == 3 else m
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if rows.size == 0:
        return 0.0
    box = m[rows[0]: rows[-1] + 1, cols[0]: cols[-1] + 1]
    return float(np.mean(np.abs(2 * box - 1)))


_DILATE = np.ones((3, 3), dtype=bool)


def make_mask(template, tau: float = DEFAULT_TAU) -> np.ndarray:
    """1 where ``template > 0`` and ``template >= tau * max``, grown by one pixel."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    t = np.asarray(template, dtype=np.float64)
    t = t.max(axis=0) if t.ndim == 3 else t
    keep = (t > 0) & (t >= tau * t.max())
    return ndimage.binary_dilation(keep, structure=_DILATE).astype(np.float32)


def make_masks(templates: ClassTemplate, tau: float = DEFAULT_TAU) -> SupportMask:
    return SupportMask(np.stack([make_mask(t, tau) for t in templates.means]), tau)


def declutter(img, z, mask, family: W.Family = W.ROTATION) -> np.ndarray:
    """Warp ``img`` by ``z`` to the reference pose and keep only the mask."""
    return W.warp(img, family, z) * np.asarray(mask, dtype=np.float32)


def _masked_views(model, images, masks: SupportMask, cfg: L.LatentSearchConfig, latents=None):
    """Aligned-and-masked views ``(N, C, ch, H, W)`` plus the latents used.

    ``latents`` is an optional precomputed ClassLatentResult for ``images``.
    """
    res = L.per_class_latents(model, images, cfg) if latents is None else latents
    views = res.warped(images) * masks.masks[None, :, None].astype(np.float32)
    return views, res


def _check_masks(model, masks: SupportMask):
    if len(masks) != model.n_classes:
        raise ValueError(f"{len(masks)} masks for {model.n_classes} classes")


def _rows(latents, sl):
    if latents is None:
        return None
    return L.ClassLatentResult(latents.z[sl], latents.scores[sl], latents.objective[sl], latents.family)


def classify_masked(model, images, masks: SupportMask, cfg: L.LatentSearchConfig,
                    batch: int = 64, latents=None) -> np.ndarray:
    """For each class j: align by ``z*_j``, apply mask j, re-score with beta_j."""
    _check_masks(model, masks)
    images = np.asarray(images)
    c = model.n_classes
    out = np.empty(len(images), dtype=np.int64)
    f = model.heads.shape[1] - 1
    for start in range(0, len(images), batch):
        x = images[start: start + batch]
        views, _ = _masked_views(model, x, masks, cfg, _rows(latents, slice(start, start + batch)))
        b = len(x)
        feats, _ = net.features_forward(model, views.reshape((b * c,) + views.shape[2:]))
        feats = feats.reshape(b, c, f)
        scores = np.einsum("icf,cf->ic", feats, model.heads[:, :f]) + model.heads[:, f]
        out[start: start + b] = scores.argmax(axis=1)
    return out


def build_class_stack(model, images, masks: SupportMask, cfg: L.LatentSearchConfig,
                      batch: int = 64, latents=None) -> np.ndarray:
    """Channel j holds the image decluttered for class j.

    A single image ``(ch, H, W)`` gives ``(C*ch, H, W)``; a batch gives
    ``(N, C*ch, H, W)``.
    """
    _check_masks(model, masks)
    x = np.asarray(images)
    single = x.ndim == 3
    if single:
        x = x[None]
    parts = []
    for start in range(0, len(x), batch):
        views, _ = _masked_views(model, x[start: start + batch], masks, cfg,
                                 _rows(latents, slice(start, start + batch)))
        parts.append(views.reshape((len(views), -1) + views.shape[3:]))
    c = model.n_classes
    stack = np.concatenate(parts) if parts else np.zeros((0, c * x.shape[1]) + x.shape[2:], np.float32)
    return stack[0] if single else stack


def train_stack_classifier(stacks, labels, spec: str, cfg: net.TrainConfig,
                           n_classes: int | None = None, history=None) -> net.ModelParams:
    """Hinge-loss network over C-channel stacks; ``epochs=0`` returns the init."""
    stacks = np.asarray(stacks)
    labels = np.asarray(labels)
    c = int(labels.max()) + 1 if n_classes is None else n_classes
    if stacks.ndim != 4 or stacks.shape[1] != c:
        raise net.ShapeError(f"stack has {stacks.shape[1] if stacks.ndim == 4 else '?'} channels, expected {c}")
    model = net.init_model(spec, stacks.shape[1:], c, seed=cfg.seed)
    return net.train_hinge(model, stacks, labels, cfg, history)


def classify_stacked(stack_model, dc_model, images, masks: SupportMask,
                     cfg: L.LatentSearchConfig, latents=None) -> np.ndarray:
    return net.predict(stack_model, build_class_stack(dc_model, images, masks, cfg, latents=latents))


def export_pgms(directory, templates: ClassTemplate | None = None,
                masks: SupportMask | None = None) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    if templates is not None:
        for j, t in enumerate(templates.means):
            written.append(directory / f"template_{j}.pgm")
            io.write_pgm(written[-1], t)
    if masks is not None:
        for j, m in enumerate(masks.masks):
            written.append(directory / f"mask_{j}.pgm")
            io.write_pgm(written[-1], m)
    return written
