"""Per-example, per-class search over transformation parameters.

For class ``j`` the score of an image ``x`` at latent ``z`` is
``beta_j . Phi(T_z x)``.  Three optimisers maximise it: exhaustive search
over a discrete set (es), penalised fixed-step gradient ascent (gd), and
gradient ascent restarted from every element of the discrete set (esgd).

All heavy work is batched: every (image, class, start) triple becomes one
row of a single warped batch pushed through the network in chunks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import net
from . import warp as W


class LatentDivergence(FloatingPointError):
    pass


DEFAULT_GD_LR = {"rotation": 0.05, "transcale": 0.02, "affine": 0.02, "tps": 0.01}


def rotation_set(count: int) -> np.ndarray:
    """``count`` rotations evenly spaced over the circle, starting at 0."""
    return (np.arange(count) * (2 * np.pi / count))[:, None]


@dataclass
class LatentSearchConfig:
    family: W.Family = W.ROTATION
    method: str = "esgd"  # es | gd | esgd
    es_set: np.ndarray | None = None
    gd_steps: int = 10
    gd_lr: float | None = None
    penalty_weight: float = 1.0
    penalty_weights: np.ndarray | None = None  # per-parameter; family default when None
    chunk: int = 32  # rows per network call; small chunks stay in cache

    def __post_init__(self):
        if self.method not in ("es", "gd", "esgd"):
            raise ValueError(f"unknown latent method {self.method!r}")
        if self.gd_steps < 0:
            raise ValueError("gd_steps must be >= 0")
        if self.gd_lr is None:
            self.gd_lr = DEFAULT_GD_LR[self.family.kind]
        if self.es_set is None:
            self.es_set = (rotation_set(8) if self.family.kind == "rotation"
                           else W.identity_params(self.family)[None])
        self.es_set = np.atleast_2d(np.asarray(self.es_set, dtype=np.float64))
        if self.es_set.shape[1] != self.family.n_params:
            raise ValueError("es_set entries do not match the family parameter count")
        if len(self.es_set) == 0 and self.method != "gd":
            raise ValueError("es_set must be non-empty for es / esgd")

    def replace(self, **kw) -> "LatentSearchConfig":
        vals = dict(family=self.family, method=self.method, es_set=self.es_set,
                    gd_steps=self.gd_steps, gd_lr=self.gd_lr, penalty_weight=self.penalty_weight,
                    penalty_weights=self.penalty_weights, chunk=self.chunk)
        vals.update(kw)
        return LatentSearchConfig(**vals)


def identity_config(family: W.Family = W.ROTATION) -> LatentSearchConfig:
    """Exhaustive search over the identity alone: the plain network."""
    return LatentSearchConfig(family, "es", W.identity_params(family)[None], gd_steps=0)


@dataclass
class ClassLatentResult:
    """Optimal latents ``z`` ``(N, C, d)`` and their scores ``(N, C)``."""

    z: np.ndarray
    scores: np.ndarray
    objective: np.ndarray
    family: W.Family = field(default=W.ROTATION)

    def warped(self, images) -> np.ndarray:
        """Images warped by each class's latent, shape ``(N, C, ch, H, W)``."""
        n, c, d = self.z.shape
        x = np.repeat(np.asarray(images), c, axis=0)
        out = W.warp(x, self.family, self.z.reshape(-1, d))
        return out.reshape((n, c) + out.shape[1:])


# --------------------------------------------------------------------------
# batched scoring


def score_rows(model: net.ModelParams, family: W.Family, images, rows, classes, z,
               need_grad: bool = True, chunk: int = 512):
    """Scores ``beta_{classes[k]} . Phi(T_{z[k]} images[rows[k]])`` for all k.

    Returns ``(scores, dz)`` with ``dz`` None unless ``need_grad``.
    """
    images = np.asarray(images)
    z = np.asarray(z, dtype=np.float64)
    n = len(rows)
    scores = np.empty(n)
    dz = np.empty_like(z) if need_grad else None
    h, w = images.shape[-2:]
    f = model.heads.shape[1] - 1
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        src = images[rows[sl]]
        grid = W.build_grid(family, z[sl], h, w)
        warped = W.sample(src, grid)
        feats, cache = net.features_forward(model, warped)
        beta = model.heads[classes[sl]]
        scores[sl] = np.einsum("bf,bf->b", feats, beta[:, :f], dtype=np.float64) + beta[:, f]
        if need_grad:
            _, dimg = net.backward(model, cache, beta[:, :f], need_weight_grads=False)
            _, dgrid = W.sample_vjp(src, grid, dimg, need_img=False)
            dz[sl] = W.grid_vjp(family, z[sl], dgrid)
    return scores, dz


def score_with_z(model, img, j: int, z, family: W.Family = W.ROTATION, need_grad: bool = True):
    """Score of a single image for class ``j`` at latent ``z`` (and d/dz)."""
    x = np.asarray(img)
    x = x[None, None] if x.ndim == 2 else x[None]
    s, dz = score_rows(model, family, x, np.zeros(1, dtype=np.int64), np.array([j]),
                       np.asarray(z, dtype=np.float64)[None], need_grad)
    return float(s[0]), (None if dz is None else dz[0])


# --------------------------------------------------------------------------
# optimisers over arbitrary batched score functions


def gradient_ascent(score_fn, z0, cfg: LatentSearchConfig, anchor=None):
    """Fixed-step ascent on ``score - penalty_weight * penalty(z - anchor)``.

    ``score_fn(z, need_grad) -> (scores, dz)`` works on a batch ``(B, d)``.  The anchor
    defaults to the identity.  Each row keeps its best iterate (the start
    included).  Returns ``(z_best, score_best, objective_best)``.
    """
    family = cfg.family
    z = W.clip_params(family, np.atleast_2d(np.asarray(z0, dtype=np.float64)))
    ident = W.identity_params(family)
    shift = 0.0 if anchor is None else np.atleast_2d(anchor) - ident

    def objective(z, scores, dz):
        if not cfg.penalty_weight:
            return scores, dz
        pen, dpen = W.identity_penalty(family, z - shift, cfg.penalty_weights)
        return scores - cfg.penalty_weight * pen, dz - cfg.penalty_weight * dpen

    best_z = z.copy()
    best_s = best_o = None
    for step in range(cfg.gd_steps + 1):
        last = step == cfg.gd_steps
        scores, dz = score_fn(z, need_grad=not last)
        if dz is None:
            dz = np.zeros_like(z)
        obj, dobj = objective(z, scores, dz)
        if best_o is None:
            best_s, best_o = scores.copy(), obj.copy()
        else:
            better = obj > best_o
            best_z[better], best_s[better], best_o[better] = z[better], scores[better], obj[better]
        if last:
            break
        if not np.all(np.isfinite(dobj)):
            bad = np.flatnonzero(~np.all(np.isfinite(dobj), axis=1))
            raise LatentDivergence(f"non-finite latent gradient at step {step} for rows {bad[:5].tolist()}")
        z = W.clip_params(family, z + cfg.gd_lr * dobj)
    return best_z, best_s, best_o


def _model_score_fn(model, family, images, rows, classes, chunk):
    def fn(z, need_grad=True):
        return score_rows(model, family, images, rows, classes, z, need_grad, chunk)
    return fn


def optimize_es(model, img, j: int, cfg: LatentSearchConfig):
    """Best element of ``cfg.es_set`` for class ``j`` (first wins ties)."""
    z, s, _ = _search(model, _single(img), cfg.replace(method="es"), classes=[j])
    return z[0, 0], float(s[0, 0])


def optimize_gd(model, img, j: int, z0, cfg: LatentSearchConfig):
    """Penalised gradient ascent from ``z0`` with the identity as anchor."""
    x = _single(img)
    fn = _model_score_fn(model, cfg.family, x, np.zeros(1, dtype=np.int64), np.array([j]), cfg.chunk)
    z, s, o = gradient_ascent(fn, np.asarray(z0, dtype=np.float64)[None], cfg)
    return z[0], float(s[0]), float(o[0])


def optimize_esgd(model, img, j: int, cfg: LatentSearchConfig):
    z, s, o = _search(model, _single(img), cfg.replace(method="esgd"), classes=[j])
    return z[0, 0], float(s[0, 0]), float(o[0, 0])


def _single(img):
    x = np.asarray(img)
    return x[None, None] if x.ndim == 2 else x[None]


def _search(model, images, cfg: LatentSearchConfig, classes=None):
    """Run the configured optimiser for every image and class.

    Returns ``(z, scores, objective)`` shaped ``(N, K, d)``, ``(N, K)``,
    ``(N, K)`` where K is the number of classes searched.
    """
    images = np.asarray(images)
    n = len(images)
    classes = np.arange(model.n_classes) if classes is None else np.asarray(classes)
    k = len(classes)
    d = cfg.family.n_params
    if cfg.method == "gd":
        starts = W.identity_params(cfg.family)[None]
    else:
        starts = cfg.es_set
    s_count = len(starts)
    # row order: image-major, then class, then start
    rows = np.repeat(np.arange(n), k * s_count)
    cls = np.tile(np.repeat(classes, s_count), n)
    z0 = np.tile(starts, (n * k, 1))
    fn = _model_score_fn(model, cfg.family, images, rows, cls, cfg.chunk)

    if cfg.method == "es" or cfg.gd_steps == 0 and cfg.method == "esgd":
        scores, _ = fn(z0, need_grad=False)
        z, obj = z0, scores
    elif cfg.method == "gd":
        z, scores, obj = gradient_ascent(fn, z0, cfg)
    else:
        z, scores, obj = gradient_ascent(fn, z0, cfg, anchor=z0)

    obj = obj.reshape(n, k, s_count)
    pick = obj.argmax(axis=2)
    take = lambda a: np.take_along_axis(a.reshape(n, k, s_count, -1), pick[..., None, None], axis=2)[:, :, 0]
    return take(z).reshape(n, k, d), take(scores)[..., 0], take(obj)[..., 0]


def per_class_latents(model, images, cfg: LatentSearchConfig, batch: int = 64) -> ClassLatentResult:
    """Optimal latent, score and objective for every image and every class."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[:, None]
    zs, ss, os_ = [], [], []
    for start in range(0, len(images), batch):
        z, s, o = _search(model, images[start: start + batch], cfg)
        zs.append(z)
        ss.append(s)
        os_.append(o)
    c, d = model.n_classes, cfg.family.n_params
    if not zs:
        return ClassLatentResult(np.zeros((0, c, d)), np.zeros((0, c)), np.zeros((0, c)), cfg.family)
    return ClassLatentResult(np.concatenate(zs), np.concatenate(ss), np.concatenate(os_), cfg.family)


def classify(model, images, cfg: LatentSearchConfig, batch: int = 64):
    """``argmax_j`` of the per-class optimal scores (lowest index on ties).

    Returns ``(labels, result, poses)`` where ``poses`` is the winning class's
    latent for every image.
    """
    res = per_class_latents(model, images, cfg, batch)
    pred = res.scores.argmax(axis=1)
    poses = res.z[np.arange(len(pred)), pred]
    return pred, res, poses


def label_latents(model, images, labels, cfg: LatentSearchConfig, batch: int = 64):
    """Optimal latent and score of each image under its own label only.

    Returns ``(z, scores)`` shaped ``(N, d)`` and ``(N,)``.
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[:, None]
    labels = np.asarray(labels)
    z = np.zeros((len(images), cfg.family.n_params))
    s = np.zeros(len(images))
    for j in np.unique(labels):
        idx = np.flatnonzero(labels == j)
        for start in range(0, len(idx), batch):
            sub = idx[start: start + batch]
            zj, sj, _ = _search(model, images[sub], cfg, classes=[int(j)])
            z[sub], s[sub] = zj[:, 0], sj[:, 0]
    return z, s
