"""Parameterised deformations, grid generation and bilinear sampling.

Coordinates are normalised so the image spans ``[-1, 1]^2`` with ``(-1, -1)``
at the centre of the top-left pixel.  Component 0 runs along columns (x),
component 1 along rows (y).  Warping is backward: output pixel ``s`` reads
the source at ``phi(s, z)``; samples that fall outside the image are zero.

All functions accept a single latent vector ``(d,)`` or a batch ``(B, d)``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

# pixel coordinates within this distance of an integer are snapped onto it so
# that the identity lattice reproduces the input bit-exactly
_SNAP = 1e-9


@dataclass(frozen=True)
class Family:
    kind: str  # rotation | transcale | affine | tps
    control_rows: int = 4
    control_cols: int = 4

    def __post_init__(self):
        if self.kind not in ("rotation", "transcale", "affine", "tps"):
            raise ValueError(f"unknown transform family {self.kind!r}")
        if self.kind == "tps" and (self.control_rows < 2 or self.control_cols < 2):
            raise ValueError("tps control grid must be at least 2x2")

    @property
    def n_params(self) -> int:
        return {"rotation": 1, "transcale": 4, "affine": 6}.get(
            self.kind, 2 * self.control_rows * self.control_cols)


ROTATION = Family("rotation")
TRANSCALE = Family("transcale")
AFFINE = Family("affine")
TPS = Family("tps")


def family_from_name(name: str, tps_rows: int = 4, tps_cols: int = 4) -> Family:
    if name == "translation_scale":
        name = "transcale"
    if name == "tps":
        return Family("tps", tps_rows, tps_cols)
    return Family(name)


def identity_params(family: Family) -> np.ndarray:
    if family.kind == "affine":
        return np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    return np.zeros(family.n_params)


# default penalty weights and bounds --------------------------------------


def penalty_weights(family: Family) -> np.ndarray:
    """Diagonal weights on ``(z - identity)^2``; for tps the scalar weight
    applies to the non-affine part of the displacements."""
    if family.kind == "rotation":
        return np.array([1.0])
    if family.kind == "transcale":
        return np.array([1.0, 1.0, 4.0, 4.0])
    if family.kind == "affine":
        return np.array([4.0, 4.0, 1.0, 4.0, 4.0, 1.0])
    return np.full(family.n_params, 10.0)


def bounds(family: Family) -> tuple[np.ndarray, np.ndarray]:
    d = family.n_params
    lo, hi = np.full(d, -np.inf), np.full(d, np.inf)
    if family.kind == "transcale":
        lo[:] = [-0.5, -0.5, -np.log(2), -np.log(2)]
        hi[:] = -lo
    elif family.kind == "affine":
        lo[[2, 5]], hi[[2, 5]] = -0.5, 0.5
    elif family.kind == "tps":
        lo[:], hi[:] = -0.5, 0.5
    return lo, hi


def clip_params(family: Family, z):
    lo, hi = bounds(family)
    return np.clip(z, lo, hi)


# grids ---------------------------------------------------------------------


@functools.lru_cache(maxsize=32)
def lattice(height: int, width: int) -> np.ndarray:
    """Identity grid, shape ``(H, W, 2)``."""
    ys, xs = np.meshgrid(np.linspace(-1.0, 1.0, height), np.linspace(-1.0, 1.0, width),
                         indexing="ij")
    grid = np.stack([xs, ys], axis=-1)
    grid.flags.writeable = False
    return grid


def tps_kernel(r2):
    """``U(r) = r^2 log r^2`` written in terms of ``r^2``, with ``U(0) = 0``."""
    r2 = np.asarray(r2, dtype=np.float64)
    out = np.zeros_like(r2)
    pos = r2 > 0
    out[pos] = r2[pos] * np.log(r2[pos])
    return out


@functools.lru_cache(maxsize=8)
def control_points(rows: int, cols: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.linspace(-1, 1, rows), np.linspace(-1, 1, cols), indexing="ij")
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    pts.flags.writeable = False
    return pts


@functools.lru_cache(maxsize=8)
def _tps_system_inverse(rows: int, cols: int) -> np.ndarray:
    c = control_points(rows, cols)
    k = len(c)
    d2 = np.sum((c[:, None, :] - c[None, :, :]) ** 2, axis=-1)
    p = np.hstack([np.ones((k, 1)), c])
    system = np.zeros((k + 3, k + 3))
    system[:k, :k] = tps_kernel(d2)
    system[:k, k:] = p
    system[k:, :k] = p.T
    return np.linalg.inv(system)


def tps_basis(points, rows: int = 4, cols: int = 4) -> np.ndarray:
    """Linear map from control-point values to spline values at ``points``.

    Returns ``(P, K)``: row ``p`` gives the interpolation weights such that the
    spline through values ``v_k`` at the control points evaluates to
    ``basis[p] @ v`` at ``points[p]``.
    """
    c = control_points(rows, cols)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    d2 = np.sum((pts[:, None, :] - c[None, :, :]) ** 2, axis=-1)
    m = np.hstack([tps_kernel(d2), np.ones((len(pts), 1)), pts])
    return m @ _tps_system_inverse(rows, cols)[:, : len(c)]


@functools.lru_cache(maxsize=16)
def _tps_grid_basis(rows, cols, height, width):
    basis = tps_basis(lattice(height, width), rows, cols)
    basis.flags.writeable = False
    return basis


@functools.lru_cache(maxsize=8)
def _affine_projector(rows, cols):
    c = control_points(rows, cols)
    p = np.hstack([np.ones((len(c), 1)), c])
    proj = p @ np.linalg.solve(p.T @ p, p.T)
    proj.flags.writeable = False
    return proj


def _as_batch(z):
    z = np.asarray(z, dtype=np.float64)
    return (z[None], True) if z.ndim == 1 else (z, False)


def build_grid(family: Family, z, height: int, width: int) -> np.ndarray:
    """Source coordinates ``phi(s, z)`` for every output pixel.

    Shape ``(H, W, 2)`` for a single ``z`` or ``(B, H, W, 2)`` for a batch.
    """
    zb, single = _as_batch(z)
    if zb.shape[1] != family.n_params:
        raise ValueError(f"{family.kind} expects {family.n_params} parameters, got {zb.shape[1]}")
    if not np.all(np.isfinite(zb)):
        raise ValueError("non-finite transformation parameters")
    s = lattice(height, width)
    s0, s1 = s[..., 0], s[..., 1]
    b = len(zb)
    if family.kind == "rotation":
        cos, sin = np.cos(zb[:, 0])[:, None, None], np.sin(zb[:, 0])[:, None, None]
        grid = np.stack([cos * s0 - sin * s1, sin * s0 + cos * s1], axis=-1)
    elif family.kind == "transcale":
        sx, sy = np.exp(zb[:, 2])[:, None, None], np.exp(zb[:, 3])[:, None, None]
        grid = np.stack([sx * s0 + zb[:, 0, None, None], sy * s1 + zb[:, 1, None, None]], axis=-1)
    elif family.kind == "affine":
        a = zb[:, :, None, None]
        grid = np.stack([a[:, 0] * s0 + a[:, 1] * s1 + a[:, 2],
                         a[:, 3] * s0 + a[:, 4] * s1 + a[:, 5]], axis=-1)
    else:
        k = family.control_rows * family.control_cols
        basis = _tps_grid_basis(family.control_rows, family.control_cols, height, width)
        dx = zb[:, :k] @ basis.T
        dy = zb[:, k:] @ basis.T
        grid = s[None] + np.stack([dx, dy], axis=-1).reshape(b, height, width, 2)
    return grid[0] if single else grid


def grid_vjp(family: Family, z, grad_grid) -> np.ndarray:
    """Contract ``d phi / d z`` with an upstream gradient on the grid."""
    zb, single = _as_batch(z)
    g = np.asarray(grad_grid, dtype=np.float64)
    if g.ndim == 3:
        g = g[None]
    _, height, width, _ = g.shape
    s = lattice(height, width)
    s0, s1 = s[..., 0], s[..., 1]
    g0, g1 = g[..., 0], g[..., 1]
    if family.kind == "rotation":
        cos, sin = np.cos(zb[:, 0])[:, None, None], np.sin(zb[:, 0])[:, None, None]
        phi0 = cos * s0 - sin * s1
        phi1 = sin * s0 + cos * s1
        out = np.sum(-g0 * phi1 + g1 * phi0, axis=(1, 2))[:, None]
    elif family.kind == "transcale":
        sx, sy = np.exp(zb[:, 2]), np.exp(zb[:, 3])
        out = np.stack([g0.sum(axis=(1, 2)), g1.sum(axis=(1, 2)),
                        sx * np.sum(g0 * s0, axis=(1, 2)),
                        sy * np.sum(g1 * s1, axis=(1, 2))], axis=1)
    elif family.kind == "affine":
        out = np.stack([np.sum(g0 * s0, axis=(1, 2)), np.sum(g0 * s1, axis=(1, 2)), g0.sum(axis=(1, 2)),
                        np.sum(g1 * s0, axis=(1, 2)), np.sum(g1 * s1, axis=(1, 2)), g1.sum(axis=(1, 2))],
                       axis=1)
    else:
        basis = _tps_grid_basis(family.control_rows, family.control_cols, height, width)
        n = len(g)
        out = np.concatenate([g0.reshape(n, -1) @ basis, g1.reshape(n, -1) @ basis], axis=1)
    return out[0] if single else out


# sampling ------------------------------------------------------------------


def _prepare(img, grid):
    x = np.asarray(img)
    g = np.asarray(grid, dtype=np.float64)
    single = g.ndim == 3
    if single:
        g = g[None]
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[None]
    if len(x) == 1 and len(g) > 1:
        x = np.broadcast_to(x, (len(g),) + x.shape[1:])
    if len(x) != len(g):
        raise ValueError(f"{len(x)} images for {len(g)} grids")
    return x, g, single


def _corners(g, height, width):
    px = (g[..., 0] + 1.0) * ((width - 1) / 2.0)
    py = (g[..., 1] + 1.0) * ((height - 1) / 2.0)
    rx, ry = np.rint(px), np.rint(py)
    px = np.where(np.abs(px - rx) < _SNAP, rx, px)
    py = np.where(np.abs(py - ry) < _SNAP, ry, py)
    x0, y0 = np.floor(px), np.floor(py)
    fx, fy = px - x0, py - y0
    # indices into the image padded by one zero pixel on every side
    x0i = np.clip(x0, -1, width).astype(np.int64) + 1
    x1i = np.clip(x0 + 1, -1, width).astype(np.int64) + 1
    y0i = np.clip(y0, -1, height).astype(np.int64) + 1
    y1i = np.clip(y0 + 1, -1, height).astype(np.int64) + 1
    return fx, fy, x0i, x1i, y0i, y1i


def _gather(xp, rows, cols, wp):
    b, c, hp = xp.shape[:3]
    offs = (np.arange(b * c) * (hp * wp)).reshape(b, c, 1)
    flat = offs + (rows * wp + cols).reshape(b, 1, -1)
    return np.take(xp, flat).reshape((b, c) + rows.shape[1:])


def sample(img, grid):
    """Bilinear sampling ``x(phi(s))`` with zero padding.

    ``img`` is ``(H, W)``, ``(C, H, W)`` or ``(B, C, H, W)``; ``grid`` is
    ``(H', W', 2)`` or ``(B, H', W', 2)``.  A single image is broadcast over a
    batch of grids.
    """
    x, g, single = _prepare(img, grid)
    b, c, height, width = x.shape
    fx, fy, x0, x1, y0, y1 = _corners(g, height, width)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    wp = width + 2
    fx, fy = fx[:, None], fy[:, None]
    out = ((_gather(xp, y0, x0, wp) * (1 - fx) + _gather(xp, y0, x1, wp) * fx) * (1 - fy)
           + (_gather(xp, y1, x0, wp) * (1 - fx) + _gather(xp, y1, x1, wp) * fx) * fy)
    out = out.astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64, copy=False)
    if single:
        out = out[0]
        if np.ndim(img) == 2:
            out = out[0]
    return out


def sample_vjp(img, grid, upstream, need_img: bool = True):
    """Gradients of ``sum(upstream * sample(img, grid))``.

    Returns ``(grad_img, grad_grid)`` shaped like ``img`` (broadcast to the
    batch when a single image was shared) and ``grid``; ``grad_img`` is None
    when not requested.  At integer pixel coordinates the derivative is the
    right-sided one.
    """
    x, g, single = _prepare(img, grid)
    b, c, height, width = x.shape
    up = np.asarray(upstream, dtype=np.float64).reshape((b, c) + g.shape[1:3])
    fx, fy, x0, x1, y0, y1 = _corners(g, height, width)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1))).astype(np.float64, copy=False)
    wp, hp = width + 2, height + 2
    v00, v01 = _gather(xp, y0, x0, wp), _gather(xp, y0, x1, wp)
    v10, v11 = _gather(xp, y1, x0, wp), _gather(xp, y1, x1, wp)
    fxc, fyc = fx[:, None], fy[:, None]
    dpx = np.sum(up * ((v01 - v00) * (1 - fyc) + (v11 - v10) * fyc), axis=1)
    dpy = np.sum(up * ((v10 - v00) * (1 - fxc) + (v11 - v01) * fxc), axis=1)
    dgrid = np.stack([dpx * ((width - 1) / 2.0), dpy * ((height - 1) / 2.0)], axis=-1)
    if not need_img:
        return None, (dgrid[0] if single else dgrid)

    # scatter into the padded image, then drop the border
    plane = hp * wp
    offs = (np.arange(b * c) * plane).reshape(b, c, 1)
    dxp = np.zeros(b * c * plane)
    for rows, cols, wgt in ((y0, x0, (1 - fxc) * (1 - fyc)), (y0, x1, fxc * (1 - fyc)),
                            (y1, x0, (1 - fxc) * fyc), (y1, x1, fxc * fyc)):
        idx = (offs + (rows * wp + cols).reshape(b, 1, -1)).ravel()
        dxp += np.bincount(idx, weights=(up * wgt).ravel(), minlength=b * c * plane)
    dimg = dxp.reshape(b, c, hp, wp)[:, :, 1:-1, 1:-1]
    if single:
        dgrid = dgrid[0]
        dimg = dimg[0]
        if np.ndim(img) == 2:
            dimg = dimg[0]
    return dimg, dgrid


def warp(img, family: Family, z):
    """``T_z x``: sample ``img`` on the grid generated by ``z``."""
    x = np.asarray(img)
    h, w = x.shape[-2:]
    grid = build_grid(family, z, h, w)
    if x.ndim == 4 and grid.ndim == 3:
        # one transform for a whole batch
        grid = np.broadcast_to(grid, (len(x),) + grid.shape)
    return sample(x, grid)


def identity_penalty(family: Family, z, weights=None):
    """Weighted squared distance from the identity transform and its gradient."""
    zb, single = _as_batch(z)
    w = penalty_weights(family) if weights is None else np.broadcast_to(
        np.asarray(weights, dtype=np.float64), (family.n_params,))
    dev = zb - identity_params(family)
    if family.kind == "tps":
        k = family.control_rows * family.control_cols
        proj = _affine_projector(family.control_rows, family.control_cols)
        dev = np.concatenate([dev[:, :k] - dev[:, :k] @ proj, dev[:, k:] - dev[:, k:] @ proj], axis=1)
    value = np.sum(w * dev * dev, axis=1)
    grad = 2.0 * w * dev
    return (value[0], grad[0]) if single else (value, grad)


def export_grid_csv(grid, path):
    """Write ``s0,s1,phi0,phi1`` rows for a single grid."""
    g = np.asarray(grid)
    s = lattice(*g.shape[:2])
    rows = np.concatenate([s.reshape(-1, 2), g.reshape(-1, 2)], axis=1)
    np.savetxt(path, rows, delimiter=",", header="s0,s1,phi0,phi1", comments="", fmt="%.9g")
