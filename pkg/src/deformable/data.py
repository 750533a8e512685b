"""Datasets: IDX files, rotated digits, per-class subsets and synthetic clutter."""

from __future__ import annotations

import csv
import logging
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter

from . import warp as W

log = logging.getLogger(__name__)

LABEL_MAGIC = 0x00000801
IMAGE_MAGIC = 0x00000803


class IdxFormatError(ValueError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class InsufficientDataError(ValueError):
    pass


class PlacementError(RuntimeError):
    pass


@dataclass
class LabeledDataset:
    """Images ``(N, C, H, W)`` in [0, 1], integer labels, optional angles (degrees)."""

    images: np.ndarray
    labels: np.ndarray
    angles: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images)
        if self.images.ndim == 3:
            self.images = self.images[:, None]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.angles is not None:
            self.angles = np.asarray(self.angles, dtype=np.float64)
            if len(self.angles) != len(self.labels):
                raise ValueError("angles and labels differ in length")

    def __len__(self):
        return len(self.labels)

    def take(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx],
                              None if self.angles is None else self.angles[idx])

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


# IDX -----------------------------------------------------------------------


def parse_idx(data: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX container (magic 0x801 or 0x803)."""
    if len(data) < 4:
        raise IdxFormatError("missing IDX magic")
    (magic,) = struct.unpack(">I", data[:4])
    if magic & 0xFFFFFF00 != 0x00000800 or magic & 0xFF == 0:
        raise IdxFormatError(f"bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxTruncatedError("IDX header truncated")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) - header < count:
        raise IdxTruncatedError(f"IDX payload has {len(data) - header} bytes, expected {count}")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def encode_idx(array) -> bytes:
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise TypeError("IDX writer only handles uint8 arrays")
    header = struct.pack(">I", 0x00000800 | a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    return header + a.tobytes(order="C")


def read_idx(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return parse_idx(raw)


def to_unit(pixels) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float32) / np.float32(255.0)


def to_bytes(images) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def load_idx_dataset(images_path, labels_path) -> LabeledDataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim == 3:
        images = images[:, None]
    return LabeledDataset(to_unit(images), labels.astype(np.int64))


def save_dataset(ds: LabeledDataset, directory, name: str) -> None:
    """Write ``<name>-images.idx`` / ``<name>-labels.idx`` plus ``<name>.csv``.

    Single-channel images are stored as ``(N, H, W)``; multi-channel as
    ``(N, C, H, W)`` (channel-major).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    imgs = to_bytes(ds.images)
    if imgs.shape[1] == 1:
        imgs = imgs[:, 0]
    (directory / f"{name}-images.idx").write_bytes(encode_idx(imgs))
    (directory / f"{name}-labels.idx").write_bytes(encode_idx(ds.labels.astype(np.uint8)))
    with open(directory / f"{name}.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "label", "angle_degrees"])
        for i, label in enumerate(ds.labels):
            angle = "" if ds.angles is None else f"{ds.angles[i]:.6f}"
            writer.writerow([i, int(label), angle])


def load_dataset(directory, name: str) -> LabeledDataset:
    directory = Path(directory)
    ds = load_idx_dataset(directory / f"{name}-images.idx", directory / f"{name}-labels.idx")
    sidecar = directory / f"{name}.csv"
    if sidecar.exists():
        with open(sidecar, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows and rows[0]["angle_degrees"] != "":
            ds.angles = np.array([float(r["angle_degrees"]) for r in rows])
    return ds


def cifar_rows_to_dataset(data: bytes) -> LabeledDataset:
    """Convert raw CIFAR-10 binary rows (1 label byte + 3072 pixel bytes)."""
    row = 1 + 3 * 32 * 32
    if len(data) % row:
        raise IdxTruncatedError("CIFAR payload is not a whole number of rows")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(-1, row)
    return LabeledDataset(to_unit(arr[:, 1:].reshape(-1, 3, 32, 32)), arr[:, 0].astype(np.int64))


def load_mlxtend_mnist(seed: int = 0) -> LabeledDataset:
    """The 5000-digit MNIST excerpt shipped with mlxtend, in a seeded order.

    The excerpt is sorted by class; shuffling once with a fixed seed gives an
    interleaved order so that "first n of each class" is meaningful.
    """
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    order = np.random.default_rng(seed).permutation(len(y))
    images = to_unit(x[order].reshape(-1, 1, 28, 28))
    return LabeledDataset(images, y[order].astype(np.int64))


# synthesis -------------------------------------------------------------------


def make_rotated_dataset(ds: LabeledDataset, seed: int) -> LabeledDataset:
    """Rotate each image by an angle drawn uniformly from [0, 360) degrees.

    The stored angle is the rotation parameter used for warping; warping the
    result by the negated angle restores the upright digit.
    """
    if ds.images.shape[-1] != ds.images.shape[-2]:
        raise ValueError("rotation synthesis needs square images")
    rng = np.random.default_rng(seed)
    angles = rng.uniform(0.0, 360.0, len(ds))
    out = np.empty_like(ds.images)
    for start in range(0, len(ds), 1000):
        sl = slice(start, start + 1000)
        out[sl] = W.warp(ds.images[sl], W.ROTATION, np.radians(angles[sl])[:, None])
    np.clip(out, 0.0, 1.0, out=out)
    return LabeledDataset(out, ds.labels.copy(), angles)


def subset_per_class(ds: LabeledDataset, n: int, n_classes: int | None = None) -> LabeledDataset:
    """First ``n`` examples of every class, in original order."""
    n_classes = n_classes if n_classes is not None else ds.n_classes
    keep = []
    for c in range(n_classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) < n:
            raise InsufficientDataError(f"class {c} has {len(idx)} examples, need {n}")
        keep.append(idx[:n])
    idx = np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.int64)
    return ds.take(idx)


@dataclass(frozen=True)
class ClutterSpec:
    kind: str = "random"  # flanking | random
    patch_count: int = 4
    patch_size: int = 8
    margin: int = 1
    overlap_range: tuple[int, int] = field(default=(4, 10))

    def __post_init__(self):
        if self.kind not in ("flanking", "random"):
            raise ValueError(f"unknown clutter kind {self.kind!r}")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.patch_count < 0 or self.patch_size < 1:
            raise ValueError("bad patch parameters")


def forbidden_zone(img, margin: int) -> np.ndarray:
    """Support of the image (any channel nonzero) dilated by ``margin`` pixels."""
    x = np.asarray(img)
    support = (x > 0).any(axis=0) if x.ndim == 3 else x > 0
    if margin == 0:
        return support
    return maximum_filter(support, size=2 * margin + 1, mode="constant")


def _plane(img):
    x = np.asarray(img, dtype=np.float32)
    return x[None] if x.ndim == 2 else x


def add_flanking_clutter(img, neighbors, spec: ClutterSpec, seed) -> np.ndarray:
    """Put cropped parts of two digits to the left and right of ``img``.

    A neighbour on the left is shifted so that only the rightmost ``overlap``
    columns of its ink bounding box stay in frame (mirrored on the right), with
    the overlap drawn from ``spec.overlap_range``.  If that brings its ink
    within ``spec.margin`` of the centre digit it is pulled further out; if no
    visible, non-touching position exists a PlacementError is raised.
    """
    if spec.kind != "flanking":
        raise ValueError("flanking clutter needs a flanking ClutterSpec")
    rng = np.random.default_rng(seed)
    x = _plane(img)
    c, h, w = x.shape
    zone = forbidden_zone(x, spec.margin)
    out = x.copy()
    lo, hi = spec.overlap_range
    for side, nb in zip((-1, 1), neighbors):
        nb = _plane(nb)
        overlap = int(rng.integers(lo, hi + 1))
        cols = np.flatnonzero((nb > 0).any(axis=(0, 1)))
        if cols.size == 0:
            continue
        padded = np.concatenate([np.zeros((c, h, w), nb.dtype), nb, np.zeros((c, h, w), nb.dtype)], axis=2)
        placed = False
        for ov in range(min(overlap, w), 0, -1):
            if side < 0:
                start = cols[-1] + 1 - ov + w
                layer = np.zeros_like(x)
                layer[:, :, :ov] = padded[:, :, start: start + ov]
            else:
                start = cols[0] + w
                layer = np.zeros_like(x)
                layer[:, :, w - ov:] = padded[:, :, start: start + ov]
            ink = (layer > 0).any(axis=0)
            if ink.any() and not (ink & zone).any():
                out += layer
                placed = True
                break
        if not placed:
            raise PlacementError("no flanking placement clears the margin")
    np.clip(out, 0.0, 1.0, out=out)
    return out if np.ndim(img) == 3 else out[0]


def add_random_clutter(img, source: LabeledDataset, spec: ClutterSpec, seed,
                       max_tries: int = 200) -> np.ndarray:
    """Scatter ``spec.patch_count`` stroke patches cut from random source digits."""
    if spec.kind != "random":
        raise ValueError("random clutter needs a random ClutterSpec")
    rng = np.random.default_rng(seed)
    x = _plane(img)
    c, h, w = x.shape
    p = spec.patch_size
    if p > h or p > w:
        raise PlacementError("patch larger than image")
    zone = forbidden_zone(x, spec.margin)
    out = x.copy()
    for _ in range(spec.patch_count):
        patch = None
        for _ in range(50):
            src = _plane(source.images[rng.integers(len(source))])
            r, q = rng.integers(0, src.shape[1] - p + 1), rng.integers(0, src.shape[2] - p + 1)
            cand = src[:, r: r + p, q: q + p]
            if (cand > 0).any():
                patch = cand
                break
        if patch is None:
            continue
        # positions may push part of the patch out of frame; the visible part
        # must still carry ink
        for _ in range(max_tries):
            r, q = rng.integers(1 - p, h), rng.integers(1 - p, w)
            r0, q0, r1, q1 = max(r, 0), max(q, 0), min(r + p, h), min(q + p, w)
            piece = patch[:, r0 - r: r1 - r, q0 - q: q1 - q]
            ink = (piece > 0).any(axis=0)
            if ink.any() and not (zone[r0:r1, q0:q1] & ink).any():
                out[:, r0:r1, q0:q1] += piece
                break
        else:
            raise PlacementError("no random clutter position clears the margin")
    np.clip(out, 0.0, 1.0, out=out)
    return out if np.ndim(img) == 3 else out[0]


def clutter_dataset(ds: LabeledDataset, spec: ClutterSpec, seed: int,
                    source: LabeledDataset | None = None, retries: int = 10) -> LabeledDataset:
    """Apply one clutter kind to every image; neighbours / patches come from ``source``.

    An image whose centre digit leaves no legal room after ``retries`` fresh
    draws is kept clean (and counted in the log).
    """
    source = source if source is not None else ds
    rng = np.random.default_rng(seed)
    out = np.empty_like(ds.images)
    skipped = 0
    for i in range(len(ds)):
        for _ in range(retries):
            sub = int(rng.integers(0, 2**63 - 1))
            try:
                if spec.kind == "flanking":
                    nb = rng.integers(0, len(source), 2)
                    out[i] = add_flanking_clutter(
                        ds.images[i], (source.images[nb[0]], source.images[nb[1]]), spec, sub)
                else:
                    out[i] = add_random_clutter(ds.images[i], source, spec, sub)
                break
            except PlacementError:
                continue
        else:
            out[i] = ds.images[i]
            skipped += 1
    if skipped:
        log.info("%d of %d images left without %s clutter", skipped, len(ds), spec.kind)
    return LabeledDataset(out, ds.labels.copy(), None if ds.angles is None else ds.angles.copy())
