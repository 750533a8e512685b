import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deformable import data as D
from deformable import warp as W


def idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + payload


def test_parse_idx_images():
    arr = D.parse_idx(idx_bytes(0x803, [2, 28, 28], bytes(range(256)) * 6 + bytes(32)))
    assert arr.shape == (2, 28, 28)
    assert arr.dtype == np.uint8
    assert arr[0, 0, 5] == 5


def test_parse_idx_labels():
    arr = D.parse_idx(idx_bytes(0x801, [3], bytes([7, 1, 9])))
    assert arr.tolist() == [7, 1, 9]


def test_parse_idx_truncated():
    with pytest.raises(D.IdxTruncatedError):
        D.parse_idx(idx_bytes(0x803, [2, 28, 28], bytes(784)))
    with pytest.raises(D.IdxTruncatedError):
        D.parse_idx(struct.pack(">I", 0x803) + b"\x00\x00")


@pytest.mark.parametrize("magic", [0x00000000, 0x00000900, 0x12345678])
def test_parse_idx_bad_magic(magic):
    with pytest.raises(D.IdxFormatError):
        D.parse_idx(idx_bytes(magic, [1], b"\x00"))


def test_idx_roundtrip(tmp_path):
    a = np.random.default_rng(0).integers(0, 256, (4, 5, 6), dtype=np.uint8)
    raw = D.encode_idx(a)
    assert np.array_equal(D.parse_idx(raw), a)
    (tmp_path / "a.idx.gz").write_bytes(gzip.compress(raw))
    assert np.array_equal(D.read_idx(tmp_path / "a.idx.gz"), a)


def test_to_unit():
    assert np.array_equal(D.to_unit(np.array([0, 255], dtype=np.uint8)), [0.0, 1.0])


def test_dataset_validation():
    with pytest.raises(ValueError):
        D.LabeledDataset(np.zeros((3, 1, 4, 4)), [0, 1])
    ds = D.LabeledDataset(np.zeros((3, 4, 4)), [0, 1, 2])
    assert ds.images.shape == (3, 1, 4, 4)
    assert ds.n_classes == 3


def test_save_load_roundtrip(tmp_path, mnist):
    ds = D.make_rotated_dataset(mnist.take(range(20)), seed=3)
    D.save_dataset(ds, tmp_path, "rot")
    back = D.load_dataset(tmp_path, "rot")
    assert np.array_equal(back.labels, ds.labels)
    assert np.max(np.abs(back.images - ds.images)) <= 0.5 / 255 + 1e-7
    assert np.allclose(back.angles, ds.angles, atol=1e-6)
    header = (tmp_path / "rot.csv").read_text().splitlines()[0]
    assert header == "index,label,angle_degrees"


def test_cifar_rows():
    row = bytes([3]) + bytes(range(256)) * 12
    ds = D.cifar_rows_to_dataset(row * 2)
    assert ds.images.shape == (2, 3, 32, 32)
    assert ds.labels.tolist() == [3, 3]
    with pytest.raises(D.IdxTruncatedError):
        D.cifar_rows_to_dataset(row[:-1])


def test_mnist_excerpt(mnist):
    assert mnist.images.shape == (5000, 1, 28, 28)
    assert 0.0 <= mnist.images.min() and mnist.images.max() <= 1.0


# rotation ----------------------------------------------------------------------


def test_rotated_dataset_deterministic(mnist):
    a = D.make_rotated_dataset(mnist.take(range(30)), seed=7)
    b = D.make_rotated_dataset(mnist.take(range(30)), seed=7)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.angles, b.angles)
    assert np.all((a.angles >= 0) & (a.angles < 360))


def test_zero_angle_rotation_is_identity(mnist):
    x = mnist.images[:5]
    assert np.array_equal(W.warp(x, W.ROTATION, [0.0]), x)


def test_rotation_undo(mnist):
    ds = mnist.take(range(100))
    rot = D.make_rotated_dataset(ds, seed=11)
    back = W.warp(rot.images, W.ROTATION, -np.radians(rot.angles)[:, None])
    # corners of the frame rotate out and back in as zeros; digits sit inside
    assert np.mean(np.abs(back - ds.images)) < 0.05


def test_rotated_requires_square():
    with pytest.raises(ValueError):
        D.make_rotated_dataset(D.LabeledDataset(np.zeros((1, 1, 4, 5)), [0]), 0)


# subsets --------------------------------------------------------------------


def test_subset_per_class(mnist):
    sub = D.subset_per_class(mnist, 100)
    assert len(sub) == 1000
    assert np.all(np.bincount(sub.labels) == 100)
    # original order and the first n of each class
    first0 = np.flatnonzero(mnist.labels == 0)[:100]
    assert np.array_equal(sub.images[sub.labels == 0], mnist.images[first0])
    assert len(D.subset_per_class(mnist, 0)) == 0


def test_subset_insufficient():
    ds = D.LabeledDataset(np.zeros((3, 1, 2, 2)), [0, 0, 1])
    with pytest.raises(D.InsufficientDataError):
        D.subset_per_class(ds, 2)


# clutter ------------------------------------------------------------------------


def test_flanking_margin_too_large(mnist):
    spec = D.ClutterSpec("flanking", margin=40)
    with pytest.raises(D.PlacementError):
        D.add_flanking_clutter(mnist.images[0], (mnist.images[1], mnist.images[2]), spec, 0)


def test_flanking_zero_neighbours(mnist):
    img = mnist.images[0]
    z = np.zeros_like(img)
    out = D.add_flanking_clutter(img, (z, z), D.ClutterSpec("flanking"), 0)
    assert np.array_equal(out, img)


def test_random_clutter_no_patches(mnist):
    img = mnist.images[0]
    out = D.add_random_clutter(img, mnist, D.ClutterSpec("random", patch_count=0), 0)
    assert np.array_equal(out, img)


def test_random_clutter_blank_source(mnist):
    img = mnist.images[0]
    blank = D.LabeledDataset(np.zeros((4, 1, 28, 28)), [0, 1, 2, 3])
    out = D.add_random_clutter(img, blank, D.ClutterSpec("random"), 0)
    assert np.array_equal(out, img)


def test_clutter_kind_checked(mnist):
    with pytest.raises(ValueError):
        D.add_random_clutter(mnist.images[0], mnist, D.ClutterSpec("flanking"), 0)
    with pytest.raises(ValueError):
        D.ClutterSpec("noise")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 4999), st.integers(0, 2**31 - 1), st.sampled_from(["flanking", "random"]))
def test_clutter_respects_zone(mnist, i, seed, kind):
    img = mnist.images[i]
    spec = D.ClutterSpec(kind)
    try:
        if kind == "flanking":
            nb = np.random.default_rng(seed).integers(0, 5000, 2)
            out = D.add_flanking_clutter(img, (mnist.images[nb[0]], mnist.images[nb[1]]), spec, seed)
        else:
            out = D.add_random_clutter(img, mnist, spec, seed)
    except D.PlacementError:
        return
    zone = D.forbidden_zone(img, spec.margin)
    assert np.array_equal(out[:, zone], img[:, zone])
    assert out.min() >= 0 and out.max() <= 1
    # and the run is reproducible
    again = (D.add_flanking_clutter(img, (mnist.images[nb[0]], mnist.images[nb[1]]), spec, seed)
             if kind == "flanking" else D.add_random_clutter(img, mnist, spec, seed))
    assert np.array_equal(out, again)


def test_clutter_dataset_deterministic(mnist):
    ds = mnist.take(range(40))
    for kind in ("flanking", "random"):
        a = D.clutter_dataset(ds, D.ClutterSpec(kind), 5, source=mnist)
        b = D.clutter_dataset(ds, D.ClutterSpec(kind), 5, source=mnist)
        assert np.array_equal(a.images, b.images)
        # most images actually receive clutter
        changed = np.mean(np.any(a.images != ds.images, axis=(1, 2, 3)))
        assert changed > 0.8
