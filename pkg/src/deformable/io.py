"""File formats: checkpoints, PGM images and the CSV reports."""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DCKPT1"


class CheckpointError(ValueError):
    pass


def encode_checkpoint(arrays: dict) -> bytes:
    """``DCKPT1`` then per array: u16 name length, name, u8 ndim, u32 dims, f32 payload (LE)."""
    out = [MAGIC]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr)
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(out)


def decode_checkpoint(data: bytes) -> dict:
    if not data.startswith(MAGIC):
        raise CheckpointError("not a DCKPT1 checkpoint")
    pos = len(MAGIC)
    arrays = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos: pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(data):
                raise CheckpointError(f"record {name!r} truncated")
            arrays[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError("checkpoint truncated") from exc
    return arrays


def save_checkpoint(path, arrays: dict) -> None:
    Path(path).write_bytes(encode_checkpoint(arrays))


def load_checkpoint(path) -> dict:
    return decode_checkpoint(Path(path).read_bytes())


def write_pgm(path, image) -> None:
    """8-bit binary PGM (P5) of a [0, 1] image."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0] if img.shape[0] == 1 else np.concatenate(list(img), axis=1)
    pix = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    # the header is four whitespace-separated tokens; exactly one whitespace
    # byte follows maxval, and pixel bytes may themselves look like whitespace
    parts = data.split(maxsplit=3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    maxval_raw = parts[3].split(maxsplit=1)[0]
    maxval = int(maxval_raw)
    start = len(data) - len(parts[3]) + len(maxval_raw) + 1
    if len(data) - start < w * h:
        raise ValueError("PGM pixel data truncated")
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=start).reshape(h, w)
    return pix.astype(np.float64) / maxval


def fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6f}"
    return str(value)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_history(path, history, with_time: bool = False) -> None:
    """``epoch,phase,loss,train_error,test_error,seconds``.

    Wall-clock seconds are left blank unless ``with_time``; this keeps the
    file byte-identical across re-runs.
    """
    rows = []
    for rec in history:
        secs = rec.get("seconds", "") if with_time else ""
        rows.append([rec.get("epoch", ""), rec.get("phase", ""), rec.get("loss", ""),
                     rec.get("train_error", ""), rec.get("test_error", ""), secs])
    write_csv(path, ["epoch", "phase", "loss", "train_error", "test_error", "seconds"], rows)


def write_poses(path, result) -> None:
    """``example,class,score,z_0..z_{d-1}`` for every (example, class)."""
    n, c, d = result.z.shape
    header = ["example", "class", "score"] + [f"z_{k}" for k in range(d)]
    rows = ([i, j, result.scores[i, j]] + list(result.z[i, j]) for i in range(n) for j in range(c))
    write_csv(path, header, rows)


def write_rotation_errors(path, alpha_deg, alpha_hat_deg, err_deg) -> None:
    write_csv(path, ["example", "alpha_deg", "alpha_hat_deg", "err_deg"],
              ([i, float(a), float(b), float(e)] for i, (a, b, e)
               in enumerate(zip(alpha_deg, alpha_hat_deg, err_deg))))


def write_histogram(path, lo, hi, counts) -> None:
    write_csv(path, ["bin_lo_deg", "bin_hi_deg", "count"],
              ([float(a), float(b), int(c)] for a, b, c in zip(lo, hi, counts)))
