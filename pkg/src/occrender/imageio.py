"""Minimal PFM / PGM readers and writers for rendered outputs."""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np


def write_pfm(path, image: np.ndarray) -> None:
    """Single-channel little-endian PFM (rows stored bottom to top)."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise ValueError("write_pfm expects a 2-D array")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(image).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        channels = 3 if tag == b"PF" else 1
        w, h = (int(x) for x in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(w * h * channels * 4), dtype=dtype)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_pgm(path, image: np.ndarray, maxval: int = 255) -> None:
    """Binary (P5) PGM; 16-bit big-endian samples when ``maxval > 255``."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("write_pgm expects a 2-D array")
    if image.min(initial=0) < 0 or image.max(initial=0) > maxval:
        raise ValueError("pixel values outside 0..maxval")
    h, w = image.shape
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        f.write(image.astype(dtype).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise ValueError(f"{path}: not a binary PGM file")
    w, h, maxval = (int(x) for x in m.groups())
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(raw[m.end():], dtype=dtype, count=w * h).reshape(h, w).astype(np.int64)


def write_blob(path, array: np.ndarray) -> None:
    """Raw little-endian float32 array plus a ``.json`` sidecar with its shape."""
    path = Path(path)
    array = np.asarray(array, dtype="<f4")
    array.tofile(path)
    sidecar = {"dtype": "float32", "byteorder": "little", "shape": list(array.shape), "order": "C"}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar) + "\n")


def read_blob(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return np.fromfile(path, dtype="<f4").reshape(meta["shape"])
