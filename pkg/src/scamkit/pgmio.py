"""Portable graymap / pixmap and raw f64 map IO.

Maps are persisted as paired files per frame: an 8-bit P5 graymap preview and
a lossless raw little-endian f64 sidecar.  Frames are P6 pixmaps; fixation
point sets are one "row,col" pair per line.
"""

from __future__ import annotations

import numpy as np

from .serial import atomic_write_bytes, atomic_write_text


def write_pgm(path, gray: np.ndarray) -> None:
    """8-bit P5 preview of a map in [0,1]."""
    if gray.ndim != 2:
        raise ValueError(f"pgm expects a 2-D map, got {gray.shape}")
    q = np.clip(np.rint(np.clip(gray, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + q.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, rest = data.split(b"\n", 1)
    if magic != b"P5":
        raise ValueError(f"{path}: not a P5 graymap")
    dims, rest = rest.split(b"\n", 1)
    w, h = (int(v) for v in dims.split())
    maxval, rest = rest.split(b"\n", 1)
    if int(maxval) != 255:
        raise ValueError(f"{path}: expected 8-bit graymap")
    pix = np.frombuffer(rest[: h * w], dtype=np.uint8).reshape(h, w)
    return pix.astype(np.float64) / 255.0


def write_ppm(path, rgb: np.ndarray) -> None:
    """8-bit P6 pixmap of an (H,W,3) image in [0,1]."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"ppm expects (H,W,3), got {rgb.shape}")
    q = np.clip(np.rint(np.clip(rgb, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + q.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, rest = data.split(b"\n", 1)
    if magic != b"P6":
        raise ValueError(f"{path}: not a P6 pixmap")
    dims, rest = rest.split(b"\n", 1)
    w, h = (int(v) for v in dims.split())
    maxval, rest = rest.split(b"\n", 1)
    if int(maxval) != 255:
        raise ValueError(f"{path}: expected 8-bit pixmap")
    pix = np.frombuffer(rest[: h * w * 3], dtype=np.uint8).reshape(h, w, 3)
    return pix.astype(np.float64) / 255.0


def write_f64(path, arr: np.ndarray) -> None:
    atomic_write_bytes(path, np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_f64(path, shape) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return arr.reshape(shape)


def write_map_pair(stem, gray: np.ndarray) -> None:
    """Write <stem>.pgm preview and <stem>.f64 lossless sidecar."""
    write_pgm(str(stem) + ".pgm", gray)
    write_f64(str(stem) + ".f64", gray)


def read_map_pair(stem, shape) -> np.ndarray:
    return read_f64(str(stem) + ".f64", shape)


def write_points(path, points) -> None:
    lines = "".join(f"{int(r)},{int(c)}\n" for r, c in points)
    atomic_write_text(path, lines)


def read_points(path) -> list[tuple[int, int]]:
    pts = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            r, c = line.split(",")
            pts.append((int(r), int(c)))
    return pts
