"""Netpbm (P5/P6) and PFM readers/writers."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(data):
        ch = data[pos:pos + 1]
        if ch == b"#":
            pos = data.index(b"\n", pos) + 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    tok, pos = _read_token(data, 0)
    if tok != magic:
        raise ValueError(f"{path}: expected {magic.decode()} header, got {tok!r}")
    width, pos = _read_token(data, pos)
    height, pos = _read_token(data, pos)
    maxval, pos = _read_token(data, pos)
    width, height, maxval = int(width), int(height), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit files are supported")
    pos += 1
    shape = (height, width, channels) if channels > 1 else (height, width)
    return np.frombuffer(data, dtype=np.uint8, count=width * height * channels, offset=pos).reshape(shape)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Write a channel-first [3,H,W] float image in [0,1] as binary P6."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"write_ppm expects a [3,H,W] image, got shape {img.shape}")
    img = img.transpose(1, 2, 0)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a P6 file into a float64 [3,H,W] array with values k/255."""
    return _read_netpbm(path, b"P6", 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pgm(path, values: np.ndarray) -> None:
    arr = np.asarray(values)
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise ValueError("PGM values must lie in [0, 255]")
    h, w = arr.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1).copy()


def write_pfm(path, values: np.ndarray) -> None:
    """Single-channel little-endian PFM, rows stored bottom-to-top."""
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("write_pfm expects a 2-D array")
    h, w = arr.shape
    header = b"Pf\n%d %d\n-1.0\n" % (w, h)
    Path(path).write_bytes(header + np.ascontiguousarray(np.flipud(arr)).tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tok, pos = _read_token(data, 0)
    if tok not in (b"Pf", b"PF"):
        raise ValueError(f"{path}: not a PFM file")
    channels = 1 if tok == b"Pf" else 3
    width, pos = _read_token(data, pos)
    height, pos = _read_token(data, pos)
    scale, pos = _read_token(data, pos)
    pos += 1
    width, height, scale = int(width), int(height), float(scale)
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(data, dtype=dtype, count=width * height * channels, offset=pos)
    shape = (height, width, channels) if channels == 3 else (height, width)
    return np.flipud(arr.reshape(shape)).astype(np.float32)
