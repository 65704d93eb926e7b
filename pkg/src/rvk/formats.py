"""Binary PGM (P5) and Middlebury .flo readers/writers."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FLO_MAGIC = b"PIEH"  # float32 202021.25 in little-endian


class FormatError(ValueError):
    pass


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"write_pgm expects a 2-D uint8 array, got {img.dtype} {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def _pgm_tokens(buf: bytes, path):
    """Yield (token, end_offset) for the three header numbers after the magic."""
    pos = 2
    out = []
    while len(out) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: malformed PGM header at offset {start}")
        out.append(int(buf[start:pos]))
    return out, pos + 1  # single whitespace byte before raster


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise FormatError(f"{path}: bad PGM magic {buf[:2]!r} at offset 0")
    (w, h, maxval), off = _pgm_tokens(buf, path)
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM supported, maxval={maxval} at offset {off}")
    if len(buf) - off != w * h:
        raise FormatError(
            f"{path}: raster size {len(buf) - off} at offset {off} does not match {w}x{h}")
    return np.frombuffer(buf, dtype=np.uint8, offset=off).reshape(h, w).copy()


def write_flo(path, flow: np.ndarray) -> None:
    fl = np.asarray(flow)
    if fl.ndim != 3 or fl.shape[2] != 2:
        raise ValueError(f"write_flo expects an HxWx2 array, got {fl.shape}")
    h, w = fl.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(struct.pack("<ii", w, h))
        fh.write(np.ascontiguousarray(fl, dtype="<f4").tobytes())


def read_flo(path, expect_shape: tuple[int, int] | None = None) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != FLO_MAGIC:
        raise FormatError(f"{path}: bad .flo magic {buf[:4]!r} at offset 0")
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated .flo header at offset 4")
    w, h = struct.unpack("<ii", buf[4:12])
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: invalid .flo size {w}x{h} at offset 4")
    if expect_shape is not None and (h, w) != tuple(expect_shape):
        raise FormatError(f"{path}: .flo size {w}x{h} at offset 4 does not match image "
                          f"{expect_shape[1]}x{expect_shape[0]}")
    if len(buf) - 12 != 8 * w * h:
        raise FormatError(f"{path}: .flo payload {len(buf) - 12} bytes at offset 12, "
                          f"expected {8 * w * h}")
    return np.frombuffer(buf, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)
