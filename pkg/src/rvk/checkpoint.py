"""Checkpoint files: JSON header followed by raw little-endian float64 blocks.

Layout::

    b"RVKCKPT1"                 8-byte magic
    uint32 LE                   header length in bytes
    header                      UTF-8 JSON
    block_0 .. block_{n-1}      float64 LE, row-major, in header["tensors"] order

The header carries ``schema_version``, ``tensors`` (name + shape per block)
and a free-form ``meta`` object (hyperparameters, layer widths, config hash).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RVKCKPT1"
SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    entries = [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()]
    header = {"schema_version": SCHEMA_VERSION, "tensors": entries, "meta": meta}
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)[0]


def _read_header(fh, path):
    magic = fh.read(8)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r} at offset 0")
    raw_n = fh.read(4)
    if len(raw_n) != 4:
        raise CheckpointError(f"{path}: truncated header length at offset 8")
    (n,) = struct.unpack("<I", raw_n)
    try:
        header = json.loads(fh.read(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header at offset 12: {exc}") from exc
    version = header.get("schema_version")
    if version != SCHEMA_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint schema_version {version} but this build reads {SCHEMA_VERSION}")
    return header, 12 + n


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        header, offset = _read_header(fh, path)
        tensors = {}
        for e in header["tensors"]:
            shape = tuple(e["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise CheckpointError(f"{path}: truncated block {e['name']!r} at offset {offset}")
            tensors[e["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
            offset += 8 * count
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last block at offset {offset}")
    return tensors, header["meta"]
