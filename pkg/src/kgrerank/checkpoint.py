"""Versioned binary checkpoints.

Layout::

    8 bytes   magic  b"KGRRCKPT"
    u32 LE    format version
    u32 LE    length of the UTF-8 JSON header
    ...       JSON header: {"kind", "meta", "blocks": [[name, shape], ...]}
    ...       each block as row-major little-endian float64, in header order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"KGRRCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, kind: str, meta: dict, blocks: dict[str, np.ndarray]) -> None:
    header = {
        "kind": kind,
        "meta": meta,
        "blocks": [[name, list(arr.shape)] for name, arr in blocks.items()],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(raw)))
        fh.write(raw)
        for arr in blocks.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes(order="C"))


def read_checkpoint(path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 16 + hlen
    header = json.loads(data[16:off].decode("utf-8"))
    if header["kind"] != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {header['kind']}")
    blocks = {}
    for name, shape in header["blocks"]:
        n = int(np.prod(shape)) if shape else 1
        if off + 8 * n > len(data):
            raise CheckpointError(f"{path}: truncated block {name!r}")
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape)
        blocks[name] = arr.astype(np.float64)
        off += 8 * n
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes")
    return header["meta"], blocks
