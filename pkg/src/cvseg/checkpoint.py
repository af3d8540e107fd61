"""Versioned binary parameter files.

Layout (little endian)::

    magic   8 bytes  b"CVSGCKPT"
    version u32
    count   u32
    count x { name_len u16, name utf-8, ndim u8, dims u32 x ndim }
    raw float64 data of every entry, in table order
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"CVSGCKPT"
VERSION = 1


def save(path, params: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, arr in params.items():
        arr = np.asarray(getattr(arr, "data", arr), dtype=np.float64)
        raw = name.encode()
        header.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    with open(path, "wb") as fh:
        fh.write(b"".join(header))
        for arr in params.values():
            fh.write(np.ascontiguousarray(getattr(arr, "data", arr), dtype="<f8").tobytes())


def load(path) -> dict:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    try:
        version, count = struct.unpack_from("<II", blob, 8)
        if version != VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {version}")
        pos = 16
        table = []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, pos)
            name = blob[pos + 2:pos + 2 + n].decode()
            (ndim,) = struct.unpack_from("<B", blob, pos + 2 + n)
            pos += 3 + n
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            table.append((name, shape))
    except struct.error as exc:
        raise ContractError(f"{path}: truncated header ({exc})") from None
    needed = pos + 8 * sum(int(np.prod(shape)) for _, shape in table)
    if needed != len(blob):
        raise ContractError(f"{path}: expected {needed} bytes, found {len(blob)}")
    out = {}
    for name, shape in table:
        size = int(np.prod(shape))
        out[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return out


def restore(params: dict, values: dict) -> None:
    """Copy loaded arrays into the tensors of a parameter store."""
    if set(params) != set(values):
        raise ContractError(f"parameter names differ: {sorted(set(params) ^ set(values))}")
    for name, t in params.items():
        if t.data.shape != values[name].shape:
            raise ContractError(f"{name}: shape {values[name].shape} != {t.data.shape}")
        t.data = values[name].copy()
