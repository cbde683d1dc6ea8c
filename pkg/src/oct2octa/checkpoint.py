"""Versioned binary checkpoint container.

Holds named numpy arrays (model parameters, codebooks, optimizer moments) plus
a JSON metadata blob (config snapshot, step counter, stage tag). The byte
layout is fully deterministic: arrays are written sorted by name with raw
little-endian payloads and the metadata is canonical JSON, so identical
training runs produce bit-identical checkpoint files.

Layout (little-endian):

    bytes 0..3   magic ``MCKP``
    byte  4      format version (currently 1)
    bytes 5..15  reserved, zero
    u32          metadata JSON byte length, then the JSON
    u32          array count
    per array:   u16 name length + UTF-8 name, u8 dtype code, u8 ndim,
                 ndim x u32 shape, raw buffer
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

CKPT_MAGIC = b"MCKP"
CKPT_VERSION = 1
_HEADER = struct.Struct("<4sB11s")

_DTYPE_CODES: dict[str, int] = {"<f4": 0, "<f8": 1, "<i8": 2, "|u1": 3, "<i4": 4}
_CODE_DTYPES = {v: np.dtype(k) for k, v in _DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    meta: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))


def _dtype_code(arr: np.ndarray) -> int:
    key = arr.dtype.newbyteorder("<").str if arr.dtype.kind != "u" else "|u1"
    if arr.dtype == np.uint8:
        key = "|u1"
    if key not in _DTYPE_CODES:
        raise CheckpointError(f"unsupported array dtype {arr.dtype}")
    return _DTYPE_CODES[key]


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_bytes = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, b"\x00" * 11))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(ckpt.arrays)))
        for name in sorted(ckpt.arrays):
            arr = np.asarray(ckpt.arrays[name])  # keep 0-d arrays 0-d
            code = _dtype_code(arr)
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<BB", code, arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _HEADER.size + 4:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, _ = _HEADER.unpack_from(raw, 0)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version mismatch: expected {CKPT_VERSION}, found {version}"
        )
    offset = _HEADER.size
    try:
        (meta_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        try:
            meta = json.loads(raw[offset : offset + meta_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt metadata block") from exc
        offset += meta_len
        (n_arrays,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        arrays: dict[str, np.ndarray] = {}
        for _ in range(n_arrays):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset : offset + name_len].decode("utf-8")
            offset += name_len
            code, ndim = struct.unpack_from("<BB", raw, offset)
            offset += 2
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"{path}: unknown dtype code {code} for array {name!r}")
            shape = struct.unpack_from(f"<{ndim}I", raw, offset) if ndim else ()
            offset += 4 * ndim
            dtype = _CODE_DTYPES[code]
            count = int(np.prod(shape)) if ndim else 1
            nbytes = count * dtype.itemsize
            if offset + nbytes > len(raw):
                raise CheckpointError(f"{path}: truncated array payload for {name!r}")
            arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape)
            arrays[name] = arr.copy()
            offset += nbytes
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return Checkpoint(meta=meta, arrays=arrays)
