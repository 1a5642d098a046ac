"""Binary checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes  b"CCM1"
    version u32      currently 1
    count   u32      number of parameter records
    then per parameter, in order:
        name_len u32
        name     name_len bytes, utf-8
        dtype    u8   0 = float32, 1 = float64
        rank     u8
        dims     rank * u32
        data     raw little-endian values, C order

Round trips are bit-exact: load(save(params)) reproduces every array
bit for bit, in the same order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Parameter

__all__ = ["MAGIC", "VERSION", "save_checkpoint", "load_checkpoint", "restore_into", "CheckpointError"]

MAGIC = b"CCM1"
VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


def save_checkpoint(path, params: list[Parameter] | dict[str, Parameter]) -> None:
    if isinstance(params, dict):
        items = [(name, p.value) for name, p in params.items()]
    else:
        items = [(p.name, p.value) for p in params]
    chunks = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, value in items:
        arr = np.ascontiguousarray(value)
        tag = _DTYPE_TAGS.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", tag, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        chunks.append(le.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint into an ordered name -> array mapping."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + name_len].decode("utf-8")
        off += name_len
        tag, rank = struct.unpack_from("<BB", buf, off)
        off += 2
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        dtype = _TAG_DTYPES[tag]
        n_elem = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = n_elem * dtype.itemsize
        raw = buf[off:off + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"{name}: truncated data")
        off += nbytes
        arr = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="), copy=True)
        if name in out:
            raise CheckpointError(f"duplicate parameter name {name!r}")
        out[name] = arr
    if off != len(buf):
        raise CheckpointError("trailing bytes after last record")
    return out


def restore_into(params: list[Parameter] | dict[str, Parameter], loaded: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into live parameters, matching by name.
    Name or shape mismatches raise."""
    items = params.values() if isinstance(params, dict) else params
    by_name = {p.name: p for p in items}
    if set(by_name) != set(loaded):
        missing = set(by_name) - set(loaded)
        extra = set(loaded) - set(by_name)
        raise CheckpointError(f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, arr in loaded.items():
        p = by_name[name]
        if p.value.shape != arr.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != expected {p.value.shape}")
        p.value = arr.astype(p.value.dtype, copy=True)
