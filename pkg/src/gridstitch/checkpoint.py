"""Flat binary checkpoint format for named parameter sets.

Layout (all little-endian):
    magic  b"GSCP"
    u32    version (currently 1)
    u32    parameter count
  then per parameter, in insertion order:
    u16    name length, followed by utf-8 name bytes
    u8     ndim
    u32[]  dims
    f64[]  row-major data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autograd import Tensor

MAGIC = b"GSCP"
VERSION = 1


def save(params: dict[str, Tensor | np.ndarray], path: str | Path) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, p in params.items():
        arr = np.asarray(p.data if isinstance(p, Tensor) else p, dtype="<f8")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        out[name] = arr.astype(np.float64)
    return out


def load_into(path: str | Path, params: dict[str, Tensor]) -> None:
    """Restore saved arrays into an existing parameter dict."""
    loaded = load(path)
    missing = set(params) - set(loaded)
    extra = set(loaded) - set(params)
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, arr in loaded.items():
        if params[name].data.shape != arr.shape:
            raise ValueError(f"checkpoint {name}: shape {arr.shape} != {params[name].data.shape}")
        params[name].data = arr.copy()
