"""Little-endian named-tensor container.

Layout: magic ``VTSD0001``, u32 entry count, then per entry a u16 name
length, the UTF-8 name, u8 rank, rank x u32 dims and the f32 payload.
Scalars are rank-0 entries; the config snapshot travels as a rank-1 entry
of byte values under ``meta/config``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"VTSD0001"
CONFIG_KEY = "meta/config"


class CheckpointError(ValueError):
    pass


def to_bytes(tensors: dict, scalars: dict | None = None, config_text: str | None = None) -> bytes:
    entries = {k: np.asarray(v) for k, v in tensors.items()}
    for k, v in (scalars or {}).items():
        entries[k] = np.asarray(v, dtype=np.float32).reshape(())
    if config_text is not None:
        entries[CONFIG_KEY] = np.frombuffer(config_text.encode("utf-8"), dtype=np.uint8)
    out = [MAGIC, struct.pack("<I", len(entries))]
    for name in sorted(entries):
        arr = entries[name]
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF or arr.ndim > 255:
            raise CheckpointError(f"entry {name!r} cannot be encoded")
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def from_bytes(buf: bytes):
    """Returns (tensors, scalars, config_text)."""
    if buf[:4] != MAGIC[:4]:
        raise CheckpointError("not a checkpoint (bad magic)")
    if buf[:8] != MAGIC:
        raise CheckpointError(f"unsupported checkpoint version {buf[4:8]!r}")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("checkpoint truncated")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors, scalars, config_text = {}, {}, None
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
        if name in tensors or name in scalars or (name == CONFIG_KEY and config_text is not None):
            raise CheckpointError(f"duplicate entry {name!r}")
        if name == CONFIG_KEY:
            config_text = arr.astype(np.uint8).tobytes().decode("utf-8")
        elif rank == 0:
            scalars[name] = float(arr)
        else:
            tensors[name] = arr
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes in checkpoint")
    return tensors, scalars, config_text


def save_checkpoint(path, tensors: dict, scalars: dict | None = None, config_text: str | None = None):
    Path(path).write_bytes(to_bytes(tensors, scalars, config_text))


def load_checkpoint(path):
    return from_bytes(Path(path).read_bytes())
