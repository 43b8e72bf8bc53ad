"""The PFCK checkpoint format.

``PFCK``, u32 format version, u32 length + JSON config blob, then named
tensors (u32 name length, name, u32 rank, u32 dims..., f32 data) and a
trailing CRC32 over every preceding byte. All integers little-endian.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"PFCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob]
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f4")  # tobytes() is C order; ascontiguousarray would make 0-d 1-d
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a PFCK checkpoint")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{source}: CRC mismatch, checkpoint is corrupt")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    try:
        (n,) = struct.unpack_from("<I", body, 8)
        config = json.loads(body[12:12 + n].decode("utf-8"))
        off = 12 + n
        tensors = {}
        while off < len(body):
            (ln,) = struct.unpack_from("<I", body, off)
            name = body[off + 4:off + 4 + ln].decode("utf-8")
            off += 4 + ln
            (rank,) = struct.unpack_from("<I", body, off)
            dims = struct.unpack_from(f"<{rank}I", body, off + 4)
            off += 4 + 4 * rank
            count = int(np.prod(dims)) if rank else 1
            tensors[name] = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)
            off += 4 * count
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{source}: malformed checkpoint ({exc})") from None
    return config, tensors


def save_checkpoint(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(config, tensors))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint {path}")
    return decode_checkpoint(path.read_bytes(), str(path))
