"""The PFV1 feature/embedding container.

Layout (little-endian): magic ``PFV1``, then records back to back until EOF.
Each record is ``u32 len, clip_id bytes (utf-8), u32 chunk_index, u8 view
tag, u32 rows, u32 cols, rows*cols f32`` in row-major order.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .features import VIEW_TAGS, VIEWS

MAGIC = b"PFV1"
_HEAD = struct.Struct("<IBII")


class CacheError(ValueError):
    pass


@dataclass
class Record:
    clip_id: str
    chunk_index: int
    view: str
    data: np.ndarray

    @property
    def key(self) -> tuple[str, int]:
        return self.clip_id, self.chunk_index


def encode_record(rec: Record) -> bytes:
    arr = np.ascontiguousarray(rec.data, dtype="<f4")
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise CacheError(f"record payload must be 1-D or 2-D, got shape {arr.shape}")
    cid = rec.clip_id.encode("utf-8")
    return (struct.pack("<I", len(cid)) + cid
            + _HEAD.pack(rec.chunk_index, VIEW_TAGS[rec.view], arr.shape[0], arr.shape[1])
            + arr.tobytes())


def write_records(path, records: Iterable[Record]) -> int:
    """Atomically write a container; returns the record count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    n = 0
    try:
        with tmp.open("wb") as fh:
            fh.write(MAGIC)
            for rec in records:
                fh.write(encode_record(rec))
                n += 1
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
    return n


def iter_records(buf: bytes, source: str = "<bytes>") -> Iterator[Record]:
    if buf[:4] != MAGIC:
        raise CacheError(f"{source}: not a PFV1 container")
    off = 4
    while off < len(buf):
        start = off
        try:
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            if off + n > len(buf):
                raise struct.error
            cid = buf[off:off + n].decode("utf-8")
            off += n
            chunk, tag, rows, cols = _HEAD.unpack_from(buf, off)
            off += _HEAD.size
            size = rows * cols * 4
            if off + size > len(buf):
                raise struct.error
            data = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols)
            off += size
        except (struct.error, UnicodeDecodeError):
            raise CacheError(f"{source}: truncated record at byte offset {start}") from None
        if tag >= len(VIEWS):
            raise CacheError(f"{source}: unknown view tag {tag} at byte offset {start}")
        yield Record(cid, chunk, VIEWS[tag], data)


def read_records(path) -> list[Record]:
    path = Path(path)
    if not path.exists():
        raise CacheError(f"missing cache file {path}")
    return list(iter_records(path.read_bytes(), str(path)))


def load_table(path, view: str | None = None) -> dict[tuple[str, int], np.ndarray]:
    table = {}
    for r in read_records(path):
        if view is not None and r.view != view:
            raise CacheError(f"{path}: record {r.key} has view {r.view!r}, expected {view!r}")
        table[r.key] = r.data
    return table


def split_keys(table: dict, records) -> list[tuple[str, int]]:
    """Cached chunk keys of ``records`` in record order; every clip needs chunks 0..n-1."""
    by_clip: dict[str, list[int]] = {}
    for cid, idx in table:
        by_clip.setdefault(cid, []).append(idx)
    keys = []
    missing = []
    for r in records:
        idx = sorted(by_clip.get(r.clip_id, []))
        if not idx or idx != list(range(len(idx))):
            missing.append(r.clip_id)
            continue
        keys.extend((r.clip_id, i) for i in idx)
    if missing:
        shown = ", ".join(missing[:10]) + (f" and {len(missing) - 10} more" if len(missing) > 10 else "")
        raise CacheError(f"feature cache lacks complete chunks for clip(s) {shown}")
    return keys


def assemble(table: dict, records, n_classes: int) -> tuple[list[tuple[str, int]], np.ndarray, np.ndarray]:
    """Stack cached rows and multi-hot chunk targets for ``records``."""
    records = list(records)
    keys = split_keys(table, records)
    labels = {r.clip_id: r.multi_hot(n_classes) for r in records}
    if not keys:
        return keys, np.zeros((0, 0, 0), np.float32), np.zeros((0, n_classes), np.float32)
    x = np.stack([table[k] for k in keys]).astype(np.float32)
    y = np.stack([labels[c] for c, _ in keys]).astype(np.float32)
    return keys, x, y
