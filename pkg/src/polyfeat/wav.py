"""RIFF/WAVE reading and writing.

Reads PCM integer (8/16/24/32-bit) and IEEE float (32/64-bit) data, plain or
WAVE_FORMAT_EXTENSIBLE. Writes 16-bit PCM.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

PCM = 0x0001
IEEE_FLOAT = 0x0003
EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    pass


def _need(buf: bytes, offset: int, n: int, what: str):
    if offset + n > len(buf):
        raise WavError(f"truncated WAV: expected {n} bytes of {what} at byte offset {offset}, file has {len(buf)}")


def parse_wav(buf: bytes) -> tuple[np.ndarray, int]:
    """Decode WAV bytes to ``(samples, rate)`` with samples shaped (frames, channels) in [-1, 1]."""
    _need(buf, 0, 12, "RIFF header")
    if buf[0:4] != b"RIFF" or buf[8:12] != b"WAVE":
        raise WavError("not a RIFF/WAVE file (bad magic at byte offset 0)")
    fmt = None
    data = None
    offset = 12
    while offset + 8 <= len(buf):
        cid = buf[offset:offset + 4]
        (size,) = struct.unpack_from("<I", buf, offset + 4)
        body = offset + 8
        if cid == b"fmt ":
            _need(buf, body, 16, "fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", buf, body)
            tag = fmt[0]
            if tag == EXTENSIBLE:
                _need(buf, body, 40, "extensible fmt chunk")
                (sub,) = struct.unpack_from("<H", buf, body + 24)
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            _need(buf, body, size, "data chunk")
            data = (body, size)
        offset = body + size + (size & 1)
    if fmt is None:
        raise WavError(f"no fmt chunk found before byte offset {offset}")
    if data is None:
        raise WavError(f"no data chunk found before byte offset {offset}")
    tag, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate < 1:
        raise WavError(f"invalid fmt chunk: {channels} channels at {rate} Hz")
    start, size = data
    width = bits // 8
    if block_align != width * channels:
        raise WavError(f"inconsistent block alignment {block_align} for {channels}x{bits}-bit")
    if size % block_align:
        raise WavError(f"truncated WAV: data chunk at byte offset {start} ends mid-frame ({size} bytes)")
    raw = buf[start:start + size]
    if tag == PCM:
        if bits == 8:
            x = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
        elif bits == 16:
            x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
        elif bits == 24:
            b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
            v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
            v = np.where(v >= 1 << 23, v - (1 << 24), v)
            x = v.astype(np.float64) / float(1 << 23)
        elif bits == 32:
            x = np.frombuffer(raw, dtype="<i4").astype(np.float64) / 2147483648.0
        else:
            raise WavError(f"unsupported PCM bit depth {bits}")
    elif tag == IEEE_FLOAT:
        if bits == 32:
            x = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        elif bits == 64:
            x = np.frombuffer(raw, dtype="<f8").copy()
        else:
            raise WavError(f"unsupported float bit depth {bits}")
        if not np.all(np.isfinite(x)):
            raise WavError("float WAV contains non-finite samples")
        x = np.clip(x, -1.0, 1.0)
    else:
        raise WavError(f"unsupported WAV encoding (format tag 0x{tag:04x})")
    return x.reshape(-1, channels), rate


def read_wav(path) -> tuple[np.ndarray, int]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise WavError(f"cannot read {path}: {exc}") from exc
    try:
        return parse_wav(buf)
    except WavError as exc:
        raise WavError(f"{path}: {exc}") from None


def encode_wav16(samples: np.ndarray, rate: int) -> bytes:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    channels = x.shape[1]
    pcm = np.clip(np.round(x * 32767.0), -32768, 32767).astype("<i2").tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(pcm), b"WAVE",
        b"fmt ", 16, PCM, channels, rate, rate * 2 * channels, 2 * channels, 16,
        b"data", len(pcm),
    )
    return header + pcm


def write_wav16(path, samples: np.ndarray, rate: int) -> None:
    Path(path).write_bytes(encode_wav16(samples, rate))
