"""Lossless segment container for masked frames.

Plaintext layout, all integers big-endian::

    b"OSP1" | label:i16 | width:u16 | height:u16 | t0:u32 | count:u32
    then per frame:
        t:u32 | pairs:u32 | pairs x (absent:varint, present:varint, present*3 RGB bytes)

Pixels are scanned row-major. A pixel is "absent" when it is exact black
(0, 0, 0); absent spans cost one varint regardless of length. The whole
record stream is then deflate-compressed (zlib framing).
"""
from __future__ import annotations

import struct
import zlib
from typing import Sequence

import numpy as np

from .partition import MaskedFrame

MAGIC = b"OSP1"
_HEADER = struct.Struct(">4shHHII")
_FRAME = struct.Struct(">II")
COMPRESSION_LEVEL = 6


class CodecError(ValueError):
    pass


def write_varint(value: int, out: bytearray) -> None:
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


def read_varint(buf: memoryview | bytes, pos: int) -> tuple[int, int]:
    result = shift = 0
    while True:
        if pos >= len(buf):
            raise CodecError("truncated varint")
        byte = buf[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7


def _runs(present: np.ndarray) -> list[tuple[int, int]]:
    """``(absent, present)`` run-length pairs covering a flat boolean mask."""
    n = present.size
    if n == 0:
        return []
    change = np.flatnonzero(np.diff(present.astype(np.int8))) + 1
    bounds = np.concatenate(([0], change, [n]))
    pairs: list[tuple[int, int]] = []
    absent = 0
    for start, stop in zip(bounds[:-1], bounds[1:]):
        length = int(stop - start)
        if present[start]:
            pairs.append((absent, length))
            absent = 0
        else:
            absent = length
    if absent or not pairs:
        pairs.append((absent, 0))
    return pairs


def encode_frame_record(t: int, pixels: np.ndarray) -> bytes:
    flat = np.ascontiguousarray(pixels).reshape(-1, 3)
    present = flat.any(axis=1)
    pairs = _runs(present)
    out = bytearray(_FRAME.pack(t, len(pairs)))
    pos = 0
    for absent, count in pairs:
        write_varint(absent, out)
        write_varint(count, out)
        pos += absent
        if count:
            out += flat[pos : pos + count].tobytes()
            pos += count
    return bytes(out)


def decode_frame_record(buf: memoryview, pos: int, width: int, height: int) -> tuple[int, np.ndarray, int]:
    if pos + _FRAME.size > len(buf):
        raise CodecError("truncated frame record")
    t, n_pairs = _FRAME.unpack_from(buf, pos)
    pos += _FRAME.size
    flat = np.zeros((width * height, 3), dtype=np.uint8)
    cursor = 0
    for _ in range(n_pairs):
        absent, pos = read_varint(buf, pos)
        count, pos = read_varint(buf, pos)
        cursor += absent
        if count:
            end = pos + 3 * count
            if end > len(buf) or cursor + count > width * height:
                raise CodecError("pixel run overflows frame")
            flat[cursor : cursor + count] = np.frombuffer(buf[pos:end], dtype=np.uint8).reshape(-1, 3)
            pos = end
            cursor += count
    if cursor != width * height:
        raise CodecError(f"frame {t} covers {cursor} of {width * height} pixels")
    return t, flat.reshape(height, width, 3), pos


def encode_raw(frames: Sequence[MaskedFrame]) -> bytes:
    """Uncompressed record stream (exposed for size accounting)."""
    if not frames:
        raise CodecError("cannot encode an empty segment")
    label = frames[0].label
    height, width = frames[0].pixels.shape[:2]
    for prev, cur in zip(frames, frames[1:]):
        if cur.t != prev.t + 1:
            raise CodecError(f"frames not contiguous: {prev.t} then {cur.t}")
    out = bytearray(_HEADER.pack(MAGIC, label, width, height, frames[0].t, len(frames)))
    for f in frames:
        if f.label != label:
            raise CodecError(f"mixed labels in one segment: {label} and {f.label}")
        if f.pixels.shape != (height, width, 3):
            raise CodecError("frame size changes within segment")
        out += encode_frame_record(f.t, f.pixels)
    return bytes(out)


def encode_segment(frames: Sequence[MaskedFrame]) -> bytes:
    return zlib.compress(encode_raw(frames), COMPRESSION_LEVEL)


def decode_segment(data: bytes) -> list[MaskedFrame]:
    try:
        raw = zlib.decompress(data)
    except zlib.error as exc:
        raise CodecError(f"bad deflate stream: {exc}") from None
    buf = memoryview(raw)
    if len(buf) < _HEADER.size:
        raise CodecError("truncated segment header")
    magic, label, width, height, t0, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CodecError(f"bad magic {magic!r}")
    pos = _HEADER.size
    frames = []
    for i in range(count):
        t, pixels, pos = decode_frame_record(buf, pos, width, height)
        if t != t0 + i:
            raise CodecError(f"frame index {t}, expected {t0 + i}")
        frames.append(MaskedFrame(label, t, pixels))
    if pos != len(buf):
        raise CodecError("trailing bytes after last frame")
    return frames


def present_pixel_count(data: bytes) -> int:
    """Number of non-absent pixels carried by an encoded segment."""
    return sum(int(f.pixels.any(axis=2).sum()) for f in decode_segment(data))
