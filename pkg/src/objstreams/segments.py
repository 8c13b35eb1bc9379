"""Segment encryption, the ``CSEG1`` file format, metadata records and manifests.

Segment file layout (big-endian)::

    b"CSEG1" | kind:u8 | label:i16 | index:u32 | t0:u32 | t1:u32 | epoch:u32
            | iv:16 bytes | sha256(plaintext):32 bytes | length:u32 | ciphertext

``kind`` is 0 for video, 1 for metadata and 2 for supplemental
(reprocessed) metadata. Ciphertext is AES-128-CBC with PKCS#7 padding.
"""
from __future__ import annotations

import hashlib
import hmac
import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

from cryptography.hazmat.primitives import padding
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .codec import encode_segment
from .partition import MaskedFrame
from .scene import BoundingBox, ClassUniverse, Detection

SEGMENT_MAGIC = b"CSEG1"
_SEG_HEADER = struct.Struct(">5sBhIIII16s32sI")
KIND_VIDEO, KIND_METADATA, KIND_SUPPLEMENTAL = 0, 1, 2
KIND_NAMES = {KIND_VIDEO: "video", KIND_METADATA: "metadata", KIND_SUPPLEMENTAL: "supplemental"}
MANIFEST_SCHEMA = 1
DEFAULT_SEGMENT_LENGTH = 48
DEFAULT_EPOCH_PERIOD = 10


class SegmentError(ValueError):
    """Malformed or truncated segment data."""


class DigestMismatch(SegmentError):
    """Decrypted plaintext does not match the recorded digest (wrong key or tampering)."""


# ---------------------------------------------------------------------------
# AES-128-CBC


def aes_cbc_encrypt_blocks(data: bytes, key: bytes, iv: bytes) -> bytes:
    """Raw CBC over whole blocks, no padding."""
    if len(data) % 16:
        raise ValueError("raw CBC input must be a multiple of 16 bytes")
    enc = Cipher(algorithms.AES(key), modes.CBC(iv)).encryptor()
    return enc.update(data) + enc.finalize()


def aes_cbc_decrypt_blocks(data: bytes, key: bytes, iv: bytes) -> bytes:
    if len(data) % 16:
        raise SegmentError("ciphertext length is not a multiple of the block size")
    dec = Cipher(algorithms.AES(key), modes.CBC(iv)).decryptor()
    return dec.update(data) + dec.finalize()


def encrypt_segment(plaintext: bytes, key: bytes, iv: bytes) -> bytes:
    if len(key) != 16 or len(iv) != 16:
        raise ValueError("AES-128 needs a 16-byte key and IV")
    padder = padding.PKCS7(128).padder()
    return aes_cbc_encrypt_blocks(padder.update(plaintext) + padder.finalize(), key, iv)


def decrypt_segment(ciphertext: bytes, key: bytes, iv: bytes, digest: bytes) -> bytes:
    """Inverse of :func:`encrypt_segment`; fails closed unless sha256 matches."""
    if not ciphertext:
        raise SegmentError("empty ciphertext")
    padded = aes_cbc_decrypt_blocks(ciphertext, key, iv)
    unpadder = padding.PKCS7(128).unpadder()
    try:
        plaintext = unpadder.update(padded) + unpadder.finalize()
    except ValueError:
        raise DigestMismatch("bad padding after decryption") from None
    if not hmac.compare_digest(hashlib.sha256(plaintext).digest(), digest):
        raise DigestMismatch("plaintext digest mismatch")
    return plaintext


# ---------------------------------------------------------------------------
# Segment files


@dataclass
class Segment:
    kind: int
    label: int
    index: int
    t0: int
    t1: int
    epoch: int
    iv: bytes
    digest: bytes
    ciphertext: bytes

    def to_bytes(self) -> bytes:
        head = _SEG_HEADER.pack(
            SEGMENT_MAGIC,
            self.kind,
            self.label,
            self.index,
            self.t0,
            self.t1,
            self.epoch,
            self.iv,
            self.digest,
            len(self.ciphertext),
        )
        return head + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> Segment:
        if len(data) < _SEG_HEADER.size:
            raise SegmentError("truncated segment header")
        magic, kind, label, index, t0, t1, epoch, iv, digest, length = _SEG_HEADER.unpack_from(data, 0)
        if magic != SEGMENT_MAGIC:
            raise SegmentError(f"bad segment magic {magic!r}")
        body = data[_SEG_HEADER.size :]
        if len(body) != length:
            raise SegmentError(f"segment body is {len(body)} bytes, header says {length}")
        return cls(kind, label, index, t0, t1, epoch, iv, digest, body)

    @property
    def size(self) -> int:
        return _SEG_HEADER.size + len(self.ciphertext)

    def decrypt(self, key: bytes) -> bytes:
        return decrypt_segment(self.ciphertext, key, self.iv, self.digest)


def seal(kind: int, label: int, index: int, t0: int, t1: int, epoch: int, plaintext: bytes, key: bytes, iv: bytes) -> Segment:
    return Segment(
        kind, label, index, t0, t1, epoch, iv, hashlib.sha256(plaintext).digest(), encrypt_segment(plaintext, key, iv)
    )


# ---------------------------------------------------------------------------
# Metadata records


@dataclass(frozen=True)
class MetadataEntry:
    box: BoundingBox
    confidence: float
    track_id: int | None
    withheld: bool


@dataclass
class MetadataRecord:
    t: int
    entries: list[MetadataEntry] = field(default_factory=list)


def metadata_record(t: int, dets: Iterable[Detection], cls: int, threshold: float) -> MetadataRecord:
    return MetadataRecord(
        t,
        [MetadataEntry(d.box, d.confidence, d.track_id, d.confidence < threshold) for d in dets if d.cls == cls],
    )


def serialize_metadata(class_name: str, records: Sequence[MetadataRecord]) -> bytes:
    """One line per frame: ``t`` then ``x0,y0,x1,y1,confidence,track_id,withheld`` entries."""
    lines = [f"objstreams-meta v1 class={class_name}"]
    for rec in records:
        parts = [str(rec.t)]
        for e in rec.entries:
            b = e.box
            tid = -1 if e.track_id is None else e.track_id
            parts.append(f"{b.x0},{b.y0},{b.x1},{b.y1},{e.confidence!r},{tid},{int(e.withheld)}")
        lines.append(" ".join(parts))
    return ("\n".join(lines) + "\n").encode()


def parse_metadata(text: bytes) -> tuple[str, list[MetadataRecord]]:
    lines = text.decode().splitlines()
    if not lines or not lines[0].startswith("objstreams-meta v1 class="):
        raise SegmentError("bad metadata header")
    class_name = lines[0].split("class=", 1)[1]
    records = []
    for line in lines[1:]:
        parts = line.split()
        entries = []
        for item in parts[1:]:
            x0, y0, x1, y1, conf, tid, withheld = item.split(",")
            entries.append(
                MetadataEntry(
                    BoundingBox(int(x0), int(y0), int(x1), int(y1)),
                    float(conf),
                    None if int(tid) < 0 else int(tid),
                    withheld == "1",
                )
            )
        records.append(MetadataRecord(int(parts[0]), entries))
    return class_name, records


def encode_metadata_plaintext(class_name: str, records: Sequence[MetadataRecord]) -> bytes:
    return zlib.compress(serialize_metadata(class_name, records), 6)


def decode_metadata_plaintext(data: bytes) -> tuple[str, list[MetadataRecord]]:
    try:
        return parse_metadata(zlib.decompress(data))
    except zlib.error as exc:
        raise SegmentError(f"bad metadata deflate stream: {exc}") from None


def encode_metadata_segment(
    class_name: str,
    label: int,
    records: Sequence[MetadataRecord],
    key: bytes,
    index: int,
    epoch: int,
    iv: bytes | None = None,
    kind: int = KIND_METADATA,
) -> Segment:
    if not records:
        raise SegmentError("metadata segment needs at least one record")
    t0, t1 = records[0].t, records[-1].t + 1
    return seal(kind, label, index, t0, t1, epoch, encode_metadata_plaintext(class_name, records), key, iv or os.urandom(16))


# ---------------------------------------------------------------------------
# Key epochs and chunking


@dataclass
class KeyEpoch:
    epoch: int
    first_segment: int
    keys: dict[int, bytes]  # stream label -> 16-byte key
    last_segment: int | None = None

    def covers(self, index: int) -> bool:
        return index >= self.first_segment and (self.last_segment is None or index <= self.last_segment)


def epoch_for(epochs: Sequence[KeyEpoch], index: int) -> KeyEpoch:
    for ep in epochs:
        if ep.covers(index):
            return ep
    raise LookupError(f"no key epoch covers segment {index}")


def chunk_ranges(n_frames: int, segment_length: int) -> list[tuple[int, int]]:
    if segment_length < 1:
        raise ValueError("segment_length must be >= 1")
    return [(t0, min(t0 + segment_length, n_frames)) for t0 in range(0, n_frames, segment_length)]


def segment_stream(
    masked: Sequence[MaskedFrame],
    label: int,
    segment_length: int,
    epochs: Sequence[KeyEpoch],
    iv_source: Callable[[int], bytes] = os.urandom,
    first_index: int = 0,
) -> list[Segment]:
    """Encode and encrypt one label's masked frames into segments.

    Segment ``i`` holds frames ``[i*L, (i+1)*L)`` relative to the first
    frame and is sealed with the key of the epoch covering ``i``.
    """
    out = []
    for offset, (a, b) in enumerate(chunk_ranges(len(masked), segment_length)):
        index = first_index + offset
        frames = masked[a:b]
        if any(f.label != label for f in frames):
            raise SegmentError("masked frame with a different label")
        ep = epoch_for(epochs, index)
        plaintext = encode_segment(frames)
        out.append(seal(KIND_VIDEO, label, index, frames[0].t, frames[-1].t + 1, ep.epoch, plaintext, ep.keys[label], iv_source(16)))
    return out


# ---------------------------------------------------------------------------
# Manifest


@dataclass
class SegmentEntry:
    uri: str
    index: int
    t0: int
    t1: int
    epoch: int
    iv: str
    digest: str
    bytes: int


@dataclass
class Manifest:
    """Playlist of all published segments (serialized as JSON)."""

    session_id: str
    width: int
    height: int
    fps: float
    classes: list[str]
    segment_length: int
    video: dict[str, list[SegmentEntry]] = field(default_factory=dict)
    metadata: dict[str, list[SegmentEntry]] = field(default_factory=dict)
    supplemental: dict[str, list[SegmentEntry]] = field(default_factory=dict)
    epochs: list[dict] = field(default_factory=list)
    class_changes: list[dict] = field(default_factory=list)
    n_frames: int = 0
    complete: bool = False
    schema: int = MANIFEST_SCHEMA

    @property
    def universe(self) -> ClassUniverse:
        return ClassUniverse(self.classes)

    def add(self, kind: int, stream: str, seg: Segment, uri: str) -> SegmentEntry:
        entry = SegmentEntry(uri, seg.index, seg.t0, seg.t1, seg.epoch, seg.iv.hex(), seg.digest.hex(), seg.size)
        table = {KIND_VIDEO: self.video, KIND_METADATA: self.metadata, KIND_SUPPLEMENTAL: self.supplemental}[kind]
        table.setdefault(stream, []).append(entry)
        return entry

    def to_json(self) -> str:
        doc = {
            "schema": self.schema,
            "session_id": self.session_id,
            "width": self.width,
            "height": self.height,
            "fps": self.fps,
            "classes": self.classes,
            "segment_length": self.segment_length,
            "n_frames": self.n_frames,
            "complete": self.complete,
            "epochs": self.epochs,
            "class_changes": self.class_changes,
            "streams": {
                name: {stream: [asdict(e) for e in entries] for stream, entries in table.items()}
                for name, table in (("video", self.video), ("metadata", self.metadata), ("supplemental", self.supplemental))
            },
        }
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> Manifest:
        doc = json.loads(text)
        if doc.get("schema") != MANIFEST_SCHEMA:
            raise ValueError(f"unsupported manifest schema {doc.get('schema')}")
        streams = doc.get("streams", {})

        def table(name):
            return {s: [SegmentEntry(**e) for e in entries] for s, entries in streams.get(name, {}).items()}

        return cls(
            session_id=doc["session_id"],
            width=doc["width"],
            height=doc["height"],
            fps=doc["fps"],
            classes=list(doc["classes"]),
            segment_length=doc["segment_length"],
            video=table("video"),
            metadata=table("metadata"),
            supplemental=table("supplemental"),
            epochs=list(doc.get("epochs", [])),
            class_changes=list(doc.get("class_changes", [])),
            n_frames=doc.get("n_frames", 0),
            complete=doc.get("complete", False),
        )
