"""Application-side client: fetch, decrypt, compose and count."""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence
from urllib.parse import urljoin

import httpx
import numpy as np

from .codec import CodecError, decode_segment
from .partition import MaskedFrame, compose
from .scene import BoundingBox
from .segments import (
    DigestMismatch,
    Manifest,
    MetadataRecord,
    Segment,
    SegmentEntry,
    SegmentError,
    decode_metadata_plaintext,
)
from .traceio import write_frame_dir


class Keyring:
    """Keys by ``(stream name, epoch)``, merged from grants and warrants."""

    def __init__(self, grants: Iterable[Mapping] = ()):
        self.keys: dict[tuple[str, int], bytes] = {}
        for g in grants:
            self.add_grant(g)

    def add_grant(self, grant: Mapping) -> None:
        for cls in grant.get("classes", []):
            for ep in cls["epochs"]:
                self.keys[(cls["class"], int(ep["epoch"]))] = bytes.fromhex(ep["key"])

    def get(self, stream: str, epoch: int) -> bytes | None:
        return self.keys.get((stream, epoch))

    def streams(self) -> set[str]:
        return {name for name, _ in self.keys}

    def __len__(self) -> int:
        return len(self.keys)


class Fetcher:
    """Reads manifest-relative URIs from a directory or over HTTP."""

    def __init__(self, manifest_uri: str, http: httpx.Client | None = None):
        self.is_http = manifest_uri.startswith(("http://", "https://"))
        if self.is_http:
            self.manifest_url = manifest_uri if manifest_uri.endswith(".json") else manifest_uri.rstrip("/") + "/manifest.json"
            self.http = http or httpx.Client(timeout=30.0)
        else:
            p = Path(manifest_uri)
            self.manifest_path = p / "manifest.json" if p.is_dir() else p
            self.http = None

    def manifest(self) -> Manifest:
        if self.is_http:
            resp = self.http.get(self.manifest_url)
            resp.raise_for_status()
            return Manifest.from_json(resp.text)
        return Manifest.from_json(self.manifest_path.read_text())

    def fetch(self, uri: str) -> bytes:
        if self.is_http:
            resp = self.http.get(urljoin(self.manifest_url, uri))
            resp.raise_for_status()
            return resp.content
        return (self.manifest_path.parent / uri).read_bytes()


@dataclass
class SegmentIssue:
    stream: str
    kind: str
    index: int
    reason: str


@dataclass
class ComposeResult:
    frames: np.ndarray
    metadata: dict[str, dict[int, MetadataRecord]]
    decoded: dict[str, list[int]]
    skipped: list[SegmentIssue] = field(default_factory=list)
    gaps: list[SegmentIssue] = field(default_factory=list)
    stored_bytes: int = 0
    opaque_segments: int = 0


def _load_segment(fetcher: Fetcher, entry: SegmentEntry, store: Path | None) -> bytes:
    data = fetcher.fetch(entry.uri)
    if store is not None:
        target = store / entry.uri
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)
    return data


def _open(data: bytes, entry: SegmentEntry, key: bytes) -> bytes:
    seg = Segment.from_bytes(data)
    if seg.digest.hex() != entry.digest or seg.iv.hex() != entry.iv:
        raise DigestMismatch("segment header disagrees with manifest")
    return seg.decrypt(key)


@dataclass
class _Pulled:
    stream: str
    kind: str
    payloads: list[bytes] = field(default_factory=list)
    skipped: list[SegmentIssue] = field(default_factory=list)
    gaps: list[SegmentIssue] = field(default_factory=list)
    stored_bytes: int = 0
    opaque: int = 0
    decoded: list[int] = field(default_factory=list)


def _pull(fetcher: Fetcher, keyring: Keyring, stream: str, kind: str, entries: Sequence[SegmentEntry], store: Path | None) -> _Pulled:
    out = _Pulled(stream, kind)
    for e in entries:
        try:
            data = _load_segment(fetcher, e, store)
        except (OSError, httpx.HTTPError) as exc:
            out.gaps.append(SegmentIssue(stream, kind, e.index, f"missing: {exc}"))
            continue
        out.stored_bytes += len(data)
        key = keyring.get(stream, e.epoch)
        if key is None:
            out.opaque += 1
            continue
        try:
            out.payloads.append(_open(data, e, key))
        except SegmentError as exc:
            out.skipped.append(SegmentIssue(stream, kind, e.index, str(exc)))
            continue
        out.decoded.append(e.index)
    return out


def sync_and_compose(
    manifest_uri: str,
    keyring: Keyring,
    fetch: str = "granted",
    store_dir: str | os.PathLike | None = None,
    http: httpx.Client | None = None,
    workers: int = 4,
) -> ComposeResult:
    """Fetch streams, decrypt those the keyring opens and compose them per frame.

    With ``fetch="all"`` every stream is downloaded (and kept under
    ``store_dir``) even when it cannot be decrypted. Streams are fetched and
    decrypted in parallel; composition waits for all of them.
    """
    if fetch not in ("granted", "all"):
        raise ValueError("fetch must be 'granted' or 'all'")
    fetcher = Fetcher(manifest_uri, http)
    m = fetcher.manifest()
    store = Path(store_dir) if store_dir is not None else None
    granted = keyring.streams()
    jobs = [
        (stream, kind, entries)
        for kind, table in (("video", m.video), ("metadata", m.metadata), ("supplemental", m.supplemental))
        for stream, entries in table.items()
        if fetch == "all" or stream in granted
    ]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        pulled = list(pool.map(lambda job: _pull(fetcher, keyring, *job, store), jobs))

    result = ComposeResult(
        frames=np.zeros((m.n_frames, m.height, m.width, 3), dtype=np.uint8),
        metadata={},
        decoded={},
    )
    per_frame: list[list[MaskedFrame]] = [[] for _ in range(m.n_frames)]
    for p in pulled:  # job order: video, metadata, then supplemental so it wins
        result.skipped += p.skipped
        result.gaps += p.gaps
        result.stored_bytes += p.stored_bytes
        result.opaque_segments += p.opaque
        if p.kind == "video":
            for payload, index in zip(p.payloads, p.decoded):
                try:
                    frames = decode_segment(payload)
                except CodecError as exc:
                    result.skipped.append(SegmentIssue(p.stream, p.kind, index, str(exc)))
                    continue
                result.decoded.setdefault(p.stream, []).append(index)
                for f in frames:
                    per_frame[f.t].append(f)
            continue
        by_t = result.metadata.setdefault(p.stream, {})
        for payload, index in zip(p.payloads, p.decoded):
            try:
                _, records = decode_metadata_plaintext(payload)
            except SegmentError as exc:
                result.skipped.append(SegmentIssue(p.stream, p.kind, index, str(exc)))
                continue
            for rec in records:
                by_t[rec.t] = rec
    for t, masked in enumerate(per_frame):
        if masked:
            result.frames[t] = compose(masked)
    return result


# ---------------------------------------------------------------------------
# Counting


@dataclass
class CountResult:
    per_frame: list[tuple[int, int, int]]  # (t, disclosed, withheld)
    disclosed: int
    withheld: int
    region_entries: int | None = None
    region_withheld_entries: int | None = None

    def to_csv(self, class_name: str) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "t", "disclosed", "withheld"])
        for t, d, h in self.per_frame:
            w.writerow([class_name, t, d, h])
        return buf.getvalue()


def _inside(box: BoundingBox, region: BoundingBox) -> bool:
    cx, cy = box.center
    return region.x0 <= cx < region.x1 and region.y0 <= cy < region.y1


def _entries(records: Sequence[MetadataRecord], region: BoundingBox, withheld: bool) -> int:
    inside_prev: dict[int, bool] = {}
    count = 0
    for rec in records:
        seen = set()
        for e in rec.entries:
            if e.withheld != withheld:
                continue
            inside = _inside(e.box, region)
            if e.track_id is None:
                count += int(inside)
                continue
            seen.add(e.track_id)
            if inside and not inside_prev.get(e.track_id, False):
                count += 1
            inside_prev[e.track_id] = inside
        for tid in list(inside_prev):
            if tid not in seen:
                inside_prev[tid] = False
    return count


def count_objects(
    metadata: Mapping[int, MetadataRecord] | Sequence[MetadataRecord],
    region: BoundingBox | None = None,
) -> CountResult:
    """Per-frame counts; with a region, distinct region entries per track id."""
    records = sorted(metadata.values() if isinstance(metadata, Mapping) else metadata, key=lambda r: r.t)
    per_frame = []
    for rec in records:
        withheld = sum(e.withheld for e in rec.entries)
        per_frame.append((rec.t, len(rec.entries) - withheld, withheld))
    result = CountResult(per_frame, sum(d for _, d, _ in per_frame), sum(h for _, _, h in per_frame))
    if region is not None:
        result.region_entries = _entries(records, region, withheld=False)
        result.region_withheld_entries = _entries(records, region, withheld=True)
    return result


def write_outputs(result: ComposeResult, out_dir: str | os.PathLike, region: BoundingBox | None = None) -> None:
    """Frame directory, ``counts.csv`` and ``metadata.jsonl`` for a composed session."""
    out = Path(out_dir)
    write_frame_dir(result.frames, out / "frames")
    with open(out / "counts.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "t", "disclosed", "withheld"])
        totals = []
        for name in sorted(result.metadata):
            counts = count_objects(result.metadata[name], region)
            for t, d, h in counts.per_frame:
                w.writerow([name, t, d, h])
            totals.append((name, counts))
        for name, counts in totals:
            w.writerow([name, "total", counts.disclosed, counts.withheld])
            if region is not None:
                w.writerow([name, "region-entries", counts.region_entries, counts.region_withheld_entries])
    with open(out / "metadata.jsonl", "w") as fh:
        for name in sorted(result.metadata):
            for t in sorted(result.metadata[name]):
                rec = result.metadata[name][t]
                fh.write(
                    json.dumps(
                        {
                            "class": name,
                            "t": t,
                            "objects": [
                                {
                                    "box": list(e.box.as_tuple()),
                                    "confidence": e.confidence,
                                    "track_id": e.track_id,
                                    "withheld": e.withheld,
                                }
                                for e in rec.entries
                            ],
                        }
                    )
                    + "\n"
                )
