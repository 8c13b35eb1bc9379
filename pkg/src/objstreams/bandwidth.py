"""Edge bandwidth accounting: composable streams vs. per-consumer redacted streams.

Bandwidth is approximated as total published segment bytes divided by the
video duration.
"""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

from .codec import encode_segment
from .partition import MaskedFrame
from .pipeline import EdgeSession, decode_session_frames
from .scene import BACKGROUND, BACKGROUND_NAME, ClassUniverse
from .segments import KIND_VIDEO, chunk_ranges, seal

SCHEMES = ("composable", "naive-whitelist", "naive-blacklist")
ALL_CLASSES = "all"


@dataclass
class ConsumerSpec:
    id: str
    whitelist: list[str] = field(default_factory=list)
    blacklist: list[str] = field(default_factory=list)

    def allowed_labels(self, universe: ClassUniverse) -> set[int]:
        """Labels visible under whitelisting (``all`` expands to every class)."""
        labels = set()
        for name in self.whitelist:
            if name == ALL_CLASSES:
                labels |= set(range(len(universe)))
            else:
                labels.add(universe.label(name))
        return labels

    def blocked_labels(self, universe: ClassUniverse) -> set[int]:
        return {universe.id(name) for name in self.blacklist}


def smart_city_consumers(vehicle: Sequence[str] = ("car", "truck")) -> list[ConsumerSpec]:
    """The five-application smart-city scenario, in its published order."""
    vehicle = list(vehicle)
    return [
        ConsumerSpec("traffic-management", vehicle, ["person"]),
        ConsumerSpec("safety-alerts", ["person"], vehicle),
        ConsumerSpec("bicycle-safety", ["bicycle"], vehicle + ["person"]),
        ConsumerSpec("two-wheeler-counting", ["bicycle", "motorbike"], vehicle + ["person"]),
        ConsumerSpec("surveillance", [ALL_CLASSES, BACKGROUND_NAME], []),
    ]


def load_consumers(path: str | os.PathLike) -> list[ConsumerSpec]:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    items = doc["consumers"] if isinstance(doc, Mapping) else doc
    return [ConsumerSpec(str(c["id"]), list(c.get("whitelist") or []), list(c.get("blacklist") or [])) for c in items]


@dataclass
class BandwidthReport:
    scheme: str
    consumers: list[str]
    duration_s: float
    edge_bytes: int
    per_consumer_bytes: dict[str, int]

    @property
    def edge_bytes_per_s(self) -> float:
        return self.edge_bytes / self.duration_s if self.duration_s else 0.0

    def to_json(self) -> str:
        doc = asdict(self)
        doc["edge_bytes_per_s"] = self.edge_bytes_per_s
        return json.dumps(doc, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scheme", "consumer", "bytes", "bytes_per_s"])
        for cid, size in self.per_consumer_bytes.items():
            w.writerow([self.scheme, cid, size, size / self.duration_s if self.duration_s else 0.0])
        w.writerow([self.scheme, "EDGE", self.edge_bytes, self.edge_bytes_per_s])
        return buf.getvalue()


def _stream_bytes(session: EdgeSession) -> dict[str, int]:
    return {name: sum(e.bytes for e in entries) for name, entries in session.manifest.video.items()}


def redacted_stream_bytes(frames: np.ndarray, keep: np.ndarray, segment_length: int) -> int:
    """Size of one consumer-specific stream showing only pixels where ``keep``."""
    masked = np.where(keep[..., None], frames, 0).astype(np.uint8)
    total = 0
    for a, b in chunk_ranges(len(frames), segment_length):
        chunk = [MaskedFrame(BACKGROUND, t, masked[t]) for t in range(a, b)]
        seg = seal(KIND_VIDEO, BACKGROUND, 0, a, b, 0, encode_segment(chunk), b"\0" * 16, b"\0" * 16)
        total += seg.size
    return total


def account_bandwidth(
    session: EdgeSession,
    scheme: str,
    consumers: Iterable[ConsumerSpec],
    frames: np.ndarray | None = None,
    grids: np.ndarray | None = None,
) -> BandwidthReport:
    """Edge bytes for serving ``consumers`` under ``scheme``.

    ``frames``/``grids`` may be passed to skip decoding the session again.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    consumers = list(consumers)
    m = session.manifest
    universe = m.universe
    duration = m.n_frames / m.fps if m.fps else 0.0
    streams = _stream_bytes(session)
    per_consumer: dict[str, int] = {}

    if scheme == "composable":
        for c in consumers:
            names = {universe.label_name(label) for label in c.allowed_labels(universe)}
            per_consumer[c.id] = sum(size for name, size in streams.items() if name in names)
        edge = sum(streams.values())
        return BandwidthReport(scheme, [c.id for c in consumers], duration, edge, per_consumer)

    if frames is None:
        frames = decode_session_frames(session)
    if grids is None:
        grids = session.assignments()
    for c in consumers:
        if scheme == "naive-whitelist":
            keep = np.isin(grids, sorted(c.allowed_labels(universe)))
        else:
            keep = ~np.isin(grids, sorted(c.blocked_labels(universe)))
        per_consumer[c.id] = redacted_stream_bytes(frames, keep, m.segment_length)
    return BandwidthReport(scheme, [c.id for c in consumers], duration, sum(per_consumer.values()), per_consumer)
