"""Text trace format (``ctrace-v1``), scene config files and raw frame files.

Trace layout::

    format ctrace-v1
    size W H
    classes name0 name1 ...
    frames N                      # optional; trailing empty frames otherwise implicit
    source ground-truth           # optional provenance tag
    t class_index x0 y0 x1 y1 confidence track_id

Detection lines are sorted by frame. ``track_id`` is ``-1`` when absent.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import yaml

from .scene import BoundingBox, ClassUniverse, Detection, DetectionTrace, SceneSpec

FORMAT_TAG = "ctrace-v1"


class TraceFormatError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def dumps_trace(trace: DetectionTrace) -> str:
    lines = [
        f"format {FORMAT_TAG}",
        f"size {trace.width} {trace.height}",
        "classes " + " ".join(trace.classes.names) if len(trace.classes) else "classes",
        f"frames {len(trace.frames)}",
        f"source {trace.provenance}",
    ]
    for dets in trace.frames:
        for d in dets:
            tid = -1 if d.track_id is None else d.track_id
            b = d.box
            lines.append(f"{d.t} {d.cls} {b.x0} {b.y0} {b.x1} {b.y1} {d.confidence!r} {tid}")
    return "\n".join(lines) + "\n"


def loads_trace(text: str) -> DetectionTrace:
    width = height = None
    universe: ClassUniverse | None = None
    n_frames: int | None = None
    provenance = "ground-truth"
    frames: list[list[Detection]] = []
    seen_format = False
    last_t = -1
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key = parts[0]
        if not seen_format:
            if key != "format" or parts[1:] != [FORMAT_TAG]:
                raise TraceFormatError(line_no, f"expected 'format {FORMAT_TAG}'")
            seen_format = True
            continue
        if key == "size":
            if len(parts) != 3:
                raise TraceFormatError(line_no, "size takes W H")
            width, height = int(parts[1]), int(parts[2])
            if width < 1 or height < 1:
                raise TraceFormatError(line_no, "size must be positive")
            continue
        if key == "classes":
            try:
                universe = ClassUniverse(parts[1:])
            except ValueError as exc:
                raise TraceFormatError(line_no, str(exc)) from None
            continue
        if key == "frames":
            n_frames = int(parts[1])
            continue
        if key == "source":
            provenance = " ".join(parts[1:]) or provenance
            continue
        if width is None or universe is None:
            raise TraceFormatError(line_no, "detection before size/classes header")
        if len(parts) != 8:
            raise TraceFormatError(line_no, f"expected 8 fields, got {len(parts)}")
        try:
            t, cls, x0, y0, x1, y1 = (int(p) for p in parts[:6])
            conf = float(parts[6])
            tid = int(parts[7])
        except ValueError:
            raise TraceFormatError(line_no, "malformed number") from None
        if t < last_t:
            raise TraceFormatError(line_no, f"non-contiguous frames: {t} after {last_t}")
        if t < 0 or (n_frames is not None and t >= n_frames):
            raise TraceFormatError(line_no, f"frame {t} outside declared range")
        if not 0 <= cls < len(universe):
            raise TraceFormatError(line_no, f"unknown class index {cls}")
        box = BoundingBox(x0, y0, x1, y1)
        if not box.is_valid(width, height):
            raise TraceFormatError(line_no, f"box {box.as_tuple()} out of bounds")
        if not 0.0 <= conf <= 1.0:
            raise TraceFormatError(line_no, f"confidence {conf} outside [0, 1]")
        while len(frames) <= t:
            frames.append([])
        frames[t].append(Detection(t, box, cls, conf, None if tid < 0 else tid))
        last_t = t
    if not seen_format:
        raise TraceFormatError(1, f"expected 'format {FORMAT_TAG}'")
    if width is None or universe is None:
        raise TraceFormatError(0, "missing size or classes header")
    if n_frames is not None:
        while len(frames) < n_frames:
            frames.append([])
    return DetectionTrace(width, height, universe, frames, provenance)


def write_trace(trace: DetectionTrace, path: str | os.PathLike) -> None:
    Path(path).write_text(dumps_trace(trace))


def read_trace(path: str | os.PathLike) -> DetectionTrace:
    return loads_trace(Path(path).read_text())


def load_scene_spec(path: str | os.PathLike) -> SceneSpec:
    with open(path) as fh:
        return SceneSpec.from_dict(yaml.safe_load(fh))


def save_scene_spec(spec: SceneSpec, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(spec.to_dict(), fh, sort_keys=False)


# Raw planar RGB frames: one file per frame, 3 planes of H*W bytes (R, G, B).


def write_frame_dir(frames: np.ndarray, directory: str | os.PathLike) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n, h, w, _ = frames.shape
    (d / "frames.txt").write_text(f"size {w} {h}\ncount {n}\n")
    for t in range(n):
        (d / f"frame_{t:06d}.rgb").write_bytes(np.ascontiguousarray(frames[t].transpose(2, 0, 1)).tobytes())


def read_frame_dir(directory: str | os.PathLike) -> np.ndarray:
    d = Path(directory)
    meta = dict(line.split(None, 1) for line in (d / "frames.txt").read_text().splitlines() if line.strip())
    w, h = (int(v) for v in meta["size"].split())
    n = int(meta["count"])
    out = np.empty((n, h, w, 3), dtype=np.uint8)
    for t in range(n):
        raw = np.frombuffer((d / f"frame_{t:06d}.rgb").read_bytes(), dtype=np.uint8)
        if raw.size != 3 * w * h:
            raise ValueError(f"frame {t}: expected {3 * w * h} bytes, got {raw.size}")
        out[t] = raw.reshape(3, h, w).transpose(1, 2, 0)
    return out
