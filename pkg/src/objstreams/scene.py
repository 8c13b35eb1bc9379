"""Frames, classes, detections and the synthetic scene/detector generators."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

#: Stream label for pixels that belong to no disclosed object.
BACKGROUND = -1
BACKGROUND_NAME = "background"


class ClassUniverse:
    """Dense class-id <-> name table (the detector's class set)."""

    def __init__(self, names: Iterable[str]):
        self.names: tuple[str, ...] = tuple(names)
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate class names in {self.names}")
        for name in self.names:
            if not name or any(ch.isspace() for ch in name):
                raise ValueError(f"invalid class name {name!r}")
            if name == BACKGROUND_NAME:
                raise ValueError("'background' is reserved")
        self._index = {name: i for i, name in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __contains__(self, name: object) -> bool:
        return name in self._index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ClassUniverse) and other.names == self.names

    def __hash__(self) -> int:
        return hash(self.names)

    def __repr__(self) -> str:
        return f"ClassUniverse({list(self.names)!r})"

    def id(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown class {name!r}") from None

    def name(self, class_id: int) -> str:
        return self.names[class_id]

    def label(self, name: str) -> int:
        """Like :meth:`id` but also accepts ``"background"``."""
        if name == BACKGROUND_NAME:
            return BACKGROUND
        return self.id(name)

    def label_name(self, label: int) -> str:
        if label == BACKGROUND:
            return BACKGROUND_NAME
        return self.names[label]

    def labels(self) -> list[int]:
        """All stream labels: every class id plus BACKGROUND."""
        return list(range(len(self.names))) + [BACKGROUND]


@dataclass(frozen=True, order=True)
class BoundingBox:
    """Integer pixel box, half-open ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0

    def is_valid(self, width: int, height: int) -> bool:
        return 0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height

    def validate(self, width: int, height: int) -> None:
        if not self.is_valid(width, height):
            raise ValueError(f"box {self} out of bounds for {width}x{height}")

    def clip(self, width: int, height: int) -> BoundingBox | None:
        """Clip to the frame; None when nothing of the box remains."""
        x0, y0 = max(self.x0, 0), max(self.y0, 0)
        x1, y1 = min(self.x1, width), min(self.y1, height)
        if x1 <= x0 or y1 <= y0:
            return None
        return BoundingBox(x0, y0, x1, y1)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass(frozen=True)
class Detection:
    t: int
    box: BoundingBox
    cls: int
    confidence: float = 1.0
    track_id: int | None = None


@dataclass
class DetectionTrace:
    """Per-frame detection sets for one stream session."""

    width: int
    height: int
    classes: ClassUniverse
    frames: list[list[Detection]] = field(default_factory=list)
    provenance: str = "ground-truth"

    def __len__(self) -> int:
        return len(self.frames)

    def detections(self) -> Iterable[Detection]:
        for dets in self.frames:
            yield from dets

    def validate(self) -> None:
        n = len(self.classes)
        for t, dets in enumerate(self.frames):
            for det in dets:
                if det.t != t:
                    raise ValueError(f"detection at slot {t} claims frame {det.t}")
                if not 0 <= det.cls < n:
                    raise ValueError(f"unknown class id {det.cls}")
                if not 0.0 <= det.confidence <= 1.0:
                    raise ValueError(f"confidence {det.confidence} outside [0, 1]")
                det.box.validate(self.width, self.height)


# ---------------------------------------------------------------------------
# Synthetic scenes


@dataclass
class SceneObject:
    """A solid rectangle moving at constant velocity.

    ``x``/``y`` is the top-left corner at the spawn frame. The object is
    visible on frames ``spawn <= t < despawn`` (``despawn=None`` means
    until the end of the scene).
    """

    cls: str
    x: float
    y: float
    w: int
    h: int
    vx: float = 0.0
    vy: float = 0.0
    spawn: int = 0
    despawn: int | None = None
    color: tuple[int, int, int] = (220, 40, 40)
    track_id: int | None = None

    def box_at(self, t: int) -> BoundingBox | None:
        if t < self.spawn or (self.despawn is not None and t >= self.despawn):
            return None
        dt = t - self.spawn
        x0 = int(round(self.x + self.vx * dt))
        y0 = int(round(self.y + self.vy * dt))
        return BoundingBox(x0, y0, x0 + self.w, y0 + self.h)


@dataclass
class SceneSpec:
    width: int
    height: int
    n_frames: int
    classes: Sequence[str]
    objects: list[SceneObject] = field(default_factory=list)
    seed: int = 0

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError("scene resolution must be at least 1x1")
        if self.n_frames < 0:
            raise ValueError("n_frames must be non-negative")
        universe = ClassUniverse(self.classes)
        for obj in self.objects:
            if obj.w <= 0 or obj.h <= 0:
                raise ValueError(f"zero-size object {obj}")
            if obj.cls not in universe:
                raise ValueError(f"unknown class {obj.cls!r}")
            if obj.despawn is not None and obj.despawn < obj.spawn:
                raise ValueError(f"object despawns before it spawns: {obj}")
            if any(not 0 <= c <= 255 for c in obj.color) or tuple(obj.color) == (0, 0, 0):
                raise ValueError(f"object color must be non-black 8-bit RGB: {obj.color}")

    @classmethod
    def from_dict(cls, doc: Mapping) -> SceneSpec:
        objects = []
        for i, o in enumerate(doc.get("objects") or []):
            objects.append(
                SceneObject(
                    cls=o["class"],
                    x=float(o["x"]),
                    y=float(o["y"]),
                    w=int(o["w"]),
                    h=int(o["h"]),
                    vx=float(o.get("vx", 0.0)),
                    vy=float(o.get("vy", 0.0)),
                    spawn=int(o.get("spawn", 0)),
                    despawn=None if o.get("despawn") is None else int(o["despawn"]),
                    color=tuple(o.get("color", (220, 40, 40))),
                    track_id=int(o.get("track_id", i)),
                )
            )
        spec = cls(
            width=int(doc["width"]),
            height=int(doc["height"]),
            n_frames=int(doc["frames"]),
            classes=list(doc["classes"]),
            objects=objects,
            seed=int(doc.get("seed", 0)),
        )
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "frames": self.n_frames,
            "classes": list(self.classes),
            "seed": self.seed,
            "objects": [
                {
                    "class": o.cls,
                    "x": o.x,
                    "y": o.y,
                    "w": o.w,
                    "h": o.h,
                    "vx": o.vx,
                    "vy": o.vy,
                    "spawn": o.spawn,
                    "despawn": o.despawn,
                    "color": list(o.color),
                    "track_id": o.track_id,
                }
                for o in self.objects
            ],
        }


def background_texture(width: int, height: int, seed: int = 0) -> np.ndarray:
    """Deterministic textured background; never contains pure black."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    base = np.stack(
        [
            60 + (xx * 97) // max(width, 1),
            70 + (yy * 83) // max(height, 1),
            90 + ((xx + yy) * 41) // max(width + height, 1),
        ],
        axis=-1,
    )
    noise = rng.integers(-24, 25, size=(height, width, 3))
    return np.clip(base + noise, 16, 240).astype(np.uint8)


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, DetectionTrace]:
    """Render ``spec`` and return ``(frames, truth)``.

    ``frames`` has shape ``(T, H, W, 3)``. Objects listed later in the scene are
    drawn on top of earlier ones. Truth boxes are clipped to the frame and
    carry confidence 1.0 and the authored track id.
    """
    spec.validate()
    universe = ClassUniverse(spec.classes)
    frames = np.empty((spec.n_frames, spec.height, spec.width, 3), dtype=np.uint8)
    frames[:] = background_texture(spec.width, spec.height, spec.seed)
    truth = DetectionTrace(spec.width, spec.height, universe, provenance="ground-truth")
    for t in range(spec.n_frames):
        dets = []
        for i, obj in enumerate(spec.objects):
            box = obj.box_at(t)
            box = box.clip(spec.width, spec.height) if box is not None else None
            if box is None:
                continue
            frames[t, box.y0 : box.y1, box.x0 : box.x1] = obj.color
            track_id = obj.track_id if obj.track_id is not None else i
            dets.append(Detection(t, box, universe.id(obj.cls), 1.0, track_id))
        truth.frames.append(dets)
    return frames, truth


_PALETTE = {
    "car": (200, 40, 40),
    "truck": (230, 140, 20),
    "bus": (240, 220, 30),
    "person": (40, 200, 60),
    "bicycle": (40, 90, 230),
    "motorbike": (170, 50, 210),
    "face": (250, 190, 160),
}

STREET_CLASSES = ("car", "truck", "person", "bicycle", "motorbike")


def street_scene(
    seed: int = 0,
    width: int = 160,
    height: int = 120,
    n_frames: int = 96,
    n_objects: int = 12,
    classes: Sequence[str] = STREET_CLASSES,
) -> SceneSpec:
    """Random street-like scene: objects cross the frame horizontally."""
    rng = np.random.default_rng(seed)
    sizes = {
        "car": (0.16, 0.12),
        "truck": (0.22, 0.16),
        "bus": (0.25, 0.16),
        "person": (0.05, 0.16),
        "bicycle": (0.09, 0.10),
        "motorbike": (0.10, 0.10),
        "face": (0.04, 0.05),
    }
    objects = []
    for i in range(n_objects):
        name = classes[i % len(classes)]
        fw, fh = sizes.get(name, (0.1, 0.1))
        w = max(2, int(round(fw * width)))
        h = max(2, int(round(fh * height)))
        speed = float(rng.uniform(0.6, 2.5)) * (1 if rng.random() < 0.5 else -1)
        x = -w if speed > 0 else width
        y = float(rng.integers(0, max(1, height - h)))
        spawn = int(rng.integers(0, max(1, n_frames // 2)))
        jitter = rng.integers(-25, 26, size=3)
        color = tuple(int(c) for c in np.clip(np.array(_PALETTE.get(name, (128, 128, 128))) + jitter, 1, 255))
        objects.append(
            SceneObject(name, float(x), y, w, h, speed, 0.0, spawn, None, color, track_id=i)
        )
    return SceneSpec(width, height, n_frames, list(classes), objects, seed=seed)


def linear_motion_scene(n_frames: int = 60, vx: float = 1.5, size: tuple[int, int] = (24, 16)) -> SceneSpec:
    """One car crossing a 160x64 frame at constant velocity."""
    w, h = size
    return SceneSpec(
        160,
        64,
        n_frames,
        ["car", "person"],
        [SceneObject("car", 4.0, 24.0, w, h, vx, 0.0, 0, None, _PALETTE["car"], track_id=0)],
    )


# ---------------------------------------------------------------------------
# Synthetic detector


@dataclass
class SyntheticDetectorConfig:
    """Imperfect-detector model applied to a ground-truth trace.

    ``p_fn`` maps class name to miss probability (``"*"`` is the default
    for unlisted classes). ``p_fp[c][c']`` is the probability that a
    surviving detection of ``c`` is relabelled as ``c'``.
    """

    name: str = "synthetic"
    p_fn: dict[str, float] = field(default_factory=dict)
    p_fp: dict[str, dict[str, float]] = field(default_factory=dict)
    sigma: float = 0.0
    seed: int = 0
    correct_confidence: tuple[float, float] = (0.7, 1.0)
    confused_confidence: tuple[float, float] = (0.3, 0.7)

    def miss_rate(self, name: str) -> float:
        return float(self.p_fn.get(name, self.p_fn.get("*", 0.0)))

    def validate(self, universe: ClassUniverse | None = None) -> None:
        for name, p in self.p_fn.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"p_fn[{name}]={p} outside [0, 1]")
            if universe is not None and name != "*" and name not in universe:
                raise ValueError(f"p_fn names unknown class {name!r}")
        for src, row in self.p_fp.items():
            if universe is not None and src not in universe:
                raise ValueError(f"p_fp names unknown class {src!r}")
            total = 0.0
            for dst, p in row.items():
                if universe is not None and dst not in universe:
                    raise ValueError(f"p_fp names unknown class {dst!r}")
                if dst == src:
                    raise ValueError(f"p_fp[{src}->{dst}] relabels a class to itself")
                if not 0.0 <= p <= 1.0:
                    raise ValueError(f"p_fp[{src}->{dst}]={p} outside [0, 1]")
                total += p
            if total > 1.0 + 1e-12:
                raise ValueError(f"p_fp row for {src} sums to {total} > 1")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        for lo, hi in (self.correct_confidence, self.confused_confidence):
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError(f"bad confidence range ({lo}, {hi})")

    @classmethod
    def from_dict(cls, doc: Mapping) -> SyntheticDetectorConfig:
        cfg = cls(
            name=str(doc.get("name", "synthetic")),
            p_fn={k: float(v) for k, v in (doc.get("p_fn") or {}).items()},
            p_fp={k: {k2: float(v2) for k2, v2 in row.items()} for k, row in (doc.get("p_fp") or {}).items()},
            sigma=float(doc.get("sigma", 0.0)),
            seed=int(doc.get("seed", 0)),
        )
        if "correct_confidence" in doc:
            cfg.correct_confidence = tuple(doc["correct_confidence"])
        if "confused_confidence" in doc:
            cfg.confused_confidence = tuple(doc["confused_confidence"])
        cfg.validate()
        return cfg


def _jitter_box(box: BoundingBox, offsets: np.ndarray, width: int, height: int) -> BoundingBox:
    x0, y0, x1, y1 = (int(v) for v in np.array(box.as_tuple()) + offsets)
    x0 = min(max(x0, 0), width - 1)
    y0 = min(max(y0, 0), height - 1)
    x1 = min(max(x1, x0 + 1), width)
    y1 = min(max(y1, y0 + 1), height)
    return BoundingBox(x0, y0, x1, y1)


def run_synthetic_detector(truth: DetectionTrace, cfg: SyntheticDetectorConfig) -> DetectionTrace:
    """Drop, relabel and jitter ground-truth detections.

    Random draws happen in a fixed order per truth detection, so a given
    seed always reproduces the same output.
    """
    cfg.validate(truth.classes)
    rng = np.random.default_rng(cfg.seed)
    universe = truth.classes
    miss = np.array([cfg.miss_rate(n) for n in universe.names])
    confusion = np.zeros((len(universe), len(universe)))
    for src, row in cfg.p_fp.items():
        for dst, p in row.items():
            confusion[universe.id(src), universe.id(dst)] = p
    out = DetectionTrace(truth.width, truth.height, universe, provenance=cfg.name)
    for dets in truth.frames:
        kept = []
        for det in dets:
            u_drop, u_label, u_conf = rng.random(3)
            offsets = np.rint(rng.normal(0.0, cfg.sigma, size=4)) if cfg.sigma > 0 else np.zeros(4)
            if u_drop < miss[det.cls]:
                continue
            cls = det.cls
            cumulative = np.cumsum(confusion[det.cls])
            hit = np.searchsorted(cumulative, u_label, side="right")
            if hit < len(universe) and u_label < cumulative[-1]:
                cls = int(hit)
            lo, hi = cfg.correct_confidence if cls == det.cls else cfg.confused_confidence
            conf = float(lo + (hi - lo) * u_conf)
            box = _jitter_box(det.box, offsets, truth.width, truth.height) if cfg.sigma > 0 else det.box
            kept.append(replace(det, box=box, cls=cls, confidence=conf))
        out.frames.append(kept)
    return out
