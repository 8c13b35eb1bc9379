"""Edge side: detections -> tracker -> partition -> encode/encrypt -> publish.

Session directory layout::

    <output>/public/manifest.json                 # CDN-facing
    <output>/public/segments/<kind>/<stream>/<index>.cseg
    <output>/private/config.yaml                  # edge-only
    <output>/private/keys.json                    # epoch keys used to seal segments
    <output>/private/assignments.npz              # per-frame label grids
    <output>/private/report.json, report.csv
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import queue
import random
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol

import numpy as np
import yaml

from .partition import DEFAULT_DISCLOSE_THRESHOLD, assign_pixels, mask_frame
from .policy.store import PolicyStore
from .scene import (
    BACKGROUND,
    ClassUniverse,
    Detection,
    DetectionTrace,
    SceneSpec,
    SyntheticDetectorConfig,
    generate_scene,
    run_synthetic_detector,
)
from .segments import (
    DEFAULT_EPOCH_PERIOD,
    DEFAULT_SEGMENT_LENGTH,
    KIND_METADATA,
    KIND_NAMES,
    KIND_VIDEO,
    KeyEpoch,
    Manifest,
    MetadataRecord,
    Segment,
    encode_metadata_segment,
    metadata_record,
    seal,
)
from .codec import encode_segment
from .traceio import read_frame_dir, read_trace
from .tracker import SkipSchedule, Tracker

log = logging.getLogger(__name__)

_DONE = object()


class PipelineError(RuntimeError):
    pass


class KeySource(Protocol):
    def keys_for_segment(self, index: int, rotate_every: int | None = None) -> KeyEpoch: ...

    def requested_classes(self) -> list[str]: ...


@dataclass
class PipelineConfig:
    output: str
    scene: SceneSpec | None = None
    frames_dir: str | None = None
    truth_trace: str | None = None
    detections_trace: str | None = None
    detector: SyntheticDetectorConfig | None = None
    reprocess_detector: SyntheticDetectorConfig | None = None
    skip_n: int = 1
    iou_min: float = 0.3
    max_age: int | None = None
    classes: list[str] | None = None
    class_schedule: list[tuple[int, list[str]]] = field(default_factory=list)
    classes_from_policy: bool = False
    disclose_threshold: float = DEFAULT_DISCLOSE_THRESHOLD
    segment_length: int = DEFAULT_SEGMENT_LENGTH
    epoch_period: int = DEFAULT_EPOCH_PERIOD
    fps: float = 30.0
    policy_url: str | None = None
    admin_token: str | None = None
    deterministic_seed: int | None = None
    queue_size: int = 8
    workers: int = 4
    session_id: str | None = None

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], base: Path | None = None) -> PipelineConfig:
        base = base or Path(".")

        def path(key):
            value = doc.get(key)
            return None if value is None else str((base / value) if not os.path.isabs(value) else value)

        scene = None
        if isinstance(doc.get("scene"), Mapping):
            scene = SceneSpec.from_dict(doc["scene"])
        elif isinstance(doc.get("scene"), str):
            with open(base / doc["scene"]) as fh:
                scene = SceneSpec.from_dict(yaml.safe_load(fh))
        det = doc.get("detector")
        rdet = doc.get("reprocess_detector")
        schedule = [(int(item["frame"]), list(item["classes"])) for item in doc.get("class_schedule") or []]
        policy = doc.get("policy") or {}
        return cls(
            output=str(base / doc.get("output", "session")),
            scene=scene,
            frames_dir=path("frames_dir"),
            truth_trace=path("truth_trace"),
            detections_trace=path("detections_trace"),
            detector=SyntheticDetectorConfig.from_dict(det) if det else None,
            reprocess_detector=SyntheticDetectorConfig.from_dict(rdet) if rdet else None,
            skip_n=int(doc.get("skip_n", 1)),
            iou_min=float(doc.get("iou_min", 0.3)),
            max_age=doc.get("max_age"),
            classes=None if doc.get("classes") is None else list(doc["classes"]),
            class_schedule=schedule,
            classes_from_policy=bool(policy.get("classes_from_policy", False)),
            disclose_threshold=float(doc.get("disclose_threshold", DEFAULT_DISCLOSE_THRESHOLD)),
            segment_length=int(doc.get("segment_length", DEFAULT_SEGMENT_LENGTH)),
            epoch_period=int(doc.get("epoch_period", DEFAULT_EPOCH_PERIOD)),
            fps=float(doc.get("fps", 30.0)),
            policy_url=policy.get("url"),
            admin_token=policy.get("admin_token"),
            deterministic_seed=doc.get("deterministic_seed"),
            queue_size=int(doc.get("queue_size", 8)),
            workers=int(doc.get("workers", 4)),
            session_id=doc.get("session_id"),
        )

    def to_dict(self) -> dict:
        doc = {
            "output": self.output,
            "frames_dir": self.frames_dir,
            "truth_trace": self.truth_trace,
            "detections_trace": self.detections_trace,
            "skip_n": self.skip_n,
            "iou_min": self.iou_min,
            "max_age": self.max_age,
            "classes": self.classes,
            "class_schedule": [{"frame": t, "classes": c} for t, c in self.class_schedule],
            "disclose_threshold": self.disclose_threshold,
            "segment_length": self.segment_length,
            "epoch_period": self.epoch_period,
            "fps": self.fps,
            "deterministic_seed": self.deterministic_seed,
            "session_id": self.session_id,
        }
        if self.scene is not None:
            doc["scene"] = self.scene.to_dict()
        for key in ("detector", "reprocess_detector"):
            value = getattr(self, key)
            if value is not None:
                d = asdict(value)
                d["correct_confidence"] = list(d["correct_confidence"])
                d["confused_confidence"] = list(d["confused_confidence"])
                doc[key] = d
        return doc


def load_config(path: str | os.PathLike) -> PipelineConfig:
    p = Path(path)
    with open(p) as fh:
        return PipelineConfig.from_dict(yaml.safe_load(fh), base=p.parent)


# ---------------------------------------------------------------------------
# Inputs


def load_inputs(cfg: PipelineConfig) -> tuple[np.ndarray, DetectionTrace, DetectionTrace | None]:
    """``(frames, detections, truth)`` for a config; truth is None when unknown."""
    truth = None
    if cfg.scene is not None:
        frames, truth = generate_scene(cfg.scene)
    elif cfg.frames_dir is not None:
        frames = read_frame_dir(cfg.frames_dir)
        if cfg.truth_trace:
            truth = read_trace(cfg.truth_trace)
    else:
        raise PipelineError("config needs a scene or a frames_dir")
    if cfg.detections_trace:
        dets = read_trace(cfg.detections_trace)
    elif truth is not None:
        dets = run_synthetic_detector(truth, cfg.detector) if cfg.detector else truth
    else:
        raise PipelineError("no detection source: give detections_trace, or truth plus an optional detector")
    if len(dets.frames) < len(frames):
        dets.frames.extend([] for _ in range(len(frames) - len(dets.frames)))
    if len(dets.frames) != len(frames) or (dets.width, dets.height) != (frames.shape[2], frames.shape[1]):
        raise PipelineError(
            f"trace ({len(dets.frames)} frames, {dets.width}x{dets.height}) does not match "
            f"video ({len(frames)} frames, {frames.shape[2]}x{frames.shape[1]})"
        )
    return frames, dets, truth


def _rng_bytes(seed: int | None) -> Callable[[int], bytes]:
    if seed is None:
        return os.urandom
    rng = random.Random(seed)
    lock = threading.Lock()

    def draw(n: int) -> bytes:
        with lock:
            return rng.randbytes(n)

    return draw


def make_key_source(cfg: PipelineConfig, universe: ClassUniverse) -> KeySource:
    if cfg.policy_url:
        from .policy.client import PolicyClient, RemoteKeySource

        return RemoteKeySource(PolicyClient(cfg.policy_url, cfg.admin_token), universe)
    seed = None if cfg.deterministic_seed is None else cfg.deterministic_seed + 1
    return PolicyStore(universe, random_bytes=_rng_bytes(seed))


# ---------------------------------------------------------------------------
# Run


@dataclass
class SessionReport:
    session_id: str
    frames: int
    width: int
    height: int
    fps: float
    duration_s: float
    video_bytes: dict[str, int]
    metadata_bytes: dict[str, int]
    segments: int
    epochs: list[int]
    stage_seconds: dict[str, float]
    wall_seconds: float
    fps_achieved: float
    raw_bytes: int
    class_changes: list[dict]
    complete: bool = True

    @property
    def total_video_bytes(self) -> int:
        return sum(self.video_bytes.values())

    def to_json(self) -> str:
        doc = asdict(self)
        doc["total_video_bytes"] = self.total_video_bytes
        return json.dumps(doc, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stream", "kind", "bytes"])
        for name, size in self.video_bytes.items():
            w.writerow([name, "video", size])
        for name, size in self.metadata_bytes.items():
            w.writerow([name, "metadata", size])
        return buf.getvalue()


@dataclass
class _FrameItem:
    t: int
    frame: np.ndarray
    dets: list[Detection] | None
    active: tuple[int, ...] = ()
    tracked: list[Detection] = field(default_factory=list)
    grid: np.ndarray | None = None


def _put(q: queue.Queue, item, stop: threading.Event) -> None:
    while not stop.is_set():
        try:
            q.put(item, timeout=0.1)
            return
        except queue.Full:
            continue
    raise PipelineError("pipeline aborted")


def _get(q: queue.Queue, stop: threading.Event):
    while True:
        try:
            return q.get(timeout=0.1)
        except queue.Empty:
            if stop.is_set():
                raise PipelineError("pipeline aborted") from None


class _ClassPlan:
    """Requested class set as a function of frame index."""

    def __init__(self, cfg: PipelineConfig, universe: ClassUniverse, keys: KeySource):
        self.universe = universe
        self.cfg = cfg
        self.keys = keys
        base = cfg.classes if cfg.classes is not None else ([] if cfg.classes_from_policy else list(universe.names))
        self.schedule = sorted([(0, list(base))] + [(t, list(c)) for t, c in cfg.class_schedule], key=lambda x: x[0])
        for _, names in self.schedule:
            for n in names:
                if n not in universe:
                    raise PipelineError(f"requested class {n!r} is not in the trace universe")
        self._polled: tuple[int, ...] | None = None

    def at(self, t: int) -> tuple[int, ...]:
        if self.cfg.classes_from_policy:
            if self._polled is None or t % self.cfg.segment_length == 0:
                try:
                    names = self.keys.requested_classes()
                except Exception as exc:
                    raise PipelineError(f"policy service unreachable: {exc}") from exc
                self._polled = tuple(sorted(self.universe.id(n) for n in names))
            return self._polled
        names: list[str] = []
        for start, classes in self.schedule:
            if start <= t:
                names = classes
        return tuple(sorted(self.universe.id(n) for n in names))


def _segment_path(kind: int, stream: str, index: int, suffix: str = "") -> str:
    return f"segments/{KIND_NAMES[kind]}/{stream}/{index:06d}{suffix}.cseg"


def _write_atomic(path: Path, data: bytes | str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    if isinstance(data, str):
        tmp.write_text(data)
    else:
        tmp.write_bytes(data)
    os.replace(tmp, path)


def run_pipeline(cfg: PipelineConfig, key_source: KeySource | None = None) -> SessionReport:
    """Run one edge session end to end and publish it under ``cfg.output``."""
    wall_start = time.perf_counter()
    frames, dets, _ = load_inputs(cfg)
    universe = dets.classes
    n_frames, height, width = frames.shape[:3]
    keys = key_source or make_key_source(cfg, universe)
    plan = _ClassPlan(cfg, universe, keys)
    schedule = SkipSchedule(cfg.skip_n)
    iv_source = _rng_bytes(None if cfg.deterministic_seed is None else cfg.deterministic_seed + 2)
    session_id = cfg.session_id or (
        f"session-{cfg.deterministic_seed}" if cfg.deterministic_seed is not None else uuid.uuid4().hex[:12]
    )

    root = Path(cfg.output)
    public, private = root / "public", root / "private"
    public.mkdir(parents=True, exist_ok=True)
    private.mkdir(parents=True, exist_ok=True)
    with open(private / "config.yaml", "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)

    manifest = Manifest(session_id, width, height, cfg.fps, list(universe.names), cfg.segment_length, n_frames=n_frames)
    stage_seconds = {"ingest": 0.0, "track": 0.0, "partition": 0.0, "encode": 0.0, "publish": 0.0}
    stop = threading.Event()
    errors: list[BaseException] = []
    q_track: queue.Queue = queue.Queue(cfg.queue_size)
    q_part: queue.Queue = queue.Queue(cfg.queue_size)
    q_encode: queue.Queue = queue.Queue(cfg.queue_size)
    q_publish: queue.Queue = queue.Queue(cfg.queue_size)
    grids = np.empty((n_frames, height, width), dtype=np.int16)
    used_epochs: dict[int, KeyEpoch] = {}
    video_bytes: dict[str, int] = {}
    metadata_bytes: dict[str, int] = {}

    def guarded(name: str, fn: Callable[[], None]) -> Callable[[], None]:
        def run():
            try:
                fn()
            except BaseException as exc:  # noqa: BLE001 - re-raised in the caller thread
                if not isinstance(exc, PipelineError) or not stop.is_set():
                    errors.append(exc)
                stop.set()

        return run

    def ingest():
        for t in range(n_frames):
            start = time.perf_counter()
            item = _FrameItem(t, frames[t], list(dets.frames[t]) if schedule.is_detection_frame(t) else None)
            stage_seconds["ingest"] += time.perf_counter() - start
            _put(q_track, item, stop)
        _put(q_track, _DONE, stop)

    def track():
        tracker = Tracker(width, height, schedule, cfg.iou_min, cfg.max_age)
        while (item := _get(q_track, stop)) is not _DONE:
            start = time.perf_counter()
            item.tracked = tracker.step(item.t, item.dets)
            stage_seconds["track"] += time.perf_counter() - start
            _put(q_part, item, stop)
        _put(q_part, _DONE, stop)

    def partition():
        previous = None
        while (item := _get(q_part, stop)) is not _DONE:
            start = time.perf_counter()
            item.active = plan.at(item.t)
            if item.active != previous:
                manifest.class_changes.append({"frame": item.t, "classes": [universe.name(c) for c in item.active]})
                previous = item.active
            item.grid = assign_pixels((width, height), item.tracked, item.active, cfg.disclose_threshold)
            grids[item.t] = item.grid
            stage_seconds["partition"] += time.perf_counter() - start
            _put(q_encode, item, stop)
        _put(q_encode, _DONE, stop)

    streams: list[int] = [BACKGROUND]  # labels with a published stream, in creation order

    def seal_batch(batch: list[_FrameItem], index: int, pool: ThreadPoolExecutor):
        for item in batch:
            for c in item.active:
                if c not in streams:
                    streams.append(c)
        try:
            ep = keys.keys_for_segment(index, cfg.epoch_period)
        except Exception as exc:
            raise PipelineError(f"cannot obtain keys for segment {index}: {exc}") from exc
        used_epochs[ep.epoch] = ep
        t0, t1 = batch[0].t, batch[-1].t + 1
        # draw IVs here, in a fixed order, so seeded runs do not depend on thread timing
        video_ivs = {label: iv_source(16) for label in streams}
        meta_ivs = {label: iv_source(16) for label in streams if label != BACKGROUND}

        def video(label: int) -> tuple[int, str, Segment]:
            masked = [mask_frame(it.frame, it.grid, label, it.t) for it in batch]
            seg = seal(KIND_VIDEO, label, index, t0, t1, ep.epoch, encode_segment(masked), ep.keys[label], video_ivs[label])
            return KIND_VIDEO, universe.label_name(label), seg

        def meta(label: int) -> tuple[int, str, Segment]:
            records = []
            for it in batch:
                if label in it.active:
                    records.append(metadata_record(it.t, it.tracked, label, cfg.disclose_threshold))
                else:
                    records.append(MetadataRecord(it.t))
            name = universe.label_name(label)
            seg = encode_metadata_segment(name, label, records, ep.keys[label], index, ep.epoch, meta_ivs[label])
            return KIND_METADATA, name, seg

        jobs = [pool.submit(video, label) for label in streams]
        jobs += [pool.submit(meta, label) for label in streams if label != BACKGROUND]
        return [job.result() for job in jobs]

    def encode():
        batch: list[_FrameItem] = []
        index = 0
        with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as pool:
            while True:
                item = _get(q_encode, stop)
                if item is not _DONE:
                    batch.append(item)
                if batch and (item is _DONE or len(batch) == cfg.segment_length):
                    start = time.perf_counter()
                    sealed = seal_batch(batch, index, pool)
                    stage_seconds["encode"] += time.perf_counter() - start
                    _put(q_publish, sealed, stop)
                    batch = []
                    index += 1
                if item is _DONE:
                    break
        _put(q_publish, _DONE, stop)

    def publish():
        while (sealed := _get(q_publish, stop)) is not _DONE:
            start = time.perf_counter()
            for kind, name, seg in sealed:
                uri = _segment_path(kind, name, seg.index)
                target = public / uri
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(seg.to_bytes())
                manifest.add(kind, name, seg, uri)
                sizes = video_bytes if kind == KIND_VIDEO else metadata_bytes
                sizes[name] = sizes.get(name, 0) + seg.size
            manifest.epochs = _epoch_docs(used_epochs)
            _write_atomic(public / "manifest.json", manifest.to_json())
            stage_seconds["publish"] += time.perf_counter() - start

    threads = [
        threading.Thread(target=guarded(name, fn), name=f"edge-{name}", daemon=True)
        for name, fn in (("ingest", ingest), ("track", track), ("partition", partition), ("encode", encode), ("publish", publish))
    ]
    for th in threads:
        th.start()
    for th in threads:
        th.join()

    _write_keys(private / "keys.json", used_epochs, universe)
    if errors:
        manifest.complete = False
        manifest.epochs = _epoch_docs(used_epochs)
        try:
            _write_atomic(public / "manifest.json", manifest.to_json())
        except OSError:
            log.exception("could not write partial manifest")
        raise errors[0]

    manifest.complete = True
    _write_atomic(public / "manifest.json", manifest.to_json())
    np.savez_compressed(private / "assignments.npz", grids=grids)
    wall = time.perf_counter() - wall_start
    report = SessionReport(
        session_id=session_id,
        frames=n_frames,
        width=width,
        height=height,
        fps=cfg.fps,
        duration_s=n_frames / cfg.fps,
        video_bytes=video_bytes,
        metadata_bytes=metadata_bytes,
        segments=sum(len(v) for v in manifest.video.values()),
        epochs=sorted(used_epochs),
        stage_seconds=stage_seconds,
        wall_seconds=wall,
        fps_achieved=n_frames / wall if wall > 0 else float("inf"),
        raw_bytes=int(frames.nbytes),
        class_changes=manifest.class_changes,
    )
    (private / "report.json").write_text(report.to_json())
    (private / "report.csv").write_text(report.to_csv())
    return report


def _epoch_docs(epochs: Mapping[int, KeyEpoch]) -> list[dict]:
    return [
        {"epoch": e, "first_segment": ep.first_segment, "last_segment": ep.last_segment}
        for e, ep in sorted(epochs.items())
    ]


def _write_keys(path: Path, epochs: Mapping[int, KeyEpoch], universe: ClassUniverse) -> None:
    doc = {
        str(e): {
            "first_segment": ep.first_segment,
            "last_segment": ep.last_segment,
            "keys": {universe.label_name(label): key.hex() for label, key in ep.keys.items()},
        }
        for e, ep in sorted(epochs.items())
    }
    path.write_text(json.dumps(doc, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Session access (edge side)


@dataclass
class EdgeSession:
    root: Path
    config: PipelineConfig
    manifest: Manifest
    keys: dict[int, KeyEpoch]

    @property
    def universe(self) -> ClassUniverse:
        return self.manifest.universe

    def key(self, stream: str, epoch: int) -> bytes:
        return self.keys[epoch].keys[self.universe.label(stream)]

    def epoch_for_segment(self, index: int) -> KeyEpoch:
        for ep in self.keys.values():
            if ep.first_segment <= index and (ep.last_segment is None or index <= ep.last_segment):
                return ep
        # the newest epoch stays open even if the policy engine has rotated since
        newest = max(self.keys.values(), key=lambda ep: ep.epoch)
        if index >= newest.first_segment:
            return newest
        raise LookupError(f"no epoch for segment {index}")

    def assignments(self) -> np.ndarray:
        with np.load(self.root / "private" / "assignments.npz") as data:
            return data["grids"]

    def save_manifest(self) -> None:
        _write_atomic(self.root / "public" / "manifest.json", self.manifest.to_json())


def load_session(root: str | os.PathLike) -> EdgeSession:
    root = Path(root)
    with open(root / "private" / "config.yaml") as fh:
        cfg = PipelineConfig.from_dict(yaml.safe_load(fh), base=Path("/"))
    cfg.output = str(root)
    manifest = Manifest.from_json((root / "public" / "manifest.json").read_text())
    universe = manifest.universe
    raw = json.loads((root / "private" / "keys.json").read_text())
    keys = {
        int(e): KeyEpoch(
            int(e),
            doc["first_segment"],
            {universe.label(name): bytes.fromhex(k) for name, k in doc["keys"].items()},
            doc["last_segment"],
        )
        for e, doc in raw.items()
    }
    return EdgeSession(root, cfg, manifest, keys)


def decode_session_frames(session: EdgeSession) -> np.ndarray:
    """Edge-side full reconstruction from published segments (all keys)."""
    from .codec import decode_segment

    m = session.manifest
    out = np.zeros((m.n_frames, m.height, m.width, 3), dtype=np.uint16)
    for stream, entries in m.video.items():
        for e in entries:
            seg = Segment.from_bytes((session.root / "public" / e.uri).read_bytes())
            for f in decode_segment(seg.decrypt(session.key(stream, seg.epoch))):
                out[f.t] += f.pixels
    return np.minimum(out, 255).astype(np.uint8)
