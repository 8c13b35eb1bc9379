"""Detect-every-n with SORT-style tracking between detector runs.

State per track is ``[cx, cy, s, r, vcx, vcy, vs]``: box centre, area,
aspect ratio (w/h) and their velocities. The aspect ratio has no velocity
term.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .scene import BoundingBox, Detection, DetectionTrace


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / float(a.area + b.area - inter)


def iou_xyxy(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU on float ``[x0, y0, x1, y1]`` boxes."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def assignment_cost(iou_matrix: np.ndarray, iou_min: float) -> np.ndarray:
    """Square cost matrix: ``1 - iou`` on allowed pairs, 1 elsewhere.

    Padding rows/columns and forbidden pairs both cost 1, the same as
    leaving a track or detection unmatched.
    """
    m, n = iou_matrix.shape
    size = max(m, n)
    cost = np.ones((size, size))
    if m and n:
        allowed = iou_matrix >= iou_min
        cost[:m, :n] = np.where(allowed, 1.0 - iou_matrix, 1.0)
    return cost


def assign(
    tracks: Sequence[BoundingBox] | np.ndarray,
    dets: Sequence[Detection] | np.ndarray,
    iou_min: float = 0.3,
) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """Optimal one-to-one track/detection matching.

    ``tracks`` and ``dets`` may be boxes/detections, or ``tracks`` may be a
    precomputed IoU matrix with ``dets`` its column count. Returns
    ``(matches, unmatched_tracks, unmatched_dets)`` with matches as
    ``(track_index, det_index)`` pairs sorted by track index.
    """
    if isinstance(tracks, np.ndarray) and tracks.ndim == 2:
        ious = tracks
    else:
        ious = np.array(
            [[iou(t, d.box if isinstance(d, Detection) else d) for d in dets] for t in tracks],
            dtype=float,
        ).reshape(len(tracks), len(dets))
    m, n = ious.shape
    matches: list[tuple[int, int]] = []
    if m and n:
        rows, cols = linear_sum_assignment(assignment_cost(ious, iou_min))
        for r, c in zip(rows, cols):
            if r < m and c < n and ious[r, c] >= iou_min:
                matches.append((int(r), int(c)))
    matched_t = {r for r, _ in matches}
    matched_d = {c for _, c in matches}
    return (
        sorted(matches),
        [i for i in range(m) if i not in matched_t],
        [j for j in range(n) if j not in matched_d],
    )


def box_to_z(box: Sequence[float]) -> np.ndarray:
    x0, y0, x1, y1 = box
    w, h = x1 - x0, y1 - y0
    return np.array([x0 + w / 2.0, y0 + h / 2.0, w * h, w / float(h)])


def x_to_box(x: np.ndarray) -> np.ndarray:
    s = max(float(x[2]), 1e-9)
    r = max(float(x[3]), 1e-9)
    w = np.sqrt(s * r)
    h = s / w
    return np.array([x[0] - w / 2.0, x[1] - h / 2.0, x[0] + w / 2.0, x[1] + h / 2.0])


_F = np.eye(7)
_F[0, 4] = _F[1, 5] = _F[2, 6] = 1.0
_H = np.eye(4, 7)


class KalmanBoxFilter:
    """Constant-velocity Kalman filter over a box (SORT parameterisation).

    Noise scales default to the published SORT values; pass ``0.0`` to get
    the noiseless filter.
    """

    def __init__(
        self,
        box: Sequence[float],
        measurement_noise: float = 1.0,
        process_noise: float = 1.0,
        velocity_variance: float = 1e4,
    ):
        self.x = np.zeros(7)
        self.x[:4] = box_to_z(box)
        self.P = np.eye(7) * 10.0
        self.P[4:, 4:] = np.eye(3) * velocity_variance
        self.R = np.diag([1.0, 1.0, 10.0, 10.0]) * measurement_noise
        self.Q = np.eye(7) * process_noise
        self.Q[-1, -1] *= 0.01
        self.Q[4:, 4:] *= 0.01

    def predict(self) -> np.ndarray:
        if self.x[2] + self.x[6] <= 0:
            self.x[6] = 0.0
        self.x = _F @ self.x
        self.P = _F @ self.P @ _F.T + self.Q
        self.P = (self.P + self.P.T) / 2.0
        return x_to_box(self.x)

    def update(self, box: Sequence[float]) -> None:
        z = box_to_z(box)
        y = z - _H @ self.x
        S = _H @ self.P @ _H.T + self.R
        K = np.linalg.solve(S.T, (self.P @ _H.T).T).T
        self.x = self.x + K @ y
        I_KH = np.eye(7) - K @ _H
        # Joseph form keeps P symmetric PSD
        self.P = I_KH @ self.P @ I_KH.T + K @ self.R @ K.T
        self.P = (self.P + self.P.T) / 2.0
        self.x[2] = max(self.x[2], 1e-6)
        self.x[3] = max(self.x[3], 1e-6)

    def box(self) -> np.ndarray:
        return x_to_box(self.x)


@dataclass
class TrackState:
    id: int
    cls: int
    kf: KalmanBoxFilter
    confidence: float
    hits: int = 1
    age: int = 0
    time_since_update: int = 0


@dataclass(frozen=True)
class SkipSchedule:
    n: int = 1

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("skip period n must be >= 1")

    def is_detection_frame(self, t: int) -> bool:
        return t % self.n == 0


class ScheduleError(ValueError):
    """Detections supplied on a frame the schedule says to skip (or vice versa)."""


def _clamp_box(box: np.ndarray, width: int, height: int) -> BoundingBox | None:
    x0 = int(np.floor(box[0] + 0.5))
    y0 = int(np.floor(box[1] + 0.5))
    x1 = int(np.floor(box[2] + 0.5))
    y1 = int(np.floor(box[3] + 0.5))
    return BoundingBox(x0, y0, max(x1, x0 + 1), max(y1, y0 + 1)).clip(width, height)


class Tracker:
    """One camera stream's tracker.

    On detection frames the emitted boxes are the detections themselves
    (with track ids attached); on skipped frames they are the Kalman
    predictions of tracks updated at the last detection frame.
    """

    def __init__(
        self,
        width: int,
        height: int,
        schedule: SkipSchedule = SkipSchedule(1),
        iou_min: float = 0.3,
        max_age: int | None = None,
        min_hits: int = 1,
        measurement_noise: float = 1.0,
        process_noise: float = 1.0,
    ):
        self.width = width
        self.height = height
        self.schedule = schedule
        self.iou_min = iou_min
        self.max_age = schedule.n if max_age is None else max_age
        self.min_hits = min_hits
        self.measurement_noise = measurement_noise
        self.process_noise = process_noise
        self.tracks: list[TrackState] = []
        self._next_id = 0
        self._last_t: int | None = None

    def _spawn(self, det: Detection) -> TrackState:
        kf = KalmanBoxFilter(det.box.as_tuple(), self.measurement_noise, self.process_noise)
        track = TrackState(self._next_id, det.cls, kf, det.confidence)
        self._next_id += 1
        self.tracks.append(track)
        return track

    def step(self, t: int, dets: Sequence[Detection] | None) -> list[Detection]:
        if self._last_t is not None and t <= self._last_t:
            raise ScheduleError(f"frame {t} is not after frame {self._last_t}")
        detect = self.schedule.is_detection_frame(t)
        if detect and dets is None:
            raise ScheduleError(f"frame {t} is a detection frame but no detections were given")
        if not detect and dets is not None:
            raise ScheduleError(f"detections supplied on skip frame {t} (n={self.schedule.n})")
        self._last_t = t

        predicted = [trk.kf.predict() for trk in self.tracks]
        for trk in self.tracks:
            trk.age += 1
            trk.time_since_update += 1

        out: list[Detection] = []
        if detect:
            matches, _, unmatched = assign(
                np.array(
                    [[iou_xyxy(p, d.box.as_tuple()) for d in dets] for p in predicted], dtype=float
                ).reshape(len(predicted), len(dets)),
                dets,
                self.iou_min,
            )
            emitted: dict[int, TrackState] = {}
            for ti, di in matches:
                trk, det = self.tracks[ti], dets[di]
                trk.kf.update(det.box.as_tuple())
                trk.cls = det.cls
                trk.confidence = det.confidence
                trk.hits += 1
                trk.time_since_update = 0
                emitted[di] = trk
            for di in unmatched:
                emitted[di] = self._spawn(dets[di])
            for di, det in enumerate(dets):
                trk = emitted[di]
                if trk.hits >= self.min_hits:
                    out.append(replace(det, t=t, track_id=trk.id))
        self.tracks = [trk for trk in self.tracks if trk.time_since_update <= self.max_age]
        if not detect:
            for trk in self.tracks:
                if trk.hits < self.min_hits:
                    continue
                box = _clamp_box(trk.kf.box(), self.width, self.height)
                if box is not None:
                    out.append(Detection(t, box, trk.cls, trk.confidence, trk.id))
        return out


def track_trace(
    detections: DetectionTrace,
    schedule: SkipSchedule,
    iou_min: float = 0.3,
    max_age: int | None = None,
    min_hits: int = 1,
) -> DetectionTrace:
    """Run a tracker over a detector trace, feeding only scheduled frames."""
    tracker = Tracker(detections.width, detections.height, schedule, iou_min, max_age, min_hits)
    out = DetectionTrace(
        detections.width,
        detections.height,
        detections.classes,
        provenance=f"{detections.provenance}-skip-{schedule.n}",
    )
    for t, dets in enumerate(detections.frames):
        out.frames.append(tracker.step(t, dets if schedule.is_detection_frame(t) else None))
    return out


def sample_every_n(detections: DetectionTrace, schedule: SkipSchedule) -> DetectionTrace:
    """Detector-only baseline: keep scheduled frames, leave the gaps empty."""
    return DetectionTrace(
        detections.width,
        detections.height,
        detections.classes,
        [list(d) if schedule.is_detection_frame(t) else [] for t, d in enumerate(detections.frames)],
        provenance=f"{detections.provenance}-every-{schedule.n}",
    )
