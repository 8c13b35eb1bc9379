"""Per-pixel stream assignment, masking and additive recomposition."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Collection, Iterable, Sequence

import numpy as np

from .scene import BACKGROUND, Detection

DEFAULT_DISCLOSE_THRESHOLD = 0.5


@dataclass(frozen=True)
class MaskedFrame:
    label: int
    t: int
    pixels: np.ndarray  # (H, W, 3) uint8, exact black outside the label's pixels


def disclosure_order(dets: Iterable[Detection]) -> list[Detection]:
    """Boxes sorted from lowest to highest precedence.

    Smaller area wins; equal areas break by ascending (class id, x0, y0),
    so the winner is painted last.
    """
    return sorted(dets, key=lambda d: (d.box.area, d.cls, d.box.x0, d.box.y0), reverse=True)


def split_disclosed(
    dets: Iterable[Detection], requested: Collection[int], threshold: float
) -> tuple[list[Detection], list[Detection]]:
    """``(disclosed, withheld)`` among detections of requested classes."""
    disclosed, withheld = [], []
    for d in dets:
        if d.cls not in requested:
            continue
        (disclosed if d.confidence >= threshold else withheld).append(d)
    return disclosed, withheld


def assign_pixels(
    frame_size: tuple[int, int],
    dets: Iterable[Detection],
    requested: Collection[int],
    threshold: float = DEFAULT_DISCLOSE_THRESHOLD,
) -> np.ndarray:
    """Label grid of shape ``(H, W)``: a class id or ``BACKGROUND`` per pixel.

    ``frame_size`` is ``(width, height)``.
    """
    width, height = frame_size
    grid = np.full((height, width), BACKGROUND, dtype=np.int16)
    disclosed, _ = split_disclosed(dets, requested, threshold)
    for d in disclosure_order(disclosed):
        b = d.box
        grid[b.y0 : b.y1, b.x0 : b.x1] = d.cls
    return grid


def mask_frame(frame: np.ndarray, assignment: np.ndarray, label: int, t: int = 0) -> MaskedFrame:
    if assignment.shape != frame.shape[:2]:
        raise ValueError(f"assignment {assignment.shape} does not match frame {frame.shape[:2]}")
    pixels = np.where((assignment == label)[..., None], frame, 0).astype(np.uint8)
    return MaskedFrame(label, t, pixels)


def mask_all(frame: np.ndarray, assignment: np.ndarray, labels: Sequence[int], t: int = 0) -> list[MaskedFrame]:
    return [mask_frame(frame, assignment, label, t) for label in labels]


def compose(masked: Sequence[MaskedFrame], size: tuple[int, int] | None = None) -> np.ndarray:
    """Saturating per-channel sum of masked frames.

    ``size`` (``(width, height)``) is required when ``masked`` is empty.
    """
    if not masked:
        if size is None:
            raise ValueError("compose of no frames needs an explicit size")
        width, height = size
        return np.zeros((height, width, 3), dtype=np.uint8)
    shape = masked[0].pixels.shape
    t = masked[0].t
    labels = set()
    total = np.zeros(shape, dtype=np.uint16)
    for m in masked:
        if m.pixels.shape != shape:
            raise ValueError(f"masked frame size mismatch: {m.pixels.shape} vs {shape}")
        if m.t != t:
            raise ValueError(f"masked frames from different frames: {m.t} vs {t}")
        if m.label in labels:
            raise ValueError(f"duplicate label {m.label}")
        labels.add(m.label)
        total += m.pixels
    if size is not None and (size[1], size[0]) != shape[:2]:
        raise ValueError(f"declared size {size} does not match frames {shape[:2]}")
    return np.minimum(total, 255).astype(np.uint8)
