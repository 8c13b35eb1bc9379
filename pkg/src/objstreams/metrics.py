"""Confusion tallies, privacy/utility losses and the whitelisting guarantee.

Tally conventions:

* ``tp[c]``: truth objects of class ``c`` matched by a detection labelled ``c``.
* ``fp[c, c']``: truth objects of class ``c`` matched by a detection labelled ``c' != c``.
* ``fn[c]``: truth objects of class ``c`` *not* detected as ``c`` (missed or
  relabelled), so ``tp[c] + fn[c]`` is the ground-truth count.
* ``missed[c]``: the unmatched subset of ``fn[c]``.
* ``spurious[c']``: detections labelled ``c'`` that matched no truth object.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .scene import BACKGROUND_NAME, ClassUniverse, DetectionTrace
from .tracker import iou

NO_OBJECTS = "no-objects"


@dataclass
class ConfusionTally:
    classes: ClassUniverse
    tp: np.ndarray
    fn: np.ndarray
    missed: np.ndarray
    fp: np.ndarray
    spurious: np.ndarray

    @classmethod
    def zeros(cls, classes: ClassUniverse) -> ConfusionTally:
        n = len(classes)
        z = lambda *shape: np.zeros(shape, dtype=np.int64)  # noqa: E731
        return cls(classes, z(n), z(n), z(n), z(n, n), z(n))

    @property
    def ground_truth(self) -> np.ndarray:
        return self.tp + self.fn

    def __add__(self, other: ConfusionTally) -> ConfusionTally:
        if other.classes != self.classes:
            raise ValueError("tallies over different class universes")
        return ConfusionTally(
            self.classes,
            self.tp + other.tp,
            self.fn + other.fn,
            self.missed + other.missed,
            self.fp + other.fp,
            self.spurious + other.spurious,
        )

    def to_json(self) -> dict:
        return {
            "classes": list(self.classes.names),
            "tp": self.tp.tolist(),
            "fn": self.fn.tolist(),
            "missed": self.missed.tolist(),
            "fp": self.fp.tolist(),
            "spurious": self.spurious.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> ConfusionTally:
        arr = lambda k: np.asarray(doc[k], dtype=np.int64)  # noqa: E731
        tally = cls(ClassUniverse(doc["classes"]), arr("tp"), arr("fn"), arr("missed"), arr("fp"), arr("spurious"))
        tally.validate()
        return tally

    def validate(self) -> None:
        n = len(self.classes)
        for name in ("tp", "fn", "missed", "spurious"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have {n} entries")
        if self.fp.shape != (n, n):
            raise ValueError(f"fp must be {n}x{n}")
        for name in ("tp", "fn", "missed", "fp", "spurious"):
            if (getattr(self, name) < 0).any():
                raise ValueError(f"negative count in {name}")
        if np.diag(self.fp).any():
            raise ValueError("fp diagonal must be zero")
        if (self.fn != self.missed + self.fp.sum(axis=1)).any():
            raise ValueError("fn must equal missed plus relabelled-away counts")


def greedy_match(ious: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """One-to-one pairs by descending IoU (ties by truth then prediction index)."""
    rows, cols = np.nonzero(ious >= threshold)
    order = sorted(zip(rows.tolist(), cols.tolist()), key=lambda rc: (-ious[rc], rc[0], rc[1]))
    used_r, used_c, pairs = set(), set(), []
    for r, c in order:
        if r in used_r or c in used_c:
            continue
        used_r.add(r)
        used_c.add(c)
        pairs.append((r, c))
    return pairs


def match_and_tally(truth: DetectionTrace, pred: DetectionTrace, iou_match: float = 0.5) -> ConfusionTally:
    if truth.classes != pred.classes:
        raise ValueError("truth and prediction use different class universes")
    if (truth.width, truth.height) != (pred.width, pred.height):
        raise ValueError("truth and prediction differ in resolution")
    if len(pred.frames) > len(truth.frames):
        raise ValueError("prediction has more frames than truth")
    tally = ConfusionTally.zeros(truth.classes)
    for t, gt in enumerate(truth.frames):
        pd = pred.frames[t] if t < len(pred.frames) else []
        ious = np.array([[iou(g.box, p.box) for p in pd] for g in gt], dtype=float).reshape(len(gt), len(pd))
        pairs = greedy_match(ious, iou_match)
        matched_g = {r for r, _ in pairs}
        matched_p = {c for _, c in pairs}
        for r, c in pairs:
            g, p = gt[r], pd[c]
            if g.cls == p.cls:
                tally.tp[g.cls] += 1
            else:
                tally.fp[g.cls, p.cls] += 1
                tally.fn[g.cls] += 1
        for r, g in enumerate(gt):
            if r not in matched_g:
                tally.fn[g.cls] += 1
                tally.missed[g.cls] += 1
        for c, p in enumerate(pd):
            if c not in matched_p:
                tally.spurious[p.cls] += 1
    return tally


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


@dataclass
class LossReport:
    whitelist: list[str]
    blacklist: list[str]
    p_wl: float | None
    p_bl: float | None
    u_wl: float | None
    u_bl: float | None
    precision_beta: float | None
    recall_beta: float | None
    overlap: list[str] = field(default_factory=list)

    def as_row(self) -> dict:
        fmt = lambda v: NO_OBJECTS if v is None else repr(float(v))  # noqa: E731
        return {
            "whitelist": "+".join(self.whitelist),
            "blacklist": "+".join(self.blacklist),
            "p_wl": fmt(self.p_wl),
            "p_bl": fmt(self.p_bl),
            "u_wl": fmt(self.u_wl),
            "u_bl": fmt(self.u_bl),
            "precision_beta": fmt(self.precision_beta),
            "recall_beta": fmt(self.recall_beta),
        }


def _ids(tally: ConfusionTally, names: Iterable[str]) -> list[int]:
    return sorted({tally.classes.id(n) for n in names if n != BACKGROUND_NAME})


def compute_losses(tally: ConfusionTally, whitelist: Iterable[str], blacklist: Iterable[str]) -> LossReport:
    whitelist, blacklist = list(whitelist), list(blacklist)
    omega, beta = _ids(tally, whitelist), _ids(tally, blacklist)
    tp, fn, fp = tally.tp, tally.fn, tally.fp
    sensitive_total = int(tp[beta].sum() + fn[beta].sum())
    relevant_total = int(tp[omega].sum() + fn[omega].sum())
    leaked = int(fp[np.ix_(beta, omega)].sum()) if beta and omega else 0
    suppressed = int(fp[np.ix_(omega, beta)].sum()) if beta and omega else 0
    tp_b = int(tp[beta].sum())
    fp_b = int(fp[beta].sum())
    return LossReport(
        whitelist=[tally.classes.name(i) for i in omega],
        blacklist=[tally.classes.name(i) for i in beta],
        p_wl=_ratio(leaked, sensitive_total),
        p_bl=_ratio(int(fn[beta].sum()), sensitive_total),
        u_wl=_ratio(int(fn[omega].sum()), relevant_total),
        u_bl=_ratio(suppressed, relevant_total),
        precision_beta=_ratio(tp_b, tp_b + fp_b),
        recall_beta=_ratio(tp_b, sensitive_total),
        overlap=sorted(set(whitelist) & set(blacklist)),
    )


@dataclass
class Theorem1Verdict:
    precondition: bool
    holds: bool | None
    strict: bool
    precision_beta: float | None
    recall_beta: float | None
    p_wl: float | None
    p_bl: float | None
    fn_beta: int
    fp_beta: int

    @property
    def status(self) -> str:
        if not self.precondition:
            return "precondition unmet"
        return "holds" if self.holds else "violated"


def check_theorem1(tally: ConfusionTally, whitelist: Iterable[str], blacklist: Iterable[str]) -> Theorem1Verdict:
    """If precision over the sensitive classes beats recall, P_WL must be below P_BL.

    The comparison is strict whenever sensitive misses outnumber sensitive
    relabels; otherwise only ``<=`` is claimed.
    """
    report = compute_losses(tally, whitelist, blacklist)
    beta = _ids(tally, blacklist)
    fn_b, fp_b = int(tally.fn[beta].sum()), int(tally.fp[beta].sum())
    pre = (
        report.precision_beta is not None
        and report.recall_beta is not None
        and report.precision_beta > report.recall_beta
    )
    holds = None
    strict = fn_b > fp_b
    if pre:
        holds = report.p_wl < report.p_bl if strict else report.p_wl <= report.p_bl
    return Theorem1Verdict(pre, holds, strict, report.precision_beta, report.recall_beta, report.p_wl, report.p_bl, fn_b, fp_b)


def random_tally(rng: np.random.Generator, n_classes: int = 4, scale: int = 50) -> ConfusionTally:
    classes = ClassUniverse([f"c{i}" for i in range(n_classes)])
    tally = ConfusionTally.zeros(classes)
    tally.tp[:] = rng.integers(0, scale, n_classes)
    tally.missed[:] = rng.integers(0, scale, n_classes)
    fp = rng.integers(0, max(2, scale // 5), (n_classes, n_classes)) * (rng.random((n_classes, n_classes)) < 0.6)
    np.fill_diagonal(fp, 0)
    tally.fp[:] = fp
    tally.fn[:] = tally.missed + tally.fp.sum(axis=1)
    tally.spurious[:] = rng.integers(0, scale // 5 + 1, n_classes)
    return tally


def random_split(rng: np.random.Generator, names: Sequence[str]) -> tuple[list[str], list[str]]:
    """Disjoint non-empty (whitelist, blacklist) from ``names`` (needs >= 2 names)."""
    perm = list(rng.permutation(len(names)))
    k_beta = int(rng.integers(1, len(names)))
    k_omega = int(rng.integers(1, len(names) - k_beta + 1))
    beta = [names[i] for i in perm[:k_beta]]
    omega = [names[i] for i in perm[k_beta : k_beta + k_omega]]
    return omega, beta


@dataclass
class FuzzResult:
    cases: int
    drawn: int
    counterexamples: list[dict]


def fuzz_theorem1(n_cases: int = 10_000, seed: int = 0, n_classes: int = 4) -> FuzzResult:
    """Check the guarantee on ``n_cases`` random tallies that satisfy its precondition."""
    rng = np.random.default_rng(seed)
    found, drawn, bad = 0, 0, []
    while found < n_cases:
        tally = random_tally(rng, n_classes)
        omega, beta = random_split(rng, tally.classes.names)
        drawn += 1
        verdict = check_theorem1(tally, omega, beta)
        if not verdict.precondition:
            continue
        found += 1
        if not verdict.holds:
            bad.append({"tally": tally.to_json(), "whitelist": omega, "blacklist": beta})
    return FuzzResult(found, drawn, bad)


REPORT_COLUMNS = [
    "scene",
    "detector",
    "whitelist",
    "blacklist",
    "p_wl",
    "p_bl",
    "u_wl",
    "u_bl",
    "precision_beta",
    "recall_beta",
]


def emit_report(rows: Iterable[tuple[str, str, LossReport]], path=None) -> str:
    """CSV with one row per ``(scene, detector, report)``; written to ``path`` if given."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for scene, detector, report in rows:
        writer.writerow({"scene": scene, "detector": detector, **report.as_row()})
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def load_tally(path) -> ConfusionTally:
    with open(path) as fh:
        return ConfusionTally.from_json(json.load(fh))


def save_tally(tally: ConfusionTally, path) -> None:
    with open(path, "w") as fh:
        json.dump(tally.to_json(), fh, indent=2)
        fh.write("\n")
