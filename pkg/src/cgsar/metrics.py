"""Pixel-based segmentation scores with per-building and aggregate reports."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .sargeo import MaskStack


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: Confusion) -> Confusion:
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @classmethod
    def from_masks(cls, pred: np.ndarray, gt: np.ndarray) -> Confusion:
        pred = np.asarray(pred, dtype=bool)
        gt = np.asarray(gt, dtype=bool)
        if pred.shape != gt.shape:
            raise ValueError("prediction and ground truth differ in shape")
        tp = int(np.count_nonzero(pred & gt))
        fp = int(np.count_nonzero(pred & ~gt))
        fn = int(np.count_nonzero(~pred & gt))
        return cls(tp, fp, pred.size - tp - fp - fn, fn)


@dataclass(frozen=True)
class Scores:
    P: float
    R: float
    F1: float
    IoU: float
    OA: float
    flags: tuple[str, ...] = ()


def _ratio(num: int, den: int, label: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(f"{label}: 0/0 taken as 0")
        return 0.0
    return num / den


def score(c: Confusion) -> Scores:
    flags: list[str] = []
    p = _ratio(c.tp, c.tp + c.fp, "precision", flags)
    r = _ratio(c.tp, c.tp + c.fn, "recall", flags)
    if p + r == 0:
        flags.append("F1: 0/0 taken as 0")
        f1 = 0.0
    else:
        f1 = 2 * p * r / (p + r)
    iou = _ratio(c.tp, c.tp + c.fp + c.fn, "IoU", flags)
    oa = _ratio(c.tp + c.tn, c.total, "OA", flags)
    if c.tp == 0 and c.fp > 0 and not any(f.startswith("precision") for f in flags):
        flags.append("precision: no true positives")
    return Scores(p, r, f1, iou, oa, tuple(flags))


METRIC_NAMES = ("P", "R", "F1", "IoU", "OA")


@dataclass
class Report:
    per_building: dict[str, tuple[Confusion, Scores]] = field(default_factory=dict)
    macro: dict[str, float] = field(default_factory=dict)
    micro: dict[str, float] = field(default_factory=dict)
    full_frame_micro: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"macro": self.macro, "micro": self.micro, "full_frame_micro": self.full_frame_micro, "n_buildings": len(self.per_building)},
            indent=2,
            sort_keys=True,
        )

    def write(self, csv_path, json_path) -> None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "tp", "fp", "fn", "tn", *METRIC_NAMES])
            for fid, (c, s) in self.per_building.items():
                w.writerow([fid, c.tp, c.fp, c.fn, c.tn, *(repr(getattr(s, k)) for k in METRIC_NAMES)])
        with open(json_path, "w") as fh:
            fh.write(self.to_json() + "\n")


def _as_dict(s: Scores) -> dict[str, float]:
    return {k: getattr(s, k) for k in METRIC_NAMES}


def evaluate(pred: MaskStack, gt: MaskStack, windows: dict[str, tuple[slice, slice]] | None = None) -> Report:
    """Per-building confusions over each building's window (whole frame if absent)."""
    if set(pred.ids()) != set(gt.ids()):
        missing = sorted(set(pred.ids()) ^ set(gt.ids()))
        raise ValueError(f"prediction and ground-truth ids differ: {missing[:5]}")
    if pred.frame.shape != gt.frame.shape:
        raise ValueError("prediction and ground truth use different frames")
    windows = windows or {}
    report = Report()
    total = Confusion(0, 0, 0, 0)
    full = Confusion(0, 0, 0, 0)
    for fid in gt.ids():
        win = windows.get(fid, (slice(None), slice(None)))
        c = Confusion.from_masks(pred[fid][win], gt[fid][win])
        report.per_building[fid] = (c, score(c))
        total = total + c
        full = full + Confusion.from_masks(pred[fid], gt[fid])
    scores = [s for _, s in report.per_building.values()]
    report.macro = {k: float(np.mean([getattr(s, k) for s in scores])) if scores else 0.0 for k in METRIC_NAMES}
    report.micro = _as_dict(score(total))
    report.full_frame_micro = _as_dict(score(full))
    return report
