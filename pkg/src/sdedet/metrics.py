"""
Detection metrics: matching, precision/recall, PR curves, AP, mAP and F1.

Matching is greedy and one-to-one, per image and per class. Detections are
visited in descending score; each one claims the still-unmatched ground truth
with the highest IoU, provided that IoU reaches the threshold.

AP integrates the all-point interpolated precision envelope over recall.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np

from .boxes import BBox, Detection, GroundTruthBox, cxcywh_to_xyxy, iou
from .errors import DatasetError

IOU_THRESHOLDS: Tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError(f"negative count in {self}")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class MatchResult:
    """Per-detection TP flags in visiting (descending score) order."""

    scores: Tuple[float, ...]
    tp: Tuple[bool, ...]
    fn: int

    @property
    def counts(self) -> ConfusionCounts:
        n_tp = sum(self.tp)
        return ConfusionCounts(n_tp, len(self.tp) - n_tp, self.fn)


def _bbox(item) -> BBox:
    return tuple(item.bbox) if hasattr(item, "bbox") else tuple(item)


def match_detections(dets: Sequence[Detection], gts: Sequence, iou_thresh: float = 0.5) -> MatchResult:
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    gt_boxes = [_bbox(g) for g in gts]
    taken = [False] * len(gt_boxes)
    flags = []
    for i in order:
        box = dets[i].bbox
        best, best_iou = -1, -1.0
        for j, g in enumerate(gt_boxes):
            if taken[j]:
                continue
            v = iou(box, g)
            if v > best_iou:
                best, best_iou = j, v
        if best >= 0 and best_iou >= iou_thresh:
            taken[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return MatchResult(tuple(dets[i].score for i in order), tuple(flags), taken.count(False))


def precision_recall(c: ConfusionCounts) -> Tuple[float, float]:
    """Precision and recall; each is 0 when its denominator is 0."""
    p = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    r = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    return p, r


def f1(precision: float, recall: float) -> float:
    s = precision + recall
    return 2.0 * precision * recall / s if s > 0 else 0.0


@dataclass(frozen=True)
class PRCurve:
    """(recall, precision) points, recall non-decreasing."""

    points: Tuple[Tuple[float, float], ...] = ()

    def __post_init__(self):
        prev = 0.0
        for r, p in self.points:
            if not (0.0 <= r <= 1.0 and 0.0 <= p <= 1.0):
                raise ValueError(f"PR point ({r}, {p}) outside the unit square")
            if r < prev:
                raise ValueError("recall must be non-decreasing along the curve")
            prev = r

    @property
    def recall(self) -> np.ndarray:
        return np.array([r for r, _ in self.points], dtype=np.float64)

    @property
    def precision(self) -> np.ndarray:
        return np.array([p for _, p in self.points], dtype=np.float64)


def curve_from_flags(tp_flags: Sequence[bool], n_gt: int) -> PRCurve:
    """Cumulative (recall, precision) after each prefix of a score-sorted list."""
    points = []
    tp = 0
    for k, hit in enumerate(tp_flags, 1):
        tp += bool(hit)
        points.append((tp / n_gt if n_gt else 0.0, tp / k))
    return PRCurve(tuple(points))


def pr_curve(dets: Sequence[Detection], gts: Sequence, iou_thresh: float = 0.5) -> PRCurve:
    m = match_detections(dets, gts, iou_thresh)
    return curve_from_flags(m.tp, len(gts))


def precision_envelope(curve: PRCurve) -> np.ndarray:
    """Right-to-left running maximum of precision."""
    p = curve.precision
    return np.maximum.accumulate(p[::-1])[::-1] if p.size else p


def average_precision(curve: PRCurve) -> float:
    if not curve.points:
        return 0.0
    r = curve.recall
    env = precision_envelope(curve)
    steps = np.diff(np.concatenate([[0.0], r]))
    return float(np.sum(steps * env))


def mean_ap(per_class_aps: Sequence[float]) -> float:
    return float(np.mean(per_class_aps)) if len(per_class_aps) else 0.0


def _by_class(items) -> Dict[int, list]:
    out: Dict[int, list] = {}
    for it in items:
        out.setdefault(int(it.class_id), []).append(it)
    return out


def _pooled_ap(images: Sequence[Tuple[Sequence[Detection], Sequence]], iou_thresh: float) -> float:
    """AP over several images of a single class, with detections ranked globally."""
    scores: List[float] = []
    flags: List[bool] = []
    n_gt = 0
    for dets, gts in images:
        m = match_detections(dets, gts, iou_thresh)
        scores.extend(m.scores)
        flags.extend(m.tp)
        n_gt += len(gts)
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    return average_precision(curve_from_flags([flags[i] for i in order], n_gt))


def class_aps(preds: Mapping[str, Sequence[Detection]], gts: Mapping[str, Sequence[GroundTruthBox]],
              iou_thresh: float) -> Dict[int, float]:
    """AP per class for every class that has at least one ground-truth box."""
    stems = sorted(gts)
    classes = sorted({g.class_id for s in stems for g in gts[s]})
    out = {}
    for c in classes:
        images = [([d for d in preds.get(s, ()) if d.class_id == c],
                   [g for g in gts[s] if g.class_id == c]) for s in stems]
        out[c] = _pooled_ap(images, iou_thresh)
    return out


def map_range(dets, gts, thresholds: Sequence[float] = IOU_THRESHOLDS) -> float:
    """Mean over IoU thresholds of the class-mean AP.

    ``dets`` and ``gts`` are either flat lists for one image or
    ``stem -> list`` mappings for a dataset.
    """
    if not isinstance(gts, Mapping):
        gts = [g if isinstance(g, GroundTruthBox) else GroundTruthBox(tuple(g)) for g in gts]
        dets, gts = {"_": list(dets)}, {"_": gts}
    return float(np.mean([mean_ap(list(class_aps(dets, gts, t).values())) for t in thresholds]))


@dataclass(frozen=True)
class EvalReport:
    precision: float
    recall: float
    f1: float
    map50: float
    map50_95: float
    ap_per_threshold: Tuple[float, ...]
    per_class_ap: Dict[int, float] = field(default_factory=dict)
    counts: ConfusionCounts = ConfusionCounts(0, 0, 0)

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "map50": self.map50,
            "map50_95": self.map50_95,
            "ap_per_threshold": list(self.ap_per_threshold),
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "num_classes": len(self.per_class_ap),
            "tp": self.counts.tp, "fp": self.counts.fp, "fn": self.counts.fn,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def evaluate(preds: Mapping[str, Sequence[Detection]], gts: Mapping[str, Sequence[GroundTruthBox]],
             conf: float = 0.25, thresholds: Sequence[float] = IOU_THRESHOLDS) -> EvalReport:
    """Dataset metrics; P/R/F1 use detections scoring at least ``conf`` at IoU 0.5."""
    counts = ConfusionCounts(0, 0, 0)
    for stem in sorted(gts):
        dets = [d for d in preds.get(stem, ()) if d.score >= conf]
        by_det, by_gt = _by_class(dets), _by_class(gts[stem])
        for c in sorted(set(by_det) | set(by_gt)):
            counts = counts + match_detections(by_det.get(c, []), by_gt.get(c, []), 0.5).counts
    p, r = precision_recall(counts)
    per_class = class_aps(preds, gts, 0.5)
    per_threshold = [mean_ap(list((per_class if t == 0.5 else class_aps(preds, gts, t)).values()))
                     for t in thresholds]
    return EvalReport(p, r, f1(p, r), mean_ap(list(per_class.values())), float(np.mean(per_threshold)),
                      tuple(per_threshold), per_class, counts)


# ---------------------------------------------------------------------------
# Text files
# ---------------------------------------------------------------------------
def _read_rows(path: Path, width: int) -> List[List[float]]:
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != width:
            raise DatasetError(f"{path}:{lineno}: expected {width} fields, got {len(parts)}")
        try:
            vals = [float(v) for v in parts]
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: non-numeric field in {line!r}") from None
        if vals[0] != int(vals[0]) or vals[0] < 0:
            raise DatasetError(f"{path}:{lineno}: class id must be a non-negative integer")
        rows.append(vals)
    return rows


def read_ground_truth(path: Union[str, Path]) -> List[GroundTruthBox]:
    """``class cx cy w h`` lines, normalized."""
    return [GroundTruthBox(cxcywh_to_xyxy(*v[1:]), int(v[0])) for v in _read_rows(Path(path), 5)]


def read_predictions(path: Union[str, Path]) -> List[Detection]:
    """``class score cx cy w h`` lines, normalized."""
    out = []
    for lineno, v in enumerate(_read_rows(Path(path), 6), 1):
        try:
            out.append(Detection(cxcywh_to_xyxy(*v[2:]), v[1], int(v[0])))
        except ValueError as exc:
            raise DatasetError(f"{path}: {exc}") from None
    return out


def write_predictions(path: Union[str, Path], dets: Iterable[Detection]) -> None:
    lines = []
    for d in dets:
        x0, y0, x1, y1 = (float(v) for v in d.bbox)
        lines.append(f"{d.class_id} {float(d.score)!r} {(x0 + x1) / 2!r} {(y0 + y1) / 2!r} {x1 - x0!r} {y1 - y0!r}\n")
    Path(path).write_text("".join(lines))


def write_ground_truth(path: Union[str, Path], gts: Iterable[GroundTruthBox]) -> None:
    lines = []
    for g in gts:
        x0, y0, x1, y1 = (float(v) for v in g.bbox)
        lines.append(f"{g.class_id} {(x0 + x1) / 2!r} {(y0 + y1) / 2!r} {x1 - x0!r} {y1 - y0!r}\n")
    Path(path).write_text("".join(lines))


def evaluate_dataset(pred_dir: Union[str, Path], gt_dir: Union[str, Path], conf: float = 0.25) -> EvalReport:
    """Evaluate ``<stem>.txt`` prediction files against same-stem ground truth files."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise DatasetError(f"not a directory: {d}")
    pred_files = {p.stem: p for p in pred_dir.glob("*.txt")}
    gt_files = {p.stem: p for p in gt_dir.glob("*.txt")}
    for stem in sorted(set(pred_files) ^ set(gt_files)):
        if stem in pred_files:
            raise DatasetError(f"{pred_files[stem].name}: no ground truth file {stem}.txt in {gt_dir}")
        raise DatasetError(f"{gt_files[stem].name}: no prediction file {stem}.txt in {pred_dir}")
    preds = {s: read_predictions(p) for s, p in pred_files.items()}
    gts = {s: read_ground_truth(p) for s, p in gt_files.items()}
    return evaluate(preds, gts, conf)
