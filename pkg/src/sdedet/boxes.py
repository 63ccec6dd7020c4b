"""Axis-aligned boxes, scored detections, IoU and greedy NMS."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

BBox = Tuple[float, float, float, float]  # (x_min, y_min, x_max, y_max)


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    score: float
    class_id: int = 0

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if x0 > x1 or y0 > y1:
            raise ValueError(f"degenerate box {self.bbox}: min must not exceed max")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    def to_line(self) -> str:
        x0, y0, x1, y1 = self.bbox
        return f"{self.class_id} {self.score:.6f} {x0:.6f} {y0:.6f} {x1:.6f} {y1:.6f}"

    def to_dict(self) -> dict:
        return {"class": self.class_id, "score": self.score, "bbox": list(self.bbox)}


@dataclass(frozen=True)
class GroundTruthBox:
    bbox: BBox
    class_id: int = 0


def format_detections(dets: Iterable[Detection]) -> str:
    """``class score x_min y_min x_max y_max`` per line, six decimals."""
    return "".join(d.to_line() + "\n" for d in dets)


def detections_json(dets: Iterable[Detection]) -> str:
    return json.dumps([d.to_dict() for d in dets])


def cxcywh_to_xyxy(cx, cy, w, h) -> BBox:
    return (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


def xyxy_to_cxcywh(box: Sequence[float]) -> Tuple[float, float, float, float]:
    x0, y0, x1, y1 = box
    return ((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union; 0 when the union has no area."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``a[N,4]`` and ``b[M,4]`` xyxy boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return out


def nms(dets: Sequence[Detection], iou_thresh: float = 0.7) -> List[Detection]:
    """Greedy suppression in descending score order.

    Keeps the best remaining box and drops every other box whose IoU with it
    exceeds ``iou_thresh``. Classes are not separated; filter first if needed.
    Equal scores keep their input order.
    """
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    boxes = np.array([dets[i].bbox for i in order], dtype=np.float64)
    x0, y0, x1, y1 = boxes.T
    area = (x1 - x0) * (y1 - y0)
    remaining = np.arange(len(order))
    keep = []
    while remaining.size:
        i = remaining[0]
        keep.append(order[i])
        rest = remaining[1:]
        iw = np.minimum(x1[i], x1[rest]) - np.maximum(x0[i], x0[rest])
        ih = np.minimum(y1[i], y1[rest]) - np.maximum(y0[i], y0[rest])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        union = area[i] + area[rest] - inter
        overlap = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
        remaining = rest[overlap <= iou_thresh]
    return [dets[i] for i in keep]
