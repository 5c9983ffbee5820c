"""Post-processing of raw detector proposals and flank/expert routing.

The detector itself is pluggable: anything with a ``detect(image_id)``
method returning a :class:`DetectorOutput` works. :class:`FileDetector`
serves proposals precomputed by an external Faster-RCNN run.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .annotations import AnnotationError, LabeledBox

TIGER = "tiger"
FLANK = "flank"

FLANK_READY = "flank_ready"
EXPERT_REVIEW = "expert_review"
NO_ANIMAL = "no_animal"

RAW_HEADER = ["image_id", "class", "score", "x_min", "y_min", "x_max", "y_max"]


class DetectionFormatError(ValueError):
    pass


class ScoreRangeError(DetectionFormatError):
    pass


@dataclass(frozen=True)
class Detection:
    box: LabeledBox
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ScoreRangeError(f"score {self.score} outside [0, 1]")

    @property
    def label(self) -> str:
        return self.box.label

    def sort_key(self):
        return (-self.score, self.box.coords())


@dataclass
class DetectorOutput:
    image_id: str
    detections: list[Detection] = field(default_factory=list)

    def with_label(self, label: str) -> list[Detection]:
        return [d for d in self.detections if d.label == label]


@dataclass(frozen=True)
class RoutingDecision:
    image_id: str
    status: str
    selected_flank: Detection | None = None
    selected_body: Detection | None = None


class DetectorBackend(Protocol):
    def detect(self, image_id: str) -> DetectorOutput: ...


class FileDetector:
    """Backend serving proposals read from a raw-detections file."""

    def __init__(self, path: str | Path):
        self._outputs = {o.image_id: o for o in load_raw_detections(path)}

    def detect(self, image_id: str) -> DetectorOutput:
        found = self._outputs.get(image_id)
        return DetectorOutput(image_id, list(found.detections) if found else [])


def iou(a: LabeledBox, b: LabeledBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def filter_by_score(dets: list[Detection], min_score: float = 0.8) -> list[Detection]:
    return [d for d in dets if d.score > min_score]


def _iou_matrix(boxes: np.ndarray) -> np.ndarray:
    x0 = np.maximum(boxes[:, None, 0], boxes[None, :, 0])
    y0 = np.maximum(boxes[:, None, 1], boxes[None, :, 1])
    x1 = np.minimum(boxes[:, None, 2], boxes[None, :, 2])
    y1 = np.minimum(boxes[:, None, 3], boxes[None, :, 3])
    inter = np.clip(x1 - x0, 0, None) * np.clip(y1 - y0, 0, None)
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    return inter / (area[:, None] + area[None, :] - inter)


def nms(dets: list[Detection], iou_threshold: float = 0.3) -> list[Detection]:
    """Greedy single-class NMS; survivors come back in descending score order."""
    if not dets:
        return []
    labels = {d.label for d in dets}
    if len(labels) > 1:
        raise ValueError(f"nms expects a single class, got {sorted(labels)}")
    ordered = sorted(dets, key=Detection.sort_key)
    overlap = _iou_matrix(np.array([d.box.coords() for d in ordered], dtype=np.float64))
    alive = np.ones(len(ordered), dtype=bool)
    keep = []
    for i in range(len(ordered)):
        if not alive[i]:
            continue
        keep.append(ordered[i])
        alive[i + 1:] &= overlap[i, i + 1:] <= iou_threshold
    return keep


def postprocess(raw: DetectorOutput, min_score: float = 0.8, nms_threshold: float = 0.3) -> DetectorOutput:
    kept = filter_by_score(raw.detections, min_score)
    by_class: dict[str, list[Detection]] = defaultdict(list)
    for d in kept:
        by_class[d.label].append(d)
    survivors = [d for label in sorted(by_class) for d in nms(by_class[label], nms_threshold)]
    survivors.sort(key=lambda d: (d.sort_key(), d.label))
    return DetectorOutput(raw.image_id, survivors)


def associate_flank(tigers: list[Detection], flanks: list[Detection], min_overlap: float = 0.7
                    ) -> tuple[list[tuple[Detection, Detection]], list[Detection]]:
    """Pair each flank with the body box covering most of it.

    Flanks are visited by descending score; a flank is paired with the free
    body maximising intersection / flank area if that ratio reaches
    ``min_overlap``. Returns ``(pairs, unmatched_flanks)``.
    """
    free = sorted(tigers, key=Detection.sort_key)
    pairs, unmatched = [], []
    for f in sorted(flanks, key=Detection.sort_key):
        best, best_ratio = None, -1.0
        for body in free:
            iw = min(f.box.x_max, body.box.x_max) - max(f.box.x_min, body.box.x_min)
            ih = min(f.box.y_max, body.box.y_max) - max(f.box.y_min, body.box.y_min)
            ratio = max(iw, 0) * max(ih, 0) / f.box.area
            if ratio > best_ratio:
                best, best_ratio = body, ratio
        if best is not None and best_ratio >= min_overlap:
            pairs.append((best, f))
            free.remove(best)
        else:
            unmatched.append(f)
    return pairs, unmatched


def route(output: DetectorOutput, min_overlap: float = 0.7) -> RoutingDecision:
    tigers = output.with_label(TIGER)
    flanks = output.with_label(FLANK)
    if flanks:
        best_flank = min(flanks, key=Detection.sort_key)
        pairs, _ = associate_flank(tigers, flanks, min_overlap)
        body = next((b for b, f in pairs if f is best_flank), None)
        return RoutingDecision(output.image_id, FLANK_READY, best_flank, body)
    if tigers:
        return RoutingDecision(output.image_id, EXPERT_REVIEW, None, min(tigers, key=Detection.sort_key))
    return RoutingDecision(output.image_id, NO_ANIMAL)


def load_raw_detections(path: str | Path) -> list[DetectorOutput]:
    """Read ``image_id,class,score,x_min,y_min,x_max,y_max`` rows (header required)."""
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return []
    rows = csv.reader(text.splitlines())
    header = [h.strip() for h in next(rows)]
    if header != RAW_HEADER:
        raise DetectionFormatError(f"{path}: header must be {','.join(RAW_HEADER)}, got {','.join(header)}")
    grouped: dict[str, list[Detection]] = defaultdict(list)
    for lineno, row in enumerate(rows, 2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(RAW_HEADER):
            raise DetectionFormatError(f"{path}:{lineno}: expected {len(RAW_HEADER)} fields, got {len(row)}")
        image_id, label = row[0].strip(), row[1].strip()
        try:
            score, *coords = (float(v) for v in row[2:])
        except ValueError as exc:
            raise DetectionFormatError(f"{path}:{lineno}: {exc}") from exc
        if not 0.0 <= score <= 1.0:
            raise ScoreRangeError(f"{path}:{lineno}: score {score} outside [0, 1]")
        try:
            box = LabeledBox(label, *coords)
        except AnnotationError as exc:
            raise DetectionFormatError(f"{path}:{lineno}: {exc}") from exc
        grouped[image_id].append(Detection(box, score))
    return [DetectorOutput(k, grouped[k]) for k in sorted(grouped)]


def save_raw_detections(outputs: list[DetectorOutput], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RAW_HEADER)
        for out in outputs:
            for d in out.detections:
                w.writerow([out.image_id, d.label, repr(float(d.score)), *(repr(float(c)) for c in d.box.coords())])
