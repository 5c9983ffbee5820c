"""Detection metrics (AP over NMS sweeps) and recognition metrics (CMC), with report writers."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .annotations import ImageRecord
from .classifier import RankedPrediction
from .detection import FLANK, TIGER, DetectorOutput, iou, postprocess

DEFAULT_SWEEP = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
DEFAULT_CLASSES = (TIGER, FLANK)


class MetricError(ValueError):
    pass


@dataclass
class APResult:
    label: str
    ap: float
    precision_recall: list[tuple[float, float]]
    n_gt: int


@dataclass
class SweepTable:
    thresholds: list[float]
    classes: list[str]
    ap: dict[str, list[float]]
    params: dict = field(default_factory=dict)

    @property
    def mean_ap(self) -> list[float]:
        return [float(np.mean([self.ap[c][j] for c in self.classes])) for j in range(len(self.thresholds))]


@dataclass
class CMCCurve:
    accuracies: list[float]

    def at(self, rank: int) -> float:
        return self.accuracies[rank - 1]


@dataclass
class SplitAggregate:
    values: list[float]
    mean: float
    std: float


# ---------------------------------------------------------------------------
# detection


def _gt_boxes(gts: Sequence[ImageRecord], label: str) -> dict[str, list]:
    return {r.image_id: r.boxes_with_label(label) for r in gts}


def average_precision(dets: Sequence[DetectorOutput], gts: Sequence[ImageRecord], label: str,
                      match_iou: float = 0.5) -> APResult:
    """VOC all-points AP for one class.

    Only detections on images present in ``gts`` are scored. Detections are
    ranked by descending score (ties by image id, then box) and greedily
    matched to the best-overlapping unmatched ground-truth box; duplicates
    count as false positives.
    """
    gt = _gt_boxes(gts, label)
    n_gt = sum(len(v) for v in gt.values())
    if n_gt == 0:
        if not any(d.label == label for out in dets for d in out.detections):
            raise MetricError(f"unknown class {label!r}: absent from ground truth and detections")
        raise MetricError(f"no ground truth for class {label!r}; AP undefined")
    ranked = sorted(
        ((d.score, out.image_id, d.box) for out in dets if out.image_id in gt for d in out.with_label(label)),
        key=lambda e: (-e[0], e[1], e[2].coords()),
    )
    used = {k: [False] * len(v) for k, v in gt.items()}
    tp = np.zeros(len(ranked))
    for i, (_, image_id, box) in enumerate(ranked):
        best, best_j = -1.0, -1
        for j, g in enumerate(gt[image_id]):
            o = iou(box, g)
            if o > best:
                best, best_j = o, j
        if best >= match_iou and not used[image_id][best_j]:
            used[image_id][best_j] = True
            tp[i] = 1
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(ranked) + 1) if len(ranked) else np.zeros(0)
    ap = _all_points_ap(recall, precision)
    return APResult(label, ap, list(zip(recall.tolist(), precision.tolist())), n_gt)


def _all_points_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    steps = np.nonzero(r[1:] != r[:-1])[0]
    return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))


def mean_ap(results: Sequence[APResult]) -> float:
    return float(np.mean([r.ap for r in results]))


def mean_best_iou(dets: Sequence[DetectorOutput], gts: Sequence[ImageRecord], label: str) -> float:
    """Average over ground-truth boxes of the best same-class IoU (0 if none).

    An auxiliary localisation score, separate from AP.
    """
    by_image = {o.image_id: o.with_label(label) for o in dets}
    vals = [max((iou(d.box, g) for d in by_image.get(r.image_id, [])), default=0.0)
            for r in gts for g in r.boxes_with_label(label)]
    if not vals:
        raise MetricError(f"no ground truth for class {label!r}")
    return float(np.mean(vals))


def nms_sweep(raw: Sequence[DetectorOutput], gts: Sequence[ImageRecord], thresholds=DEFAULT_SWEEP,
              min_score: float = 0.8, classes=DEFAULT_CLASSES, match_iou: float = 0.5) -> SweepTable:
    thresholds = [float(t) for t in thresholds]
    if not thresholds or any(not 0 < t < 1 for t in thresholds):
        raise MetricError("thresholds must be a nonempty list of values in (0, 1)")
    ap = {c: [] for c in classes}
    for t in thresholds:
        processed = [postprocess(o, min_score, t) for o in raw]
        for c in classes:
            ap[c].append(average_precision(processed, gts, c, match_iou).ap)
    return SweepTable(thresholds, list(classes), ap,
                      {"min_score": min_score, "match_iou": match_iou})


# ---------------------------------------------------------------------------
# recognition


def rank_k_accuracy(predictions: Sequence[RankedPrediction], truth: Sequence[str], k: int) -> float:
    if len(predictions) != len(truth):
        raise MetricError(f"{len(predictions)} predictions for {len(truth)} labels")
    if not predictions:
        raise MetricError("no predictions")
    n_classes = len(predictions[0].ranking)
    if k < 1 or k > n_classes:
        raise MetricError(f"rank {k} outside 1..{n_classes}")
    hits = sum(t in p.labels[:k] for p, t in zip(predictions, truth))
    return hits / len(truth)


def cmc_curve(predictions: Sequence[RankedPrediction], truth: Sequence[str], max_rank: int = 5) -> CMCCurve:
    return CMCCurve([rank_k_accuracy(predictions, truth, r) for r in range(1, max_rank + 1)])


def aggregate_splits(per_split: Sequence[float]) -> SplitAggregate:
    vals = [float(v) for v in per_split]
    if len(vals) < 2:
        raise MetricError("need at least two splits to aggregate")
    mean = math.fsum(vals) / len(vals)
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - 1))
    return SplitAggregate(vals, mean, std)


# ---------------------------------------------------------------------------
# reports

DELIMITED, STRUCTURED = "tsv", "json"


def _f4(v: float) -> str:
    return f"{v:.4f}"


def _table_rows(obj) -> tuple[str, list[str], list[list[str]], dict]:
    """``(kind, header, rows, params)`` for any reportable object."""
    if isinstance(obj, SweepTable):
        # one column per NMS threshold, one row per class, mAP last
        header = ["class", *(f"{t:g}" for t in obj.thresholds)]
        rows = [[c, *(_f4(v) for v in obj.ap[c])] for c in obj.classes]
        rows.append(["mAP", *(_f4(v) for v in obj.mean_ap)])
        return "nms_sweep", header, rows, obj.params
    if isinstance(obj, CMCCurve):
        return "cmc", ["rank", "accuracy"], [[str(r), _f4(a)] for r, a in enumerate(obj.accuracies, 1)], {}
    if isinstance(obj, APResult):
        return ("pr_curve", ["recall", "precision"],
                [[_f4(r), _f4(p)] for r, p in obj.precision_recall], {"class": obj.label, "ap": _f4(obj.ap)})
    if isinstance(obj, SplitAggregate):
        rows = [[str(i), _f4(v), ""] for i, v in enumerate(obj.values)]
        rows.append(["mean", _f4(obj.mean), _f4(obj.std)])
        return "rank1_splits", ["split", "rank1", "std"], rows, {}
    raise TypeError(f"cannot report {type(obj).__name__}")


def emit_report(obj, path: str | Path, fmt: str = DELIMITED, params: dict | None = None) -> Path:
    """Write ``obj`` as tab-delimited text (``#`` metadata header) or JSON.

    Output depends only on the inputs, so re-emission is byte-identical.
    """
    kind, header, rows, own = _table_rows(obj)
    meta = {"tool": f"flankid {__version__}", "report": kind, **own, **(params or {})}
    path = Path(path)
    if fmt == DELIMITED:
        lines = [f"# {k}: {meta[k]}" for k in sorted(meta)]
        lines.append("\t".join(header))
        lines.extend("\t".join(r) for r in rows)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    elif fmt == STRUCTURED:
        payload = {"meta": meta, "columns": header, "rows": rows}
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def read_report(path: str | Path) -> dict:
    """Read either report format back into ``{"meta", "columns", "rows"}``."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        return json.loads(text)
    meta, lines = {}, []
    for line in text.splitlines():
        if line.startswith("# "):
            k, _, v = line[2:].partition(": ")
            meta[k] = v
        elif line:
            lines.append(line.split("\t"))
    return {"meta": meta, "columns": lines[0] if lines else [], "rows": lines[1:]}


def write_report_data(data: dict, path: str | Path, fmt: str) -> Path:
    path = Path(path)
    if fmt == STRUCTURED:
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    else:
        meta = data["meta"]
        lines = [f"# {k}: {meta[k]}" for k in sorted(meta)]
        lines.append("\t".join(data["columns"]))
        lines.extend("\t".join(r) for r in data["rows"])
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
