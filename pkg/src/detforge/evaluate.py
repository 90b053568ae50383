"""COCO-style detection evaluation.

Greedy score-ordered matching, 101-point interpolated AP over the monotone
precision envelope, AP at a single IoU threshold and averaged over the ten
thresholds 0.50..0.95 in steps of 0.05, plus detection confusion matrices
with a background row/column.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .geometry import Box, iou

# i/100 (not i*0.01) so grid values equal the correctly-rounded rationals
# that cumulative tp/n_gt recalls also produce; boundary comparisons then
# behave identically everywhere
RECALL_GRID = [i / 100 for i in range(101)]
IOU_THRESHOLDS = [(50 + 5 * i) / 100 for i in range(10)]

BACKGROUND = "__background__"


class EvaluateError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: Box
    score: float
    class_name: str


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    box: Box
    class_name: str


@dataclass
class PRCurve:
    class_name: str
    iou_t: float
    points: list[tuple[float, float]]  # (recall, precision) in score order
    envelope: list[float]  # monotone nonincreasing, one per recall grid point

    def __post_init__(self) -> None:
        if len(self.envelope) != len(RECALL_GRID):
            raise EvaluateError("envelope must cover the 101-point recall grid")
        for a, b in zip(self.envelope, self.envelope[1:]):
            if b > a + 1e-12:
                raise EvaluateError("envelope must be monotone nonincreasing")


@dataclass
class APReport:
    per_class: dict[str, dict[float, float | None]]  # class -> iou_t -> AP
    ap50: float
    ap50_95: float
    class_count: int
    absent_classes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ap50": self.ap50,
            "ap50_95": self.ap50_95,
            "class_count": self.class_count,
            "absent_classes": list(self.absent_classes),
            "per_class": {
                cls: {f"{t:.2f}": ap for t, ap in sorted(by_t.items())}
                for cls, by_t in sorted(self.per_class.items())
            },
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_t: float,
    class_name: str,
) -> tuple[list[tuple[Detection, bool]], int]:
    """Greedy matching for one class across all images.

    Detections are visited in descending score order; each one matches the
    not-yet-matched ground truth of the same class and image with the
    highest IoU >= ``iou_t``. Returns per-detection (detection, is_tp)
    flags in that visit order plus the count of unmatched ground truths.
    """
    class_dets = sorted(
        (d for d in dets if d.class_name == class_name),
        key=lambda d: (-d.score, d.image_id, d.box.sort_key()),
    )
    gt_by_image: dict[str, list[GroundTruth]] = {}
    for gt in gts:
        if gt.class_name == class_name:
            gt_by_image.setdefault(gt.image_id, []).append(gt)
    matched: dict[str, set[int]] = {}
    flags: list[tuple[Detection, bool]] = []
    n_gt = sum(len(v) for v in gt_by_image.values())
    for det in class_dets:
        candidates = gt_by_image.get(det.image_id, [])
        used = matched.setdefault(det.image_id, set())
        best_iou = 0.0
        best_idx = -1
        for gi, gt in enumerate(candidates):
            if gi in used:
                continue
            overlap = iou(det.box, gt.box)
            if overlap >= iou_t and overlap > best_iou:
                best_iou = overlap
                best_idx = gi
        if best_idx >= 0:
            used.add(best_idx)
            flags.append((det, True))
        else:
            flags.append((det, False))
    fn = n_gt - sum(1 for _, tp in flags if tp)
    return flags, fn


def pr_curve(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_t: float,
    class_name: str,
) -> PRCurve | None:
    """PR points plus the interpolated envelope; None if the class has no GT."""
    n_gt = sum(1 for g in gts if g.class_name == class_name)
    if n_gt == 0:
        return None
    flags, _ = match_detections(dets, gts, iou_t, class_name)
    tp = 0
    fp = 0
    points: list[tuple[float, float]] = []
    for _, is_tp in flags:
        if is_tp:
            tp += 1
        else:
            fp += 1
        points.append((tp / n_gt, tp / (tp + fp)))
    envelope = _interpolated_envelope(points)
    return PRCurve(class_name, iou_t, points, envelope)


def _interpolated_envelope(points: Sequence[tuple[float, float]]) -> list[float]:
    """Precision ceiling over each recall grid point: p~(r) = max over r' >= r."""
    if not points:
        return [0.0] * len(RECALL_GRID)
    recalls = np.array([r for r, _ in points])
    precisions = np.array([p for _, p in points])
    # Precision at the i-th point, taking the running max from the right.
    ceil = np.maximum.accumulate(precisions[::-1])[::-1]
    grid = np.array(RECALL_GRID)
    # First point with recall >= grid value; past the last -> precision 0.
    idx = np.searchsorted(recalls, grid, side="left")
    out = np.zeros(len(grid))
    valid = idx < len(recalls)
    out[valid] = ceil[idx[valid]]
    return out.tolist()


def ap_at(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_t: float,
    class_name: str,
) -> float | None:
    """101-point interpolated AP for one class; None if the class has no GT."""
    curve = pr_curve(dets, gts, iou_t, class_name)
    if curve is None:
        return None
    return float(sum(curve.envelope) / len(curve.envelope))


def ap_summary(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_thresholds: Sequence[float] = tuple(IOU_THRESHOLDS),
) -> APReport:
    """Class means at each threshold, then the mean over the ten thresholds.

    Classes absent from the ground truth are excluded from the means and
    reported separately rather than scored zero.
    """
    if not gts:
        raise EvaluateError("cannot evaluate against empty ground truth")
    gt_classes = sorted({g.class_name for g in gts})
    det_only = sorted({d.class_name for d in dets} - set(gt_classes))
    per_class: dict[str, dict[float, float | None]] = {c: {} for c in gt_classes}
    means: dict[float, float] = {}
    for t in iou_thresholds:
        values = []
        for cls in gt_classes:
            ap = ap_at(dets, gts, t, cls)
            per_class[cls][t] = ap
            if ap is not None:
                values.append(ap)
        means[t] = sum(values) / len(values) if values else 0.0
    ap50 = means.get(0.5)
    if ap50 is None:
        ap50 = means[min(means)]
    ap50_95 = sum(means[t] for t in iou_thresholds) / len(iou_thresholds)
    return APReport(
        per_class=per_class,
        ap50=float(ap50),
        ap50_95=float(ap50_95),
        class_count=len(gt_classes),
        absent_classes=det_only,
    )


def confusion_matrix(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_t: float = 0.45,
    conf_t: float = 0.25,
    classes: Sequence[str] | None = None,
) -> tuple[list[str], list[list[int]]]:
    """(|C|+1) x (|C|+1) counts with a background row and column.

    Detections below ``conf_t`` are ignored. Matching is greedy by score
    and ignores class labels, so a detection matched to a ground truth of
    another class lands off-diagonal. Unmatched ground truths count
    against the background column, unmatched detections against the
    background row.
    """
    if not (0.0 < iou_t < 1.0) or not (0.0 < conf_t < 1.0):
        raise EvaluateError("confusion matrix thresholds must lie in (0, 1)")
    if classes is None:
        classes = sorted({g.class_name for g in gts} | {d.class_name for d in dets})
    labels = list(classes) + [BACKGROUND]
    index = {c: i for i, c in enumerate(labels)}
    matrix = [[0] * len(labels) for _ in labels]

    dets_by_image: dict[str, list[Detection]] = {}
    for det in dets:
        if det.score >= conf_t:
            dets_by_image.setdefault(det.image_id, []).append(det)
    gts_by_image: dict[str, list[GroundTruth]] = {}
    for gt in gts:
        gts_by_image.setdefault(gt.image_id, []).append(gt)

    for image_id in sorted(set(dets_by_image) | set(gts_by_image)):
        image_dets = sorted(
            dets_by_image.get(image_id, []),
            key=lambda d: (-d.score, d.box.sort_key()),
        )
        image_gts = gts_by_image.get(image_id, [])
        used: set[int] = set()
        for det in image_dets:
            best_iou = 0.0
            best_idx = -1
            for gi, gt in enumerate(image_gts):
                if gi in used:
                    continue
                overlap = iou(det.box, gt.box)
                if overlap >= iou_t and overlap > best_iou:
                    best_iou = overlap
                    best_idx = gi
            if best_idx >= 0:
                used.add(best_idx)
                matrix[index[image_gts[best_idx].class_name]][index[det.class_name]] += 1
            else:
                matrix[index[BACKGROUND]][index[det.class_name]] += 1
        for gi, gt in enumerate(image_gts):
            if gi not in used:
                matrix[index[gt.class_name]][index[BACKGROUND]] += 1
    return labels, matrix


def format_report(report: APReport) -> str:
    """Aligned text table: one row per class plus the overall means."""
    header = ["class"] + [f"AP@{t:.2f}" for t in IOU_THRESHOLDS]
    rows = [header]
    for cls in sorted(report.per_class):
        row = [cls]
        for t in IOU_THRESHOLDS:
            ap = report.per_class[cls].get(t)
            row.append("-" if ap is None else f"{ap:.4f}")
        rows.append(row)
    rows.append([])
    summary = [
        ["AP50", f"{report.ap50:.4f}"],
        ["AP50-95", f"{report.ap50_95:.4f}"],
        ["classes", str(report.class_count)],
    ]
    widths = [max(len(r[i]) for r in rows[:-1] if r) for i in range(len(header))]
    lines = []
    for row in rows:
        if not row:
            lines.append("")
            continue
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
    for key, value in summary:
        lines.append(f"{key}: {value}")
    return "\n".join(lines) + "\n"


def detections_from_records(records: Sequence[Mapping]) -> list[Detection]:
    """Adapt annotation-store rows (dict form) to detections."""
    out = []
    for rec in records:
        out.append(
            Detection(
                image_id=rec["image_id"],
                box=Box(
                    float(rec["x1"]), float(rec["y1"]),
                    float(rec["x2"]), float(rec["y2"]),
                ),
                score=float(rec.get("score", 1.0)),
                class_name=rec["class"],
            )
        )
    return out


def ground_truth_from_records(records: Sequence[Mapping]) -> list[GroundTruth]:
    out = []
    for rec in records:
        out.append(
            GroundTruth(
                image_id=rec["image_id"],
                box=Box(
                    float(rec["x1"]), float(rec["y1"]),
                    float(rec["x2"]), float(rec["y2"]),
                ),
                class_name=rec["class"],
            )
        )
    return out


def ground_truth_from_coco(doc: Mapping) -> list[GroundTruth]:
    """Adapt a COCO detection document (xywh boxes, category ids) to
    ground truths keyed by the COCO file_name stem."""
    categories = {c["id"]: c["name"] for c in doc.get("categories", [])}
    images = {i["id"]: Path(i["file_name"]).stem for i in doc.get("images", [])}
    out = []
    for ann in doc.get("annotations", []):
        x, y, w, h = ann["bbox"]
        out.append(
            GroundTruth(
                image_id=images[ann["image_id"]],
                box=Box(float(x), float(y), float(x) + float(w), float(y) + float(h)),
                class_name=categories[ann["category_id"]],
            )
        )
    return out
