"""Detection metrics: greedy TP/FP labelling, envelope average precision,
recall at a proposal budget and boxes per image at a precision target."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from .geometry import Detection, as_box_array, jaccard_matrix, sort_detections


class UnattainablePrecisionError(ValueError):
    pass


def match_detections_to_gt(dets, gts, iou_threshold: float = 0.5, wrap: bool = True) -> list[bool]:
    """TP/FP label per detection.

    ``dets`` must already be in descending score order.  Each detection
    claims the unclaimed ground-truth box it overlaps most, provided the
    overlap reaches ``iou_threshold``.
    """
    dets = list(dets)
    g = as_box_array(gts)
    if not dets:
        return []
    if len(g) == 0:
        return [False] * len(dets)
    ov = jaccard_matrix(as_box_array([d.box for d in dets]), g, wrap=wrap)
    claimed = np.zeros(len(g), dtype=bool)
    labels = []
    for k in range(len(dets)):
        row = np.where(claimed, -1.0, ov[k])
        j = int(np.argmax(row))
        if row[j] >= iou_threshold:
            claimed[j] = True
            labels.append(True)
        else:
            labels.append(False)
    return labels


def pr_curve(labels, num_gts: int) -> tuple[np.ndarray, np.ndarray]:
    """Precision and recall after each detection in score order."""
    lab = np.asarray(labels, dtype=bool)
    tp = np.cumsum(lab)
    fp = np.cumsum(~lab)
    precision = tp / np.maximum(tp + fp, 1)
    recall = tp / num_gts if num_gts else np.zeros(len(lab))
    return precision, recall


def average_precision(labels, num_gts: int) -> float:
    """Area under the precision envelope of the step PR curve.

    ``labels`` are TP/FP flags in descending score order.
    """
    labels = list(labels)
    if num_gts == 0:
        return 1.0 if not labels else 0.0
    if not labels:
        return 0.0
    precision, _ = pr_curve(labels, num_gts)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # recall steps by 1/num_gts at each true positive; fsum keeps the sum order-free
    return math.fsum(envelope[np.asarray(labels, dtype=bool)].tolist()) / num_gts


class OperatingPoint(NamedTuple):
    precision: float
    boxes_per_image: float
    score_threshold: float


def boxes_per_image_at_precision(labels, scores, images: int, target_precision: float) -> OperatingPoint:
    """Lowest score threshold whose precision reaches ``target_precision``
    and the number of kept boxes per image there."""
    lab = np.asarray(labels, dtype=bool)
    sc = np.asarray(scores, dtype=np.float64)
    if images <= 0:
        raise ValueError("images must be positive")
    if len(lab) == 0:
        raise UnattainablePrecisionError("no detections")
    tp = np.cumsum(lab)
    kept = np.arange(1, len(lab) + 1)
    best = None
    for k in range(len(lab)):
        # only cut between distinct scores
        if k + 1 < len(lab) and sc[k + 1] == sc[k]:
            continue
        prec = tp[k] / kept[k]
        if prec >= target_precision - 1e-12:
            best = OperatingPoint(float(prec), float(kept[k] / images), float(sc[k]))
    if best is None:
        raise UnattainablePrecisionError(f"precision never reaches {target_precision}")
    return best


def recall_at_budget(proposals: Mapping[str, list], gts: Mapping[str, list], budget: int,
                     iou: float = 0.5) -> float:
    """Fraction of ground-truth boxes hit by one of the top ``budget``
    proposals of their image."""
    total = sum(len(as_box_array(g)) for g in gts.values())
    if total == 0:
        return 0.0
    if budget <= 0:
        return 0.0
    covered = 0
    for image_id, g in gts.items():
        g = as_box_array(g)
        if len(g) == 0:
            continue
        top = sort_detections(proposals.get(image_id, []))[:budget]
        if not top:
            continue
        ov = jaccard_matrix(g, as_box_array([d.box for d in top]), wrap=True)
        covered += int(np.sum(ov.max(axis=1) >= iou))
    return covered / total


@dataclass
class EvalReport:
    pr_points: list[tuple[float, float, float]]
    average_precision: float
    recall_at_budget: dict[int, float] = field(default_factory=dict)
    boxes_per_image_at_precision: dict[float, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "average_precision": self.average_precision,
            "counts": self.counts,
            "recall_at_budget": {str(k): v for k, v in self.recall_at_budget.items()},
            "boxes_per_image_at_precision": {str(k): v for k, v in self.boxes_per_image_at_precision.items()},
            "pr_points": [list(p) for p in self.pr_points],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    def write_pr_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "precision", "recall"])
            for p, r, t in self.pr_points:
                w.writerow([f"{t:.9f}", f"{p:.9f}", f"{r:.9f}"])


def label_all(dets_by_image: Mapping[str, list], gts_by_image: Mapping[str, list],
              iou_threshold: float = 0.5) -> tuple[list[Detection], list[bool]]:
    """Label every image's detections, then pool them in global score order."""
    pooled = []
    for image_id in sorted(set(dets_by_image) | set(gts_by_image)):
        dets = sort_detections(dets_by_image.get(image_id, []))
        labels = match_detections_to_gt(dets, gts_by_image.get(image_id, []), iou_threshold)
        pooled.extend((d, lab, image_id) for d, lab in zip(dets, labels))
    pooled.sort(key=lambda t: (-t[0].final_score, t[0].box.as_tuple(), t[2]))
    return [p[0] for p in pooled], [p[1] for p in pooled]


def evaluate(dets_by_image: Mapping[str, list], gts_by_image: Mapping[str, list], iou_threshold: float = 0.5,
             budgets=(), precisions=()) -> EvalReport:
    dets, labels = label_all(dets_by_image, gts_by_image, iou_threshold)
    num_gts = sum(len(as_box_array(g)) for g in gts_by_image.values())
    images = len(set(dets_by_image) | set(gts_by_image))
    precision, recall = pr_curve(labels, num_gts)
    pr_points = [(float(p), float(r), d.final_score) for p, r, d in zip(precision, recall, dets)]
    tp = int(sum(labels))
    report = EvalReport(
        pr_points=pr_points,
        average_precision=average_precision(labels, num_gts),
        counts={"true_positives": tp, "false_positives": len(labels) - tp,
                "false_negatives": num_gts - tp, "images": images},
    )
    for b in budgets:
        report.recall_at_budget[int(b)] = recall_at_budget(dets_by_image, gts_by_image, int(b), iou_threshold)
    for target in precisions:
        try:
            op = boxes_per_image_at_precision(labels, [d.final_score for d in dets], max(images, 1), target)
            report.boxes_per_image_at_precision[float(target)] = op.boxes_per_image
        except UnattainablePrecisionError:
            report.boxes_per_image_at_precision[float(target)] = None
    return report
