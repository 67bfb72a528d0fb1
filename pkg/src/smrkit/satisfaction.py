"""Per-machine satisfaction scores.

Classification: binary top-K agreement with the machine's own prediction on
the original image. Detection: mAP of the compressed-image detections
evaluated against confidence-filtered detections on the original image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .records import CLASSIFICATION, DETECTION, ClassificationPrediction, Detection

# thresholds are treated as decimals; this absorbs float rounding of e.g. 0.55
IOU_EPS = 1e-9

COCO_IOU_GRID = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
DEFAULT_CONF_THRESHOLD = 0.3


@dataclass(frozen=True)
class SatisfactionScore:
    value: float
    task: str
    vacuous: bool = False
    # detection only: categories predicted on the compressed image but absent from pseudo-GT
    ignored_categories: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"satisfaction score {self.value} outside [0, 1]")
        if self.task == CLASSIFICATION and self.value not in (0.0, 1.0):
            raise ValueError("classification scores must be 0 or 1")


@dataclass(frozen=True)
class DetectionScoringConfig:
    iou_thresholds: tuple[float, ...] = COCO_IOU_GRID
    conf_threshold: float = DEFAULT_CONF_THRESHOLD

    def __post_init__(self):
        grid = tuple(float(t) for t in self.iou_thresholds)
        object.__setattr__(self, "iou_thresholds", grid)
        if not grid:
            raise ValueError("IOU threshold grid is empty")
        if any(not 0.0 < t <= 1.0 for t in grid):
            raise ValueError(f"IOU thresholds must lie in (0, 1], got {grid}")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError(f"IOU thresholds must be strictly increasing, got {grid}")
        if not 0.0 < self.conf_threshold <= 1.0:
            raise ValueError(f"confidence threshold must lie in (0, 1], got {self.conf_threshold}")


def score_classification(
    compressed: ClassificationPrediction, original: ClassificationPrediction, k: int
) -> SatisfactionScore:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > len(original.ranked_categories):
        raise ValueError(
            f"k={k} exceeds the ranking depth ({len(original.ranked_categories)}) of the original prediction"
        )
    hit = compressed.top1 in original.topk(k)
    return SatisfactionScore(1.0 if hit else 0.0, CLASSIFICATION)


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two (x, y, w, h) boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return min(1.0, inter / union)


@dataclass(frozen=True)
class GroundTruthBox:
    bbox: tuple[float, float, float, float]
    category: int


def filter_pseudo_gt(original_dets: Sequence[Detection], conf_threshold: float) -> list[GroundTruthBox]:
    if not 0.0 < conf_threshold <= 1.0:
        raise ValueError(f"confidence threshold must lie in (0, 1], got {conf_threshold}")
    return [GroundTruthBox(d.bbox, d.category) for d in original_dets if d.confidence > conf_threshold]


def _as_gt(gt) -> list[GroundTruthBox]:
    return [g if isinstance(g, GroundTruthBox) else GroundTruthBox(g.bbox, g.category) for g in gt]


def match_detections(dets: Sequence[Detection], gt: Sequence[GroundTruthBox], iou_threshold: float) -> list[bool]:
    """Greedy matching within one category; returns TP flags in confidence order.

    Detections are visited by descending confidence (stable for ties). Each
    takes the unmatched GT with the highest IOU at or above the threshold,
    lowest GT index on ties.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    matched = [False] * len(gt)
    flags = []
    for i in order:
        best, best_iou = -1, -1.0
        for j, g in enumerate(gt):
            if matched[j]:
                continue
            v = iou(dets[i].bbox, g.bbox)
            if v >= iou_threshold - IOU_EPS and v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            matched[best] = True
        flags.append(best >= 0)
    return flags


def ap_from_flags(tp_flags: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated AP from ranked TP flags."""
    if n_gt == 0:
        raise ValueError("AP is undefined without ground truth")
    if not len(tp_flags):
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=float))
    fp = np.cumsum(1.0 - np.asarray(tp_flags, dtype=float))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    # precision envelope, non-increasing from the right
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def category_average_precision(
    dets: Sequence[Detection], gt: Sequence, iou_threshold: float
) -> dict[int, float]:
    """AP for every category that has ground truth."""
    gt = _as_gt(gt)
    out = {}
    for cat in sorted({g.category for g in gt}):
        cat_gt = [g for g in gt if g.category == cat]
        cat_dets = [d for d in dets if d.category == cat]
        out[cat] = ap_from_flags(match_detections(cat_dets, cat_gt, iou_threshold), len(cat_gt))
    return out


def average_precision(dets: Sequence[Detection], gt: Sequence, iou_threshold: float) -> float:
    """Category-mean AP at one IOU threshold.

    Categories without ground truth are left out of the mean. Returns 0.0
    when ``gt`` is empty.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"IOU threshold must lie in (0, 1], got {iou_threshold}")
    per_cat = category_average_precision(dets, gt, iou_threshold)
    if not per_cat:
        return 0.0
    return float(np.mean(list(per_cat.values())))


def score_detection(
    compressed_dets: Sequence[Detection],
    original_dets: Sequence[Detection],
    config: DetectionScoringConfig = DetectionScoringConfig(),
) -> SatisfactionScore:
    gt = filter_pseudo_gt(original_dets, config.conf_threshold)
    if not gt:
        return SatisfactionScore(1.0, DETECTION, vacuous=True)
    gt_cats = {g.category for g in gt}
    ignored = tuple(sorted({d.category for d in compressed_dets} - gt_cats))
    value = float(np.mean([average_precision(compressed_dets, gt, t) for t in config.iou_thresholds]))
    return SatisfactionScore(min(1.0, max(0.0, value)), DETECTION, ignored_categories=ignored)
