"""Average precision, mAP over IoU thresholds, and CorLoc."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from finedet.harness.boxes import pairwise_iou

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def average_precision(recall, precision, all_points: bool = True) -> float:
    """Area under the interpolated precision-recall curve.

    ``all_points=False`` gives the 11-point VOC07 variant.
    """
    recall = np.asarray(recall, dtype=np.float64)
    precision = np.asarray(precision, dtype=np.float64)
    if not all_points:
        ap = 0.0
        for t in np.linspace(0, 1, 11):
            p = precision[recall >= t]
            ap += (p.max() if p.size else 0.0) / 11.0
        return float(ap)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    step = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def _class_pr(dets, gts, label, threshold):
    """dets: per image list of Detection; gts: per image list of (box, label)."""
    gt_boxes = {}
    n_gt = 0
    for img, objs in enumerate(gts):
        boxes = [b for b, lab in objs if lab == label]
        if boxes:
            gt_boxes[img] = np.asarray(boxes, dtype=np.float64)
            n_gt += len(boxes)
    cand = [(d.score, img, d.box) for img, ds in enumerate(dets) for d in ds if d.label == label]
    # order-invariant sort: score desc, then image, then box coordinates
    cand.sort(key=lambda t: (-t[0], t[1], t[2]))
    matched = {img: np.zeros(len(b), dtype=bool) for img, b in gt_boxes.items()}
    tp = np.zeros(len(cand))
    for k, (_, img, box) in enumerate(cand):
        if img not in gt_boxes:
            continue
        ov = pairwise_iou([box], gt_boxes[img])[0]
        ov = np.where(matched[img], -1.0, ov)
        j = int(np.argmax(ov))
        if ov[j] >= threshold:
            matched[img][j] = True
            tp[k] = 1.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt if n_gt else ctp
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).tiny)
    return recall, precision, n_gt


@dataclass
class MapResult:
    per_class: dict[float, dict[str, float]] = field(default_factory=dict)

    def mean(self, threshold: float) -> float:
        aps = list(self.per_class[threshold].values())
        return float(np.mean(aps)) if aps else 0.0

    @property
    def map50(self) -> float:
        return self.mean(0.5)

    @property
    def map50_95(self) -> float:
        ts = [t for t in COCO_THRESHOLDS if t in self.per_class]
        return float(np.mean([self.mean(t) for t in ts])) if ts else 0.0


def evaluate_map(dets_per_image, gts_per_image, thresholds=(0.5,), all_points: bool = True,
                 labels=None) -> MapResult:
    """Per-class AP at each IoU threshold.

    Only classes with at least one ground-truth box are scored. Detections
    are matched greedily in score order to the unmatched ground truth of
    highest IoU.
    """
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truth cover different image counts")
    present = sorted({lab for objs in gts_per_image for _, lab in objs})
    if labels is not None:
        present = [lab for lab in labels if lab in set(present)]
    res = MapResult()
    for t in thresholds:
        res.per_class[t] = {}
        for label in present:
            rec, prec, _ = _class_pr(dets_per_image, gts_per_image, label, t)
            res.per_class[t][label] = average_precision(rec, prec, all_points)
    return res


def corloc(top_boxes, gts_per_image, threshold: float = 0.5) -> float:
    """Share of (image, present label) pairs localized by their top box.

    ``top_boxes`` maps ``(image_index, label)`` to the highest-scoring box for
    that pair; missing pairs count as failures.
    """
    hits = total = 0
    for img, objs in enumerate(gts_per_image):
        for label in sorted({lab for _, lab in objs}):
            total += 1
            box = top_boxes.get((img, label))
            if box is None:
                continue
            gt = [b for b, lab in objs if lab == label]
            if pairwise_iou([box], gt).max() >= threshold:
                hits += 1
    return hits / total if total else 0.0
