"""Box geometry, Gaussian soft-NMS and the regression parameterization.

Boxes are ``(x1, y1, x2, y2)`` in continuous coordinates (no +1 pixel
convention).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from finedet.errors import ValidationError

SOFT_NMS_SIGMA = 0.55
SCORE_FLOOR = 1e-3
DELTA_SCALE = np.array([0.1, 0.1, 0.2, 0.2])


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    label: str
    score: float

    def __post_init__(self):
        box = tuple(float(v) for v in self.box)
        if len(box) != 4 or not all(math.isfinite(v) for v in box):
            raise ValidationError(f"bad detection box {self.box}")
        if not (0.0 <= self.score <= 1.0):
            raise ValidationError(f"detection score {self.score} outside [0, 1]")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "score", float(self.score))


def iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def pairwise_iou(a, b) -> np.ndarray:
    """IoU matrix, shape ``(len(a), len(b))``; same arithmetic as :func:`iou`."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    hit = (iw > 0) & (ih > 0)
    inter = np.where(hit, iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(hit, inter / np.where(hit, union, 1.0), 0.0)


def soft_nms(dets, sigma: float = SOFT_NMS_SIGMA, score_floor: float = SCORE_FLOOR) -> list[Detection]:
    """Per-class Gaussian soft-NMS.

    The highest remaining score is kept (ties: lowest input index), every
    other remaining score is multiplied by ``exp(-iou^2 / sigma)`` and
    anything below ``score_floor`` is dropped. Output is grouped by label in
    sorted label order, each group in selection order.
    """
    if not sigma > 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    dets = list(dets)
    groups: dict[str, list[int]] = {}
    for i, d in enumerate(dets):
        groups.setdefault(d.label, []).append(i)
    out = []
    for label in sorted(groups):
        idx = groups[label]
        overlap = pairwise_iou([dets[i].box for i in idx], [dets[i].box for i in idx]).tolist()
        scores = [dets[i].score for i in idx]
        remaining = [j for j in range(len(idx)) if scores[j] >= score_floor]
        while remaining:
            best = remaining[0]
            for j in remaining[1:]:
                if scores[j] > scores[best]:
                    best = j
            out.append(Detection(dets[idx[best]].box, label, scores[best]))
            row = overlap[best]
            survivors = []
            for j in remaining:
                if j == best:
                    continue
                o = row[j]
                scores[j] = scores[j] * math.exp(-(o * o) / sigma)
                if scores[j] >= score_floor:
                    survivors.append(j)
            remaining = survivors
    return out


def box_deltas(src, dst) -> np.ndarray:
    """Normalized ``(dx, dy, dw, dh)`` moving ``src`` boxes onto ``dst``."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 4)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 4)
    sw, sh = src[:, 2] - src[:, 0], src[:, 3] - src[:, 1]
    dw, dh = dst[:, 2] - dst[:, 0], dst[:, 3] - dst[:, 1]
    sx, sy = src[:, 0] + 0.5 * sw, src[:, 1] + 0.5 * sh
    dx, dy = dst[:, 0] + 0.5 * dw, dst[:, 1] + 0.5 * dh
    raw = np.stack([(dx - sx) / sw, (dy - sy) / sh, np.log(dw / sw), np.log(dh / sh)], axis=1)
    return raw / DELTA_SCALE


def apply_deltas(src, deltas, extent=None) -> np.ndarray:
    src = np.asarray(src, dtype=np.float64).reshape(-1, 4)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4) * DELTA_SCALE
    sw, sh = src[:, 2] - src[:, 0], src[:, 3] - src[:, 1]
    cx = src[:, 0] + 0.5 * sw + d[:, 0] * sw
    cy = src[:, 1] + 0.5 * sh + d[:, 1] * sh
    w = sw * np.exp(np.clip(d[:, 2], -4, 4))
    h = sh * np.exp(np.clip(d[:, 3], -4, 4))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if extent is not None:
        out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0, extent[0])
        out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0, extent[1])
    return out
