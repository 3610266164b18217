"""Average precision and a simplified error breakdown.

AP is the area under the all-point interpolated precision/recall curve.
The area is accumulated as an exact rational and only converted to float at
the end, so the result does not depend on summation order.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Optional, Sequence

import numpy as np

from .config import EvalConfig
from .geometry import Box, as_box_array, iou, nms

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class Detection:
    scene_id: int
    box: Box
    class_id: int
    score: float

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "box": self.box.as_list(),
            "class": self.class_id,
            "score": self.score,
        }


@dataclass
class MetricsReport:
    ap50: Optional[float]
    map: Optional[float]
    per_class_ap: dict = field(default_factory=dict)
    per_class_ap50: dict = field(default_factory=dict)
    counts: dict = field(default_factory=lambda: {"tp": 0, "fp": 0, "fn": 0, "loc_err": 0})
    num_detections: int = 0
    num_gts: int = 0

    def to_dict(self) -> dict:
        return {
            "AP50": self.ap50,
            "mAP": self.map,
            "per_class_AP": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "per_class_AP50": {str(k): v for k, v in sorted(self.per_class_ap50.items())},
            "counts": dict(self.counts),
            "num_detections": self.num_detections,
            "num_gts": self.num_gts,
        }


def _gt_index(gts) -> dict:
    """Normalise ground truth to ``{scene_id: [box_array, ...]}``."""
    out = defaultdict(list)
    items = gts.items() if isinstance(gts, Mapping) else None
    if items is not None:
        for sid, boxes in items:
            for b in boxes:
                out[sid].append(as_box_array(b)[0])
    else:
        for sid, b in gts:
            out[sid].append(as_box_array(b)[0])
    return out


def _det_tuple(d) -> tuple:
    if isinstance(d, Detection):
        return d.scene_id, d.box, d.score
    sid, box, score = d
    return sid, box, float(score)


def match_detections(dets: Sequence, gts, iou_threshold: float) -> tuple[list, list, int]:
    """Greedy matching in descending score.

    Returns ``(order, is_tp, n_gts)`` where ``order`` lists detection indices
    by descending score (ties by index).
    """
    gt_by_scene = _gt_index(gts)
    n_gts = sum(len(v) for v in gt_by_scene.values())
    dl = [_det_tuple(d) for d in dets]
    order = sorted(range(len(dl)), key=lambda i: (-dl[i][2], i))
    used = {sid: [False] * len(v) for sid, v in gt_by_scene.items()}
    is_tp = []
    for i in order:
        sid, box, _ = dl[i]
        best_j, best_iou = -1, -1.0
        for j, g in enumerate(gt_by_scene.get(sid, ())):
            if used[sid][j]:
                continue
            v = iou(box, g)
            if v >= iou_threshold and v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0:
            used[sid][best_j] = True
        is_tp.append(best_j >= 0)
    return order, is_tp, n_gts


def average_precision(dets: Sequence, gts, iou_threshold: float = 0.5) -> Optional[float]:
    """All-point interpolated AP for one class.

    Args:
        dets: ``Detection`` objects or ``(scene_id, box, score)`` tuples.
        gts: ``{scene_id: [box, ...]}`` or ``[(scene_id, box), ...]``.

    Returns:
        AP in ``[0, 1]``; ``None`` (class skipped) when there are neither
        ground truths nor detections; 0 when only detections exist.
    """
    _, is_tp, n_gts = match_detections(dets, gts, iou_threshold)
    if n_gts == 0:
        return None if not is_tp else 0.0
    precisions = []
    tp = 0
    for k, hit in enumerate(is_tp, 1):
        tp += hit
        precisions.append(Fraction(tp, k))
    area = Fraction(0)
    envelope = Fraction(0)
    for k in range(len(is_tp) - 1, -1, -1):
        envelope = max(envelope, precisions[k])
        if is_tp[k]:
            area += envelope
    return float(area / n_gts)


def error_breakdown(
    dets: Sequence[Detection],
    gts: Sequence[tuple],
    fg_threshold: float = 0.5,
    bg_threshold: float = 0.1,
) -> dict:
    """Count true positives, false positives, localization errors and misses.

    Args:
        dets: detections of any class.
        gts: ``(scene_id, class_id, box)`` triples.

    An unmatched detection is a localization error when its best IoU with a
    same-class ground truth lies in ``[bg_threshold, fg_threshold)``,
    otherwise a false positive.
    """
    counts = {"tp": 0, "fp": 0, "fn": 0, "loc_err": 0}
    classes = {d.class_id for d in dets} | {c for _, c, _ in gts}
    for cls in sorted(classes):
        cdets = [d for d in dets if d.class_id == cls]
        cgts = [(sid, box) for sid, c, box in gts if c == cls]
        order, is_tp, n_gts = match_detections(cdets, cgts, fg_threshold)
        by_scene = _gt_index(cgts)
        n_tp = sum(is_tp)
        counts["tp"] += n_tp
        counts["fn"] += n_gts - n_tp
        for i, hit in zip(order, is_tp):
            if hit:
                continue
            d = cdets[i]
            best = max((iou(d.box, g) for g in by_scene.get(d.scene_id, ())), default=0.0)
            if bg_threshold <= best < fg_threshold:
                counts["loc_err"] += 1
            else:
                counts["fp"] += 1
    return counts


def detections_from_output(
    scene_id: int,
    scored: np.ndarray,
    boxes: np.ndarray,
    cfg: EvalConfig,
    iou_pred: Optional[np.ndarray] = None,
) -> list[Detection]:
    """Turn per-anchor scores into detections: score floor, class-wise NMS, top-k."""
    scores_all = scored
    if iou_pred is not None:
        scores_all = np.sqrt(scored * iou_pred[:, None])
    labels = scores_all.argmax(axis=1)
    scores = scores_all[np.arange(len(labels)), labels]
    keep = np.flatnonzero(scores >= cfg.score_floor)
    out = []
    for cls in np.unique(labels[keep]):
        idx = keep[labels[keep] == cls]
        kept = nms(boxes[idx], scores[idx], cfg.nms_iou)
        for k in kept:
            i = idx[k]
            b = boxes[i]
            out.append(Detection(scene_id, Box(*(float(v) for v in b)), int(cls), float(scores[i])))
    out.sort(key=lambda d: (-d.score, d.class_id))
    return out[: cfg.max_dets]


def evaluate_detections(dets: Sequence[Detection], scenes: Sequence, num_classes: int) -> MetricsReport:
    """COCO-style AP50/mAP plus error counts for detections over ``scenes``."""
    gts_all = [(s.id, o.class_id, o.box) for s in scenes for o in s.objects]
    per_class_ap, per_class_ap50 = {}, {}
    per_threshold = {t: [] for t in IOU_THRESHOLDS}
    for cls in range(num_classes):
        cdets = [d for d in dets if d.class_id == cls]
        cgts = [(sid, box) for sid, c, box in gts_all if c == cls]
        aps = []
        for t in IOU_THRESHOLDS:
            ap = average_precision(cdets, cgts, t)
            if ap is None:
                break
            aps.append(ap)
            per_threshold[t].append(ap)
        if aps:
            per_class_ap50[cls] = aps[0]
            per_class_ap[cls] = float(np.mean(aps))
    if per_threshold[0.5]:
        ap50 = float(np.mean(per_threshold[0.5]))
        mean_ap = float(np.mean([np.mean(per_threshold[t]) for t in IOU_THRESHOLDS]))
    else:
        ap50 = mean_ap = None
    return MetricsReport(
        ap50=ap50,
        map=mean_ap,
        per_class_ap=per_class_ap,
        per_class_ap50=per_class_ap50,
        counts=error_breakdown(dets, gts_all),
        num_detections=len(dets),
        num_gts=len(gts_all),
    )
