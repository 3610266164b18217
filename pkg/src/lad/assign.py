"""Candidate selection, assignment costs, and GMM-based label assignment.

``paa_assign`` labels anchors from a network's own predictions; ``lad_assign``
runs the identical pipeline on a teacher's predictions. Nothing else differs.

Two rules turn a fitted cost mixture into positives:

``"below_mean"`` (default)
    cost strictly below the low component's mean.
``"posterior"``
    the candidate is more likely under the low component than the high one.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .geometry import AnchorGrid, Box, aligned_iou, as_box_array, pairwise_iou
from .gmm import FitReport, fit_gmm2, posterior_split
from .losses import focal_terms

NEGATIVE = -1
CANDIDATE_IOU = 0.1
POSITIVE_RULES = ("below_mean", "posterior")


class EmptyCandidateWarning(UserWarning):
    """An object overlaps no anchor at the candidate IoU and gets no positives."""


@dataclass(frozen=True)
class LabeledObject:
    class_id: int
    box: Box

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError("class_id must be non-negative")
        if not self.box.area > 0:
            raise ValueError(f"object box must have positive area: {self.box}")


@dataclass(frozen=True)
class Prediction:
    anchor_id: int
    probs: np.ndarray
    box: Box


@dataclass(frozen=True, eq=False)
class Predictions:
    """Per-anchor predictions stored column-wise.

    ``probs`` is ``(N, C)`` post-sigmoid, ``boxes`` is ``(N, 4)``; row ``i``
    belongs to anchor id ``i``.
    """

    probs: np.ndarray
    boxes: np.ndarray

    def __post_init__(self):
        if self.probs.ndim != 2 or self.boxes.shape != (len(self.probs), 4):
            raise ValueError(
                f"inconsistent prediction shapes {self.probs.shape} / {self.boxes.shape}"
            )

    def __len__(self) -> int:
        return len(self.probs)

    def __getitem__(self, i: int) -> Prediction:
        return Prediction(i, self.probs[i], Box.from_array(self.boxes[i]))

    @classmethod
    def from_list(cls, preds: Sequence[Prediction]) -> "Predictions":
        preds = sorted(preds, key=lambda p: p.anchor_id)
        if [p.anchor_id for p in preds] != list(range(len(preds))):
            raise ValueError("need exactly one prediction per anchor id 0..N-1")
        return cls(
            np.array([np.asarray(p.probs, dtype=float) for p in preds]),
            np.array([p.box.as_list() for p in preds], dtype=float),
        )


@dataclass(frozen=True, eq=False)
class Assignment:
    """``labels[i]`` is the positive object index of anchor ``i`` or ``NEGATIVE``."""

    labels: np.ndarray

    @property
    def positive_ids(self) -> np.ndarray:
        return np.flatnonzero(self.labels != NEGATIVE)

    def positives_of(self, object_index: int) -> np.ndarray:
        return np.flatnonzero(self.labels == object_index)

    def __eq__(self, other) -> bool:
        return isinstance(other, Assignment) and np.array_equal(self.labels, other.labels)


@dataclass(frozen=True, eq=False)
class ObjectCosts:
    object_index: int
    anchor_ids: np.ndarray
    costs: np.ndarray

    def to_dict(self) -> dict:
        return {
            "object": self.object_index,
            "anchor_ids": self.anchor_ids.tolist(),
            "costs": self.costs.tolist(),
        }


CostTable = list  # list[ObjectCosts], one entry per object in object order


class AssignResult(NamedTuple):
    assignment: Assignment
    cost_table: list
    fits: list  # per object: FitReport, or None when the object has no candidates


def _object_arrays(objects: Sequence[LabeledObject]) -> tuple[np.ndarray, np.ndarray]:
    if not objects:
        return np.zeros((0, 4)), np.zeros(0, dtype=int)
    return (
        np.array([o.box.as_list() for o in objects], dtype=float),
        np.array([o.class_id for o in objects], dtype=int),
    )


def candidate_select(anchors: AnchorGrid, obj: LabeledObject) -> np.ndarray:
    """Anchor ids whose box has IoU >= 0.1 with the object, in id order."""
    ious = pairwise_iou(anchors.boxes, obj.box)[:, 0]
    return np.flatnonzero(ious >= CANDIDATE_IOU)


def candidate_costs(
    probs: np.ndarray, boxes: np.ndarray, anchor_ids: np.ndarray, obj_box, class_id: int, gamma: float
) -> np.ndarray:
    """Vectorized assignment cost for a set of candidate anchors."""
    p = probs[anchor_ids]
    target = np.zeros_like(p)
    target[:, class_id] = 1.0
    fl, _ = focal_terms(p, target, gamma)
    gt = np.broadcast_to(np.asarray(obj_box, dtype=float), (len(anchor_ids), 4))
    return fl.sum(axis=1) + (1.0 - aligned_iou(boxes[anchor_ids], gt))


def assignment_cost(pred: Prediction, obj: LabeledObject, gamma: float = 2.0) -> float:
    """Focal loss against the one-hot object class plus ``1 - IoU`` with its box."""
    probs = np.asarray(pred.probs, dtype=float)[None, :]
    if obj.class_id >= probs.shape[1]:
        raise ValueError("object class outside the prediction's class range")
    box = pred.box.as_array()[None, :]
    return float(candidate_costs(probs, box, np.array([0]), obj.box.as_list(), obj.class_id, gamma)[0])


def select_positives(costs: np.ndarray, fit: FitReport, rule: str = "below_mean") -> np.ndarray:
    """Boolean mask of positive candidates given the fitted cost mixture.

    A single candidate is always positive; all-equal costs make every
    candidate positive.
    """
    costs = np.asarray(costs, dtype=float)
    if fit.degenerate:
        return np.ones(costs.shape, dtype=bool)
    if rule == "below_mean":
        return costs < fit.model.mu1
    if rule == "posterior":
        return posterior_split(costs, fit.model)
    raise ValueError(f"unknown positive rule {rule!r}; expected one of {POSITIVE_RULES}")


def resolve_conflicts(
    n_anchors: int, cost_table: list, masks: list[np.ndarray]
) -> Assignment:
    """Give each anchor to the lowest-cost object that marked it positive.

    Ties go to the lower object index.
    """
    labels = np.full(n_anchors, NEGATIVE, dtype=int)
    best = np.full(n_anchors, np.inf)
    for entry, mask in zip(cost_table, masks):
        ids = entry.anchor_ids[mask]
        c = entry.costs[mask]
        better = c < best[ids]
        labels[ids[better]] = entry.object_index
        best[ids[better]] = c[better]
    return Assignment(labels)


def score_objects(
    preds: Predictions,
    anchors: AnchorGrid,
    objects: Sequence[LabeledObject],
    gamma: float = 2.0,
    anchor_ious: Optional[np.ndarray] = None,
) -> tuple[list, list]:
    """Cost + GMM stage: per-object candidate costs and mixture fits.

    ``anchor_ious`` may pass a precomputed ``(N, M)`` anchor/object IoU matrix.
    """
    if len(preds) != len(anchors):
        raise ValueError(f"{len(preds)} predictions for {len(anchors)} anchors")
    gt_boxes, classes = _object_arrays(objects)
    if len(objects) and classes.max() >= preds.probs.shape[1]:
        raise ValueError("object class outside the prediction's class range")
    if anchor_ious is None:
        anchor_ious = pairwise_iou(anchors.boxes, gt_boxes)
    table, fits = [], []
    for j in range(len(objects)):
        ids = np.flatnonzero(anchor_ious[:, j] >= CANDIDATE_IOU)
        if len(ids) == 0:
            warnings.warn(
                f"object {j} has no candidate anchor with IoU >= {CANDIDATE_IOU}",
                EmptyCandidateWarning,
                stacklevel=3,
            )
            table.append(ObjectCosts(j, ids, np.zeros(0)))
            fits.append(None)
            continue
        costs = candidate_costs(preds.probs, preds.boxes, ids, gt_boxes[j], int(classes[j]), gamma)
        table.append(ObjectCosts(j, ids, costs))
        fits.append(fit_gmm2(costs))
    return table, fits


def assign_from_costs(
    n_anchors: int, cost_table: list, fits: list, positive_rule: str = "below_mean"
) -> Assignment:
    masks = [
        select_positives(entry.costs, fit, positive_rule)
        if fit is not None
        else np.zeros(0, dtype=bool)
        for entry, fit in zip(cost_table, fits)
    ]
    return resolve_conflicts(n_anchors, cost_table, masks)


def paa_assign(
    preds: Predictions,
    anchors: AnchorGrid,
    objects: Sequence[LabeledObject],
    gamma: float = 2.0,
    positive_rule: str = "below_mean",
    anchor_ious: Optional[np.ndarray] = None,
) -> AssignResult:
    """Probabilistic anchor assignment from the given predictions."""
    table, fits = score_objects(preds, anchors, objects, gamma, anchor_ious)
    return AssignResult(assign_from_costs(len(anchors), table, fits, positive_rule), table, fits)


def lad_assign(
    teacher_preds: Predictions,
    anchors: AnchorGrid,
    objects: Sequence[LabeledObject],
    gamma: float = 2.0,
    positive_rule: str = "below_mean",
    anchor_ious: Optional[np.ndarray] = None,
) -> AssignResult:
    """Label assignment distillation: the PAA pipeline on teacher predictions only."""
    return paa_assign(teacher_preds, anchors, objects, gamma, positive_rule, anchor_ious)


def as_predictions(preds) -> Predictions:
    if isinstance(preds, Predictions):
        return preds
    return Predictions.from_list(list(preds))


__all__ = [
    "NEGATIVE",
    "LabeledObject",
    "Prediction",
    "Predictions",
    "Assignment",
    "ObjectCosts",
    "AssignResult",
    "EmptyCandidateWarning",
    "candidate_select",
    "assignment_cost",
    "candidate_costs",
    "select_positives",
    "score_objects",
    "assign_from_costs",
    "resolve_conflicts",
    "paa_assign",
    "lad_assign",
    "as_box_array",
]
