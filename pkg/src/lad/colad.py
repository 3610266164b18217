"""Co-learning controller: pick the dynamic teacher from cost separation.

Each iteration both networks run the cost + GMM stage on their own
predictions. The network whose costs separate more clearly becomes the
teacher, and its assignment labels *both* networks for that iteration.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .assign import Assignment, LabeledObject, Predictions, assign_from_costs, score_objects
from .geometry import AnchorGrid
from .gmm import fisher_score


class SwitchCriterion(str, enum.Enum):
    STD_OVER_MEAN = "std_over_mean"
    FISHER = "fisher"


@dataclass(frozen=True)
class RoleDecision:
    teacher: str  # "A" or "B"
    score_a: float
    score_b: float
    criterion: SwitchCriterion
    iteration: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["criterion"] = self.criterion.value
        return d


def std_over_mean(costs) -> float:
    """Coefficient of variation (population std over mean); 0 when the mean is 0."""
    c = np.asarray(costs, dtype=float).reshape(-1)
    if c.size == 0:
        raise ValueError("std_over_mean needs at least one cost")
    mean = float(c.mean())
    if mean == 0.0:
        return 0.0
    return float(c.std()) / mean


def network_score(cost_table: Sequence, fits: Sequence, criterion) -> float:
    """Separation score of one network over a (possibly pooled) cost table.

    Fisher averages the per-object Fisher scores of non-degenerate fits;
    Std/Mean pools every candidate cost. No usable object gives 0.
    """
    criterion = SwitchCriterion(criterion)
    if criterion is SwitchCriterion.FISHER:
        scores = [fisher_score(f.model) for f in fits if f is not None and not f.degenerate]
        return float(np.mean(scores)) if scores else 0.0
    pooled = [entry.costs for entry in cost_table if len(entry.costs)]
    if not pooled:
        return 0.0
    return std_over_mean(np.concatenate(pooled))


def choose_teacher(score_a: float, score_b: float) -> str:
    """Higher separation wins; ties go to network A."""
    return "B" if score_b > score_a else "A"


def colad_step(
    preds_a: Predictions,
    preds_b: Predictions,
    anchors: AnchorGrid,
    objects: Sequence[LabeledObject],
    gamma: float = 2.0,
    criterion=SwitchCriterion.STD_OVER_MEAN,
    iteration: int = 0,
    positive_rule: str = "below_mean",
) -> tuple[RoleDecision, Assignment]:
    """One co-learning assignment step for a single scene."""
    criterion = SwitchCriterion(criterion)
    table_a, fits_a = score_objects(preds_a, anchors, objects, gamma)
    table_b, fits_b = score_objects(preds_b, anchors, objects, gamma)
    score_a = network_score(table_a, fits_a, criterion)
    score_b = network_score(table_b, fits_b, criterion)
    teacher = choose_teacher(score_a, score_b)
    table, fits = (table_a, fits_a) if teacher == "A" else (table_b, fits_b)
    decision = RoleDecision(teacher, score_a, score_b, criterion, iteration)
    return decision, assign_from_costs(len(anchors), table, fits, positive_rule)
