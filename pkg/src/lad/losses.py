"""Scalar losses with analytic gradients.

Public ops (``focal_loss``, ``kl_focal``, ``soft_lp``) take probabilities
that came out of a sigmoid and return gradients with respect to the
*logits* behind them. The ``*_terms`` helpers are elementwise and return
gradients with respect to the probabilities themselves; the trainer uses
those when probabilities pass through a fusion op before the loss.

Only the student side is clamped to ``[EPS, 1 - EPS]``. Teacher (target)
probabilities enter as given, with ``0 * log 0 = 0``, which is what makes a
one-hot teacher reduce the KL term to plain focal loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .geometry import Box, as_box_array, pairwise_iou

EPS = 1e-7


@dataclass
class LossValue:
    value: float
    grad: np.ndarray


def _clamp(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pc = np.clip(p, EPS, 1.0 - EPS)
    # clip has zero derivative outside the interval
    live = (p >= EPS) & (p <= 1.0 - EPS)
    return pc, live


def _check_gamma(gamma: float) -> float:
    gamma = float(gamma)
    if not gamma >= 0.0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    return gamma


def _sigmoid_slope(p: np.ndarray) -> np.ndarray:
    return p * (1.0 - p)


def focal_terms(p, target, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise binary focal loss (no alpha weighting) and d/dp."""
    gamma = _check_gamma(gamma)
    p = np.asarray(p, dtype=float)
    t = np.asarray(target)
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("focal targets must be 0 or 1")
    t = np.broadcast_to(t, p.shape).astype(bool)
    pc, live = _clamp(p)
    q = np.where(t, pc, 1.0 - pc)
    one_minus_q = np.where(t, 1.0 - pc, pc)
    logq = np.where(t, np.log(pc), np.log1p(-pc))
    mod = one_minus_q**gamma
    values = -mod * logq
    if gamma == 0.0:
        dq = -1.0 / q
    else:
        dq = gamma * one_minus_q ** (gamma - 1.0) * logq - mod / q
    grad_p = np.where(t, dq, -dq) * live
    return values, grad_p


def focal_loss(p, target, gamma: float = 2.0) -> LossValue:
    """Binary focal loss summed over elements; gradient w.r.t. the logits."""
    p = np.asarray(p, dtype=float)
    values, grad_p = focal_terms(p, target, gamma)
    return LossValue(float(values.sum()), grad_p * _sigmoid_slope(p))


def _check_pair(p_t, p_s) -> tuple[np.ndarray, np.ndarray]:
    p_t = np.asarray(p_t, dtype=float)
    p_s = np.asarray(p_s, dtype=float)
    if p_t.shape != p_s.shape:
        raise ValueError(f"teacher/student shape mismatch: {p_t.shape} vs {p_s.shape}")
    return p_t, p_s


def kl_focal_terms(p_t, p_s, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise focal-weighted binary KL and its derivative w.r.t. ``p_s``.

    The weight ``|p_t - p_s| ** gamma`` is held constant when differentiating.
    """
    gamma = _check_gamma(gamma)
    p_t, p_s = _check_pair(p_t, p_s)
    ps, live = _clamp(p_s)
    w = np.abs(p_t - ps) ** gamma
    kl = (xlogy(p_t, p_t) - p_t * np.log(ps)) + (
        xlogy(1.0 - p_t, 1.0 - p_t) - (1.0 - p_t) * np.log1p(-ps)
    )
    kl = np.maximum(kl, 0.0)
    dkl = -p_t / ps + (1.0 - p_t) / (1.0 - ps)
    return w * kl, w * dkl * live


def kl_focal(p_t, p_s, gamma: float = 0.5) -> LossValue:
    """Focal-weighted KL distillation loss summed over classes."""
    p_t, p_s = _check_pair(p_t, p_s)
    values, grad_p = kl_focal_terms(p_t, p_s, gamma)
    return LossValue(float(values.sum()), grad_p * _sigmoid_slope(p_s))


def soft_lp_terms(p_t, p_s, order: int) -> tuple[np.ndarray, np.ndarray]:
    p_t, p_s = _check_pair(p_t, p_s)
    diff = p_s - p_t
    if order == 1:
        return np.abs(diff), np.sign(diff)
    if order == 2:
        return diff * diff, 2.0 * diff
    raise ValueError(f"order must be 1 or 2, got {order}")


def soft_lp(p_t, p_s, order: int = 2) -> LossValue:
    """L1 or L2 soft-label loss; the L1 subgradient is 0 at exact ties."""
    p_t, p_s = _check_pair(p_t, p_s)
    values, grad_p = soft_lp_terms(p_t, p_s, order)
    return LossValue(float(values.sum()), grad_p * _sigmoid_slope(p_s))


def _tie_slope(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # d max(a, b) / da; ties split evenly so identical boxes sit at a stationary point
    return np.where(a > b, 1.0, np.where(a == b, 0.5, 0.0))


def iou_loss_terms(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``1 - IoU`` and its gradient w.r.t. the predicted corners.

    Args:
        pred: ``(N, 4)`` predicted boxes.
        target: ``(N, 4)`` target boxes with positive area.

    Returns:
        ``(values, grads)`` with shapes ``(N,)`` and ``(N, 4)``.
    """
    px1, py1, px2, py2 = pred.T
    tx1, ty1, tx2, ty2 = target.T
    iw_raw = np.minimum(px2, tx2) - np.maximum(px1, tx1)
    ih_raw = np.minimum(py2, ty2) - np.maximum(py1, ty1)
    w_on = iw_raw > 0
    h_on = ih_raw > 0
    iw = np.where(w_on, iw_raw, 0.0)
    ih = np.where(h_on, ih_raw, 0.0)
    inter = iw * ih
    pw, ph = px2 - px1, py2 - py1
    union = pw * ph + (tx2 - tx1) * (ty2 - ty1) - inter
    ok = union > 0
    safe_union = np.where(ok, union, 1.0)
    iou_v = np.where(ok, inter / safe_union, 0.0)

    d_inter = np.stack(
        [
            -_tie_slope(px1, tx1) * ih * w_on,
            -_tie_slope(py1, ty1) * iw * h_on,
            _tie_slope(-px2, -tx2) * ih * w_on,
            _tie_slope(-py2, -ty2) * iw * h_on,
        ],
        axis=1,
    )
    d_area = np.stack([-ph, -pw, ph, pw], axis=1)
    d_union = d_area - d_inter
    d_iou = (d_inter * safe_union[:, None] - inter[:, None] * d_union) / safe_union[:, None] ** 2
    d_iou = np.where(ok[:, None], d_iou, 0.0)
    return 1.0 - iou_v, -d_iou


def iou_loss(b_pred, b_target) -> LossValue:
    """``1 - IoU(b_pred, b_target)`` with gradient w.r.t. the four predicted coordinates."""
    pred = as_box_array(b_pred)
    target = as_box_array(b_target)
    values, grads = iou_loss_terms(pred, target)
    return LossValue(float(values[0]), grads[0])


def select_loc_distill(teacher_boxes, gt_boxes) -> np.ndarray:
    """Indices of teacher boxes whose best IoU with any ground truth exceeds 0.5."""
    tb = as_box_array(teacher_boxes)
    gb = as_box_array(gt_boxes)
    if len(gb) == 0 or len(tb) == 0:
        return np.zeros(0, dtype=int)
    best = pairwise_iou(tb, gb).max(axis=1)
    return np.flatnonzero(best > 0.5)


def bce_terms(p, target) -> tuple[np.ndarray, np.ndarray]:
    """Binary cross-entropy against a soft target and d/dp (used by the IoU head)."""
    p = np.asarray(p, dtype=float)
    t = np.asarray(target, dtype=float)
    pc, live = _clamp(p)
    values = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))
    grad = (-t / pc + (1.0 - t) / (1.0 - pc)) * live
    return values, grad


__all__ = [
    "EPS",
    "Box",
    "LossValue",
    "focal_loss",
    "focal_terms",
    "kl_focal",
    "kl_focal_terms",
    "soft_lp",
    "soft_lp_terms",
    "iou_loss",
    "iou_loss_terms",
    "select_loc_distill",
    "bce_terms",
]
