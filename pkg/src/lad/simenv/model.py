"""Linear detection heads over per-anchor features, with hand-written backward.

Heads (``D`` = feature dimension):

* ``cls_w (D, C)``, ``cls_b (C,)``: class logits, sigmoid probabilities.
* ``box_w (D, 4)``, ``box_b (4,)``: box deltas ``(dx, dy, dw, dh)``, clamped to +-4.
* ``obj_w (D, K)``, ``obj_b (K,)``: objectness, ``K = 9`` for COP, 1 for IOP.
* ``iou_w (D, 1)``, ``iou_b (1,)``: optional IoU prediction.

Deltas decode relative to the anchor: the centre moves by ``d * stride`` and
the sides are ``scale * exp(d)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..assign import Predictions
from ..cop import fuse_grid, fuse_grid_backward, iop_backward, iop_fuse
from ..geometry import AnchorGrid

DELTA_CLIP = 4.0
PRIOR_PROB = 0.01


def sigmoid(x):
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class ModelParams:
    """Named parameter arrays; compared byte-for-byte by ``==``."""

    def __init__(self, arrays: dict):
        self.arrays = {k: np.asarray(v, dtype=float) for k, v in arrays.items()}

    def __getitem__(self, name):
        return self.arrays[name]

    def __contains__(self, name):
        return name in self.arrays

    def __eq__(self, other):
        if not isinstance(other, ModelParams) or self.arrays.keys() != other.arrays.keys():
            return False
        return all(
            self.arrays[k].shape == other.arrays[k].shape
            and self.arrays[k].tobytes() == other.arrays[k].tobytes()
            for k in self.arrays
        )

    def __repr__(self):
        shapes = ", ".join(f"{k}{v.shape}" for k, v in sorted(self.arrays.items()))
        return f"ModelParams({shapes})"

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    def names(self) -> list[str]:
        return sorted(self.arrays)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in self.names()])

    def with_flat(self, vec: np.ndarray) -> "ModelParams":
        out, i = {}, 0
        for k in self.names():
            a = self.arrays[k]
            out[k] = np.asarray(vec[i : i + a.size], dtype=float).reshape(a.shape).copy()
            i += a.size
        return ModelParams(out)

    @property
    def num_classes(self) -> int:
        return self.arrays["cls_w"].shape[1]

    @property
    def num_features(self) -> int:
        return self.arrays["cls_w"].shape[0]


def objectness_width(fusion_mode: str) -> int:
    return {"none": 0, "iop": 1, "cop": 9}[fusion_mode]


def init_params(
    num_features: int,
    num_classes: int,
    fusion_mode: str = "none",
    iou_head: bool = True,
    rng: Optional[np.random.Generator] = None,
    std: float = 0.01,
) -> ModelParams:
    """Small Gaussian weights; class bias set to the rare-foreground prior."""
    rng = rng if rng is not None else np.random.default_rng(0)
    prior = -np.log((1.0 - PRIOR_PROB) / PRIOR_PROB)
    arrays = {
        "cls_w": rng.standard_normal((num_features, num_classes)) * std,
        "cls_b": np.full(num_classes, prior),
        "box_w": rng.standard_normal((num_features, 4)) * std,
        "box_b": np.zeros(4),
    }
    k = objectness_width(fusion_mode)
    if k:
        arrays["obj_w"] = rng.standard_normal((num_features, k)) * std
        # objectness starts near 1 so fusion initially passes class scores through
        arrays["obj_b"] = np.full(k, 4.0)
    if iou_head:
        arrays["iou_w"] = rng.standard_normal((num_features, 1)) * std
        arrays["iou_b"] = np.zeros(1)
    return ModelParams(arrays)


def check_params(params: ModelParams, num_features: int, fusion_mode: str) -> None:
    if params.num_features != num_features:
        raise ValueError(
            f"parameters expect {params.num_features} features, got {num_features}"
        )
    k = objectness_width(fusion_mode)
    have = params["obj_w"].shape[1] if "obj_w" in params else 0
    if have != k:
        raise ValueError(f"fusion mode {fusion_mode!r} needs {k} objectness outputs, have {have}")


def decode_boxes(grid: AnchorGrid, deltas: np.ndarray) -> np.ndarray:
    ctr = grid.centers
    cx = ctr[:, 0] + deltas[:, 0] * grid.strides
    cy = ctr[:, 1] + deltas[:, 1] * grid.strides
    w = grid.scales * np.exp(deltas[:, 2])
    h = grid.scales * np.exp(deltas[:, 3])
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


@dataclass
class ForwardOutput:
    probs: np.ndarray  # raw class probabilities (N, C)
    scored: np.ndarray  # probabilities after fusion; equals probs when fusion is off
    raw_deltas: np.ndarray
    boxes: np.ndarray
    objectness: Optional[np.ndarray] = None
    iou_pred: Optional[np.ndarray] = None

    def predictions(self) -> Predictions:
        return Predictions(self.scored, self.boxes)


def forward(
    params: ModelParams, features: np.ndarray, grid: AnchorGrid, fusion_mode: str = "none"
) -> ForwardOutput:
    if features.shape != (len(grid), params.num_features):
        raise ValueError(
            f"feature matrix {features.shape} does not match "
            f"({len(grid)}, {params.num_features})"
        )
    probs = sigmoid(features @ params["cls_w"] + params["cls_b"])
    raw = features @ params["box_w"] + params["box_b"]
    boxes = decode_boxes(grid, np.clip(raw, -DELTA_CLIP, DELTA_CLIP))
    obj = None
    scored = probs
    if fusion_mode != "none":
        obj = sigmoid(features @ params["obj_w"] + params["obj_b"])
        scored = iop_fuse(probs, obj) if fusion_mode == "iop" else fuse_grid(grid, probs, obj)
    iou_pred = None
    if "iou_w" in params:
        iou_pred = sigmoid(features @ params["iou_w"] + params["iou_b"])[:, 0]
    return ForwardOutput(probs, scored, raw, boxes, obj, iou_pred)


def backward(
    params: ModelParams,
    features: np.ndarray,
    grid: AnchorGrid,
    out: ForwardOutput,
    fusion_mode: str = "none",
    d_scored: Optional[np.ndarray] = None,
    d_boxes: Optional[np.ndarray] = None,
    d_iou: Optional[np.ndarray] = None,
) -> dict:
    """Parameter gradients given upstream gradients.

    Args:
        d_scored: dL/d(scored probabilities), ``(N, C)``.
        d_boxes: dL/d(decoded corners), ``(N, 4)``.
        d_iou: dL/d(IoU-head probability), ``(N,)``.
    """
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    ft = features.T
    if d_scored is not None:
        if fusion_mode == "none":
            d_probs, d_obj = d_scored, None
        elif fusion_mode == "iop":
            d_probs, d_obj = iop_backward(out.probs, out.objectness, d_scored)
            d_obj = d_obj[:, None]
        else:
            d_probs, d_obj = fuse_grid_backward(grid, out.probs, out.objectness, d_scored)
        d_logits = d_probs * out.probs * (1.0 - out.probs)
        grads["cls_w"] = ft @ d_logits
        grads["cls_b"] = d_logits.sum(axis=0)
        if d_obj is not None:
            d_obj_logits = d_obj * out.objectness * (1.0 - out.objectness)
            grads["obj_w"] = ft @ d_obj_logits
            grads["obj_b"] = d_obj_logits.sum(axis=0)
    if d_boxes is not None:
        b = out.boxes
        w = b[:, 2] - b[:, 0]
        h = b[:, 3] - b[:, 1]
        d_delta = np.stack(
            [
                (d_boxes[:, 0] + d_boxes[:, 2]) * grid.strides,
                (d_boxes[:, 1] + d_boxes[:, 3]) * grid.strides,
                0.5 * (d_boxes[:, 2] - d_boxes[:, 0]) * w,
                0.5 * (d_boxes[:, 3] - d_boxes[:, 1]) * h,
            ],
            axis=1,
        )
        d_delta *= np.abs(out.raw_deltas) <= DELTA_CLIP
        grads["box_w"] = ft @ d_delta
        grads["box_b"] = d_delta.sum(axis=0)
    if d_iou is not None and out.iou_pred is not None:
        d_logit = (d_iou * out.iou_pred * (1.0 - out.iou_pred))[:, None]
        grads["iou_w"] = ft @ d_logit
        grads["iou_b"] = d_logit.sum(axis=0)
    return grads
