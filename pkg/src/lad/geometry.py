"""Boxes, IoU, anchor grids and greedy NMS.

Boxes are corner-parameterized ``(x1, y1, x2, y2)`` in continuous canvas
units. Zero-area boxes are legal; any IoU involving an empty union is 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"box corners out of order: {coords}")

    @classmethod
    def from_array(cls, a) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in a)
        return cls(x1, y1, x2, y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=float)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


BoxLike = Union[Box, Sequence[float], np.ndarray]


def as_box_array(boxes) -> np.ndarray:
    """Coerce a Box, a sequence of Boxes or an array-like into an ``(N, 4)`` array."""
    if isinstance(boxes, Box):
        return boxes.as_array()[None, :]
    if isinstance(boxes, np.ndarray):
        arr = boxes.astype(float, copy=False)
    else:
        items = list(boxes)
        if items and isinstance(items[0], Box):
            arr = np.array([b.as_list() for b in items], dtype=float)
        else:
            arr = np.asarray(items, dtype=float)
    if arr.size == 0:
        return arr.reshape(0, 4)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape[-1] != 4:
        raise ValueError(f"boxes must have 4 coordinates, got shape {arr.shape}")
    return arr


def iou(a: BoxLike, b: BoxLike) -> float:
    """Intersection over union of two boxes; degenerate unions give 0."""
    ax1, ay1, ax2, ay2 = a.as_list() if isinstance(a, Box) else (float(v) for v in a)
    bx1, by1, bx2, by2 = b.as_list() if isinstance(b, Box) else (float(v) for v in b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def pairwise_iou(boxes1, boxes2) -> np.ndarray:
    """IoU matrix of shape ``(N, M)`` between two box sets."""
    b1 = as_box_array(boxes1)
    b2 = as_box_array(boxes2)
    if len(b1) == 0 or len(b2) == 0:
        return np.zeros((len(b1), len(b2)))
    iw = np.minimum(b1[:, None, 2], b2[None, :, 2]) - np.maximum(b1[:, None, 0], b2[None, :, 0])
    ih = np.minimum(b1[:, None, 3], b2[None, :, 3]) - np.maximum(b1[:, None, 1], b2[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area1 = (b1[:, 2] - b1[:, 0]) * (b1[:, 3] - b1[:, 1])
    area2 = (b2[:, 2] - b2[:, 0]) * (b2[:, 3] - b2[:, 1])
    union = area1[:, None] + area2[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return np.clip(out, 0.0, 1.0)


def aligned_iou(boxes1: np.ndarray, boxes2: np.ndarray) -> np.ndarray:
    """Row-wise IoU between two ``(N, 4)`` arrays."""
    iw = np.minimum(boxes1[:, 2], boxes2[:, 2]) - np.maximum(boxes1[:, 0], boxes2[:, 0])
    ih = np.minimum(boxes1[:, 3], boxes2[:, 3]) - np.maximum(boxes1[:, 1], boxes2[:, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area1 = (boxes1[:, 2] - boxes1[:, 0]) * (boxes1[:, 3] - boxes1[:, 1])
    area2 = (boxes2[:, 2] - boxes2[:, 0]) * (boxes2[:, 3] - boxes2[:, 1])
    union = area1 + area2 - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class AnchorLevel:
    stride: float
    scale: float
    rows: int
    cols: int

    def __post_init__(self):
        if not (self.stride > 0 and self.scale > 0 and self.rows > 0 and self.cols > 0):
            raise ValueError(f"anchor level fields must be positive: {self}")

    @property
    def size(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class Anchor:
    box: Box
    level: int
    row: int
    col: int
    id: int


@dataclass(frozen=True, eq=False)
class AnchorGrid:
    """Flat, level-major list of square anchors plus cached arrays.

    ``boxes``, ``strides``, ``scales`` and ``level_index`` are aligned with
    ``anchors``; ``level_slices[l]`` selects the anchors of level ``l``.
    """

    levels: tuple[AnchorLevel, ...]
    anchors: tuple[Anchor, ...]
    boxes: np.ndarray
    strides: np.ndarray
    scales: np.ndarray
    level_index: np.ndarray

    def __len__(self) -> int:
        return len(self.anchors)

    @property
    def level_slices(self) -> list[slice]:
        out, start = [], 0
        for lvl in self.levels:
            out.append(slice(start, start + lvl.size))
            start += lvl.size
        return out

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.boxes[:, :2] + self.boxes[:, 2:])


def generate_anchors(levels: Iterable[AnchorLevel]) -> AnchorGrid:
    """Square anchors of side ``scale`` centered at ``((col+0.5)*stride, (row+0.5)*stride)``.

    Ordering is level-major, then row-major within a level.
    """
    levels = tuple(lvl if isinstance(lvl, AnchorLevel) else AnchorLevel(**lvl) for lvl in levels)
    if not levels:
        raise ValueError("at least one anchor level is required")
    anchors, rows_out, strides, scales, level_ids = [], [], [], [], []
    for li, lvl in enumerate(levels):
        half = 0.5 * lvl.scale
        for r in range(lvl.rows):
            cy = (r + 0.5) * lvl.stride
            for c in range(lvl.cols):
                cx = (c + 0.5) * lvl.stride
                box = Box(cx - half, cy - half, cx + half, cy + half)
                anchors.append(Anchor(box, li, r, c, len(anchors)))
                rows_out.append(box.as_list())
                strides.append(lvl.stride)
                scales.append(lvl.scale)
                level_ids.append(li)
    return AnchorGrid(
        levels=levels,
        anchors=tuple(anchors),
        boxes=np.array(rows_out, dtype=float),
        strides=np.array(strides, dtype=float),
        scales=np.array(scales, dtype=float),
        level_index=np.array(level_ids, dtype=int),
    )


def nms(boxes, scores, iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression.

    Returns kept indices in descending-score order; equal scores are visited
    in ascending original index. A box is suppressed when its IoU with an
    already kept box exceeds ``iou_threshold``.
    """
    b = as_box_array(boxes)
    s = np.asarray(scores, dtype=float).reshape(-1)
    if len(s) == 0:
        return []
    if len(b) != len(s):
        raise ValueError("boxes and scores differ in length")
    order = np.lexsort((np.arange(len(s)), -s))
    ious = pairwise_iou(b, b)
    suppressed = np.zeros(len(s), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= ious[i] > iou_threshold
    return keep
