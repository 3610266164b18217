"""Objectness fusion: conditional (3x3 neighbourhood) and implicit (single score).

COP fuses, per anchor ``i`` and class ``c``::

    fused[i, c] = (1/9) * sum_k obj[i, k] * probs[neighbour_k(i), c]

with ``k`` running row-major over the 3x3 window centred on ``i``.
Neighbours outside the grid contribute 0 and the divisor stays 9.
"""

from __future__ import annotations

import numpy as np

from .geometry import AnchorGrid

# (drow, dcol) for k = 0..8, row-major around the centre
NEIGHBOUR_OFFSETS = tuple((dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1))
CENTER = 4


def _check_grid(class_probs: np.ndarray, objectness: np.ndarray) -> None:
    if class_probs.ndim < 3 or objectness.ndim != class_probs.ndim:
        raise ValueError("cop_fuse expects (..., rows, cols, C) probs and (..., rows, cols, 9) objectness")
    if class_probs.shape[:-1] != objectness.shape[:-1] or objectness.shape[-1] != 9:
        raise ValueError(
            f"grid mismatch: probs {class_probs.shape} vs objectness {objectness.shape}"
        )


def _window_slices(dr: int, dc: int, rows: int, cols: int):
    """Destination/source index tuples pairing anchor (r, c) with neighbour (r+dr, c+dc)."""
    dst_r = slice(max(0, -dr), rows - max(0, dr))
    src_r = slice(max(0, dr), rows - max(0, -dr))
    dst_c = slice(max(0, -dc), cols - max(0, dc))
    src_c = slice(max(0, dc), cols - max(0, -dc))
    full = slice(None)
    return (Ellipsis, dst_r, dst_c, full), (Ellipsis, src_r, src_c, full)


def cop_fuse(class_probs, objectness) -> np.ndarray:
    """Fuse class probabilities with 3x3 conditional objectness on one grid level.

    Shapes are ``(..., rows, cols, C)`` and ``(..., rows, cols, 9)``; any
    leading dimensions are treated as a batch.
    """
    p = np.asarray(class_probs, dtype=float)
    o = np.asarray(objectness, dtype=float)
    _check_grid(p, o)
    rows, cols = p.shape[-3:-1]
    out = np.zeros_like(p)
    for k, (dr, dc) in enumerate(NEIGHBOUR_OFFSETS):
        dst, src = _window_slices(dr, dc, rows, cols)
        out[dst] += o[dst[:-1] + (slice(k, k + 1),)] * p[src]
    return out / 9.0


def cop_backward(class_probs, objectness, grad_fused) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_fused * cop_fuse(...))`` w.r.t. the probabilities.

    Returns ``(d_probs, d_objectness)`` at the probability level; multiply by
    ``p * (1 - p)`` for logits (see :func:`cop_logit_grads`).
    """
    p = np.asarray(class_probs, dtype=float)
    o = np.asarray(objectness, dtype=float)
    g = np.asarray(grad_fused, dtype=float) / 9.0
    _check_grid(p, o)
    rows, cols = p.shape[-3:-1]
    d_p = np.zeros_like(p)
    d_o = np.zeros_like(o)
    for k, (dr, dc) in enumerate(NEIGHBOUR_OFFSETS):
        dst, src = _window_slices(dr, dc, rows, cols)
        d_p[src] += o[dst[:-1] + (slice(k, k + 1),)] * g[dst]
        d_o[dst[:-1] + (k,)] = (g[dst] * p[src]).sum(axis=-1)
    return d_p, d_o


def cop_logit_grads(class_probs, objectness, grad_fused) -> tuple[np.ndarray, np.ndarray]:
    """Like :func:`cop_backward` but with respect to both sets of logits."""
    p = np.asarray(class_probs, dtype=float)
    o = np.asarray(objectness, dtype=float)
    d_p, d_o = cop_backward(p, o, grad_fused)
    return d_p * p * (1.0 - p), d_o * o * (1.0 - o)


def iop_fuse(class_probs, objectness) -> np.ndarray:
    """Implicit objectness: ``fused[i, c] = obj[i] * probs[i, c]``."""
    p = np.asarray(class_probs, dtype=float)
    o = np.asarray(objectness, dtype=float).reshape(-1)
    if p.ndim != 2 or len(o) != len(p):
        raise ValueError(f"size mismatch: probs {p.shape} vs objectness {o.shape}")
    return p * o[:, None]


def iop_backward(class_probs, objectness, grad_fused) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(class_probs, dtype=float)
    o = np.asarray(objectness, dtype=float).reshape(-1)
    g = np.asarray(grad_fused, dtype=float)
    return g * o[:, None], (g * p).sum(axis=1)


def iop_logit_grads(class_probs, objectness, grad_fused) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(class_probs, dtype=float)
    o = np.asarray(objectness, dtype=float).reshape(-1)
    d_p, d_o = iop_backward(p, o, grad_fused)
    return d_p * p * (1.0 - p), d_o * o * (1.0 - o)


def fuse_grid(grid: AnchorGrid, class_probs: np.ndarray, objectness: np.ndarray) -> np.ndarray:
    """Apply COP level by level on flat ``(N, C)`` / ``(N, 9)`` anchor arrays."""
    out = np.empty_like(class_probs)
    for lvl, sl in zip(grid.levels, grid.level_slices):
        shape = (lvl.rows, lvl.cols)
        out[sl] = cop_fuse(
            class_probs[sl].reshape(*shape, -1), objectness[sl].reshape(*shape, 9)
        ).reshape(lvl.size, -1)
    return out


def fuse_grid_backward(
    grid: AnchorGrid, class_probs: np.ndarray, objectness: np.ndarray, grad_fused: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    d_p = np.empty_like(class_probs)
    d_o = np.empty_like(objectness)
    for lvl, sl in zip(grid.levels, grid.level_slices):
        shape = (lvl.rows, lvl.cols)
        a, b = cop_backward(
            class_probs[sl].reshape(*shape, -1),
            objectness[sl].reshape(*shape, 9),
            grad_fused[sl].reshape(*shape, -1),
        )
        d_p[sl] = a.reshape(lvl.size, -1)
        d_o[sl] = b.reshape(lvl.size, 9)
    return d_p, d_o
