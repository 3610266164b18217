"""Shared test utilities: finite differences and small fixtures."""

from __future__ import annotations

import numpy as np

from lad.geometry import AnchorLevel, generate_anchors


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(analytic, numeric, floor: float = 1e-8) -> float:
    """Max-norm error relative to the larger of the two gradients."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=float)))


def small_grid():
    """One 4x4 level on a 32x32 canvas (16 anchors)."""
    return generate_anchors([AnchorLevel(stride=8, scale=16, rows=4, cols=4)])


def small_levels():
    return (AnchorLevel(stride=8, scale=16, rows=4, cols=4), AnchorLevel(stride=16, scale=32, rows=2, cols=2))


def central_diff_batched(f_batch, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Like :func:`central_diff` for an ``f_batch`` mapping ``(B, *x.shape)`` to ``(B,)``."""
    x = np.asarray(x, dtype=float)
    eye = np.eye(x.size).reshape((x.size,) + x.shape) * h
    stacked = np.concatenate([x[None] + eye, x[None] - eye])
    vals = f_batch(stacked)
    return ((vals[: x.size] - vals[x.size :]) / (2 * h)).reshape(x.shape)
