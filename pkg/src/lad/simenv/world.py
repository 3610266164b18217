"""Synthetic 2-D detection world.

A scene is a handful of labelled rectangles on a canvas. Instead of pixels,
each anchor gets an engineered feature vector describing the object whose
centre is nearest to it::

    [dx/stride, dy/stride, log(w/scale), log(h/scale), IoU, evidence_0..evidence_{C-1}]

The offsets are clipped to +-4. The class evidence is the nearest object's
one-hot class plus Gaussian noise, so classification is ambiguous and the
choice of positive anchors decides what the detector can learn.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import rng as rngmod
from ..assign import LabeledObject
from ..config import ConfigError, WorldConfig
from ..geometry import AnchorGrid, Box, pairwise_iou

GEOMETRIC_CHANNELS = 5
OFFSET_CLIP = 4.0


@dataclass(frozen=True)
class Scene:
    id: int
    objects: tuple
    seed: int
    width: float = 64.0
    height: float = 64.0

    @property
    def gt_boxes(self) -> np.ndarray:
        if not self.objects:
            return np.zeros((0, 4))
        return np.array([o.box.as_list() for o in self.objects], dtype=float)

    @property
    def gt_classes(self) -> np.ndarray:
        return np.array([o.class_id for o in self.objects], dtype=int)


def num_features(num_classes: int) -> int:
    return GEOMETRIC_CHANNELS + num_classes


def generate_scene(world: WorldConfig, rng: np.random.Generator, scene_id: int = 0) -> Scene:
    """Sample a scene: uniform object count, log-uniform sizes, uniform centres and classes."""
    world.validate()
    lo, hi = world.size_range
    if hi > min(world.width, world.height):
        raise ConfigError("world.size_range", "maximum object size exceeds the canvas")
    n = int(rng.integers(1, world.max_objects + 1))
    log_lo, log_hi = math.log(lo), math.log(hi)
    objects = []
    for _ in range(n):
        w = math.exp(rng.uniform(log_lo, log_hi))
        h = math.exp(rng.uniform(log_lo, log_hi))
        cx = rng.uniform(w / 2, world.width - w / 2)
        cy = rng.uniform(h / 2, world.height - h / 2)
        cls = int(rng.integers(0, world.num_classes))
        objects.append(LabeledObject(cls, Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)))
    noise_seed = int(rng.integers(0, 2**31 - 1))
    return Scene(scene_id, tuple(objects), noise_seed, world.width, world.height)


def generate_dataset(world: WorldConfig, seed: int, count: int, start_id: int = 0) -> list:
    """Scenes ``start_id .. start_id+count-1``; scene ``i`` depends only on ``(seed, i)``."""
    return [
        generate_scene(world, rngmod.stream(seed, rngmod.SCENES, i), i)
        for i in range(start_id, start_id + count)
    ]


def extract_features(
    scene: Scene, anchors: AnchorGrid, num_classes: int, noise_sigma: float
) -> np.ndarray:
    """Per-anchor feature matrix ``(N, 5 + C)``; deterministic in (scene, grid, sigma)."""
    n = len(anchors)
    feats = np.zeros((n, num_features(num_classes)))
    noise_rng = rngmod.stream(scene.seed, rngmod.NOISE)
    noise = noise_rng.standard_normal((n, num_classes)) * noise_sigma
    if scene.objects:
        gt = scene.gt_boxes
        a_ctr = anchors.centers
        o_ctr = 0.5 * (gt[:, :2] + gt[:, 2:])
        d2 = ((a_ctr[:, None, :] - o_ctr[None, :, :]) ** 2).sum(axis=-1)
        near = np.argmin(d2, axis=1)
        stride = anchors.strides[:, None]
        feats[:, 0:2] = np.clip((o_ctr[near] - a_ctr) / stride, -OFFSET_CLIP, OFFSET_CLIP)
        wh = gt[near, 2:] - gt[near, :2]
        feats[:, 2:4] = np.log(wh / anchors.scales[:, None])
        feats[:, 4] = pairwise_iou(anchors.boxes, gt)[np.arange(n), near]
        feats[np.arange(n), GEOMETRIC_CHANNELS + scene.gt_classes[near]] = 1.0
    feats[:, GEOMETRIC_CHANNELS:] += noise
    return feats
