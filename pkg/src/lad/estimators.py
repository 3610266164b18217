"""Estimator-style front end over the training loop.

``LabelAssignmentDetector`` takes scenes as ``X`` (there is no separate
``y``: ground truth lives on the scenes) and exposes ``fit``, ``predict``
and ``score`` with flat constructor parameters so ``get_params`` and
``set_params`` behave as usual.
"""

from __future__ import annotations

from typing import Optional

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import (
    EvalConfig,
    ExperimentConfig,
    FusionConfig,
    StrategyConfig,
    TrainConfig,
    WorldConfig,
)
from .evaluation import MetricsReport
from .geometry import generate_anchors
from .io import scene_from_dict
from .simenv.model import ModelParams
from .simenv.train import build_contexts, detect_contexts, evaluate_model, train
from .simenv.world import Scene


def check_scenes(X, allow_empty: bool = False) -> list:
    """Coerce ``X`` to a list of ``Scene`` (dict records are parsed)."""
    if isinstance(X, (Scene, dict)):
        X = [X]
    try:
        scenes = [s if isinstance(s, Scene) else scene_from_dict(s) for s in X]
    except TypeError:
        raise TypeError(f"expected a sequence of scenes, got {type(X).__name__}") from None
    if not scenes and not allow_empty:
        raise ValueError("expected at least one scene")
    ids = [s.id for s in scenes]
    if len(set(ids)) != len(ids):
        raise ValueError("scene ids must be unique")
    return scenes


def _teacher_params(teacher) -> Optional[ModelParams]:
    if teacher is None or isinstance(teacher, ModelParams):
        return teacher
    if isinstance(teacher, LabelAssignmentDetector):
        check_is_fitted(teacher, "params_")
        return teacher.params_
    raise TypeError("teacher must be ModelParams or a fitted LabelAssignmentDetector")


class LabelAssignmentDetector(BaseEstimator):
    """Linear anchor detector trained with one of the assignment strategies.

    Args:
        strategy: ``baseline``, ``soft_label``, ``lad``, ``solad`` or ``colad``.
        teacher: frozen teacher for the distillation strategies, as
            ``ModelParams`` or a fitted detector.
        fusion: ``none``, ``iop`` or ``cop``.

    Attributes:
        params_: trained parameters (network A for CoLAD).
        partner_: CoLAD network B, otherwise ``None``.
        history_: per-iteration training records.
    """

    def __init__(
        self,
        strategy="baseline",
        teacher=None,
        seed=0,
        iterations=2000,
        lr=0.01,
        momentum=0.9,
        weight_decay=1e-4,
        warmup_iters=None,
        batch_scenes=2,
        gamma_assign=2.0,
        gamma_distill=0.5,
        distill_loss="kl",
        criterion="std_over_mean",
        positive_rule="below_mean",
        fusion="none",
        iou_head=True,
        num_classes=3,
        noise_sigma=0.25,
        workers=1,
    ):
        self.strategy = strategy
        self.teacher = teacher
        self.seed = seed
        self.iterations = iterations
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.warmup_iters = warmup_iters
        self.batch_scenes = batch_scenes
        self.gamma_assign = gamma_assign
        self.gamma_distill = gamma_distill
        self.distill_loss = distill_loss
        self.criterion = criterion
        self.positive_rule = positive_rule
        self.fusion = fusion
        self.iou_head = iou_head
        self.num_classes = num_classes
        self.noise_sigma = noise_sigma
        self.workers = workers

    def to_config(self) -> ExperimentConfig:
        return ExperimentConfig(
            train=TrainConfig(
                seed=self.seed,
                lr=self.lr,
                momentum=self.momentum,
                weight_decay=self.weight_decay,
                iterations=self.iterations,
                warmup_iters=self.warmup_iters,
                batch_scenes=self.batch_scenes,
                gamma_assign=self.gamma_assign,
                gamma_distill=self.gamma_distill,
                workers=self.workers,
                iou_head=self.iou_head,
                positive_rule=self.positive_rule,
            ),
            world=WorldConfig(num_classes=self.num_classes, noise_sigma=self.noise_sigma),
            strategy=StrategyConfig(
                variant=self.strategy, distill_loss=self.distill_loss, criterion=self.criterion
            ),
            fusion=FusionConfig(mode=self.fusion),
            eval=EvalConfig(),
        ).validate()

    def fit(self, X, y=None):
        scenes = check_scenes(X)
        cfg = self.to_config()
        result = train(cfg, scenes, teacher=_teacher_params(self.teacher))
        self.config_ = cfg
        self.params_ = result.params
        self.partner_ = result.partner
        self.history_ = result.history
        self.n_iter_ = len(result.history)
        return self

    def _params(self, network: str) -> ModelParams:
        check_is_fitted(self, "params_")
        if network == "a":
            return self.params_
        if network == "b" and self.partner_ is not None:
            return self.partner_
        raise ValueError(f"no network {network!r} in this model")

    def predict(self, X, network: str = "a") -> list:
        """Detections per scene, in input order."""
        scenes = check_scenes(X, allow_empty=True)
        params = self._params(network)
        grid = generate_anchors(self.config_.anchors)
        contexts = build_contexts(self.config_, scenes, grid)
        dets = detect_contexts(params, contexts, grid, self.config_)
        by_scene = {s.id: [] for s in scenes}
        for d in dets:
            by_scene[d.scene_id].append(d)
        return [by_scene[s.id] for s in scenes]

    def evaluate(self, X, network: str = "a") -> MetricsReport:
        return evaluate_model(self._params(network), check_scenes(X), self.config_)

    def score(self, X, y=None) -> float:
        """AP50 on ``X`` (0 when no class has ground truth or detections)."""
        ap = self.evaluate(X).ap50
        return 0.0 if ap is None else ap
