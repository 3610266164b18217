"""Training loop for the five strategies.

baseline
    PAA on the network's own predictions.
soft_label
    baseline plus soft-label distillation from a frozen teacher.
lad
    PAA run on the frozen teacher's predictions labels the student.
solad
    LAD labels plus the soft-label distillation losses.
colad
    two networks; each iteration the one with clearer cost separation
    labels both.

Per iteration the loss is::

    (focal_cls + iou_loc + iou_head + distill_cls) / max(1, #positives)
      + distill_loc / max(1, #distill-selected)

where classification and soft-label terms run over every anchor, while the
localization and IoU-head terms only see positives. Per-scene work can run on
a thread pool; gradients are reduced in scene-id order so the result does not
depend on the worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .. import rng as rngmod
from ..assign import (
    Assignment,
    assign_from_costs,
    lad_assign,
    paa_assign,
    score_objects,
)
from ..colad import RoleDecision, SwitchCriterion, choose_teacher, network_score
from ..config import ExperimentConfig
from ..evaluation import MetricsReport, detections_from_output, evaluate_detections
from ..geometry import AnchorGrid, generate_anchors, pairwise_iou
from ..losses import (
    bce_terms,
    focal_terms,
    iou_loss_terms,
    kl_focal_terms,
    select_loc_distill,
    soft_lp_terms,
)
from .model import ModelParams, backward, check_params, forward, init_params
from .world import Scene, extract_features, num_features

LOSS_NAMES = ("cls", "loc", "iou", "distill_cls", "distill_loc")
EVAL_SUBSET = 32


class NumericalAbort(RuntimeError):
    """A loss component or parameter became non-finite."""

    def __init__(self, iteration: int, component: str, value: float):
        super().__init__(
            f"non-finite {component} at iteration {iteration} (value={value!r})"
        )
        self.iteration = iteration
        self.component = component
        self.value = value


@dataclass(frozen=True, eq=False)
class TeacherTargets:
    scored: np.ndarray
    boxes: np.ndarray
    loc_select: np.ndarray
    assignment: Optional[Assignment] = None


@dataclass(frozen=True, eq=False)
class SceneContext:
    scene: Scene
    features: np.ndarray
    anchor_ious: np.ndarray
    gt_boxes: np.ndarray
    gt_classes: np.ndarray
    teacher: Optional[TeacherTargets] = None


@dataclass
class SceneTerms:
    sums: dict
    n_pos: int
    n_select: int
    grads_pos: dict
    grads_select: Optional[dict]


@dataclass
class TrainResult:
    params: ModelParams
    history: list = field(default_factory=list)
    partner: Optional[ModelParams] = None


def build_contexts(config: ExperimentConfig, scenes: Sequence[Scene], grid: AnchorGrid) -> list:
    w = config.world
    out = []
    for s in scenes:
        gt = s.gt_boxes
        out.append(
            SceneContext(
                scene=s,
                features=extract_features(s, grid, w.num_classes, w.noise_sigma),
                anchor_ious=pairwise_iou(grid.boxes, gt),
                gt_boxes=gt,
                gt_classes=s.gt_classes,
            )
        )
    return out


def attach_teacher(
    config: ExperimentConfig, contexts: list, grid: AnchorGrid, teacher: ModelParams, with_assignment: bool
) -> list:
    """Run the frozen teacher once per scene and cache what training needs from it."""
    out = []
    for ctx in contexts:
        t_out = forward(teacher, ctx.features, grid, config.fusion.mode)
        assignment = None
        if with_assignment:
            assignment = lad_assign(
                t_out.predictions(),
                grid,
                ctx.scene.objects,
                config.train.gamma_assign,
                config.train.positive_rule,
                anchor_ious=ctx.anchor_ious,
            ).assignment
        targets = TeacherTargets(
            scored=t_out.scored,
            boxes=t_out.boxes,
            loc_select=select_loc_distill(t_out.boxes, ctx.gt_boxes),
            assignment=assignment,
        )
        out.append(
            SceneContext(ctx.scene, ctx.features, ctx.anchor_ious, ctx.gt_boxes, ctx.gt_classes, targets)
        )
    return out


def scene_terms(
    params: ModelParams,
    ctx: SceneContext,
    grid: AnchorGrid,
    config: ExperimentConfig,
    labels: np.ndarray,
    distill: bool = False,
    out=None,
) -> SceneTerms:
    """Unnormalised loss sums and their parameter gradients for one scene."""
    mode = config.fusion.mode
    if out is None:
        out = forward(params, ctx.features, grid, mode)
    n, c = out.scored.shape
    pos = np.flatnonzero(labels >= 0)
    targets = np.zeros((n, c))
    targets[pos, ctx.gt_classes[labels[pos]]] = 1.0
    cls_vals, d_scored = focal_terms(out.scored, targets, config.train.gamma_assign)
    sums = dict.fromkeys(LOSS_NAMES, 0.0)
    sums["cls"] = float(cls_vals.sum())

    d_boxes = np.zeros((n, 4))
    d_iou = None
    if len(pos):
        loc_vals, loc_grads = iou_loss_terms(out.boxes[pos], ctx.gt_boxes[labels[pos]])
        sums["loc"] = float(loc_vals.sum())
        d_boxes[pos] = loc_grads
        if out.iou_pred is not None:
            bce_vals, bce_dp = bce_terms(out.iou_pred[pos], 1.0 - loc_vals)
            sums["iou"] = float(bce_vals.sum())
            d_iou = np.zeros(n)
            d_iou[pos] = bce_dp

    grads_select = None
    n_select = 0
    if distill:
        teacher = ctx.teacher
        kind = config.strategy.distill_loss
        if kind == "kl":
            vals, dp = kl_focal_terms(teacher.scored, out.scored, config.train.gamma_distill)
        else:
            vals, dp = soft_lp_terms(teacher.scored, out.scored, 1 if kind == "l1" else 2)
        sums["distill_cls"] = float(vals.sum())
        d_scored = d_scored + dp
        sel = teacher.loc_select
        n_select = len(sel)
        if n_select:
            vals, g = iou_loss_terms(out.boxes[sel], teacher.boxes[sel])
            sums["distill_loc"] = float(vals.sum())
            d_sel = np.zeros((n, 4))
            d_sel[sel] = g
            grads_select = backward(params, ctx.features, grid, out, mode, d_boxes=d_sel)

    grads_pos = backward(params, ctx.features, grid, out, mode, d_scored, d_boxes, d_iou)
    return SceneTerms(sums, len(pos), n_select, grads_pos, grads_select)


def reduce_terms(params: ModelParams, terms: Sequence[SceneTerms]) -> tuple[dict, dict, int]:
    """Combine per-scene terms (already in scene order) into normalised loss and gradient."""
    n_pos = sum(t.n_pos for t in terms)
    n_sel = sum(t.n_select for t in terms)
    norm_pos = 1.0 / max(1, n_pos)
    norm_sel = 1.0 / max(1, n_sel)
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    losses = dict.fromkeys(LOSS_NAMES, 0.0)
    for t in terms:
        for k in LOSS_NAMES:
            losses[k] += t.sums[k]
        for k, g in t.grads_pos.items():
            grads[k] += g * norm_pos
        if t.grads_select is not None:
            for k, g in t.grads_select.items():
                grads[k] += g * norm_sel
    for k in LOSS_NAMES:
        losses[k] *= norm_sel if k == "distill_loc" else norm_pos
    losses["total"] = sum(losses[k] for k in LOSS_NAMES)
    return losses, grads, n_pos


def batch_loss_and_grad(
    params: ModelParams,
    contexts: Sequence[SceneContext],
    grid: AnchorGrid,
    config: ExperimentConfig,
    labels: Sequence[np.ndarray],
    distill: bool = False,
) -> tuple[dict, dict]:
    """Loss and gradient for a batch under frozen assignments."""
    terms = [scene_terms(params, ctx, grid, config, lab, distill) for ctx, lab in zip(contexts, labels)]
    losses, grads, _ = reduce_terms(params, terms)
    return losses, grads


def _check_finite(iteration: int, losses: dict, prefix: str = "") -> None:
    for k, v in losses.items():
        if not math.isfinite(v):
            raise NumericalAbort(iteration, f"{prefix}{k}", v)


class _SGD:
    def __init__(self, params: ModelParams, lr: float, momentum: float, weight_decay: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(v) for k, v in params.arrays.items()}

    def step(self, grads: dict, lr: float) -> None:
        for k, theta in self.params.arrays.items():
            g = grads[k] + self.weight_decay * theta
            v = self.velocity[k]
            v *= self.momentum
            v += g
            theta -= lr * v


def learning_rate(config: ExperimentConfig, iteration: int) -> float:
    """Linear warm-up to the base rate over the strategy's warm-up window."""
    warm = config.warmup_iters
    base = config.train.lr
    if warm <= 0:
        return base
    return base * min(1.0, (iteration + 1) / warm)


class _BatchSchedule:
    """Scene indices per iteration: a fresh seeded permutation each epoch."""

    def __init__(self, seed: int, n: int, batch: int):
        self.seed, self.n, self.batch = seed, n, batch
        self._perms: dict = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            self._perms = {epoch: rngmod.stream(self.seed, rngmod.ORDER, epoch).permutation(self.n)}
        return self._perms[epoch]

    def __call__(self, iteration: int) -> list[int]:
        out = []
        for p in range(iteration * self.batch, (iteration + 1) * self.batch):
            out.append(int(self._perm(p // self.n)[p % self.n]))
        # reduce order is scene-id order
        return sorted(out)


def initial_params(config: ExperimentConfig, index_offset: int = 0) -> ModelParams:
    w = config.world
    return init_params(
        num_features(w.num_classes),
        w.num_classes,
        config.fusion.mode,
        config.train.iou_head,
        rngmod.stream(config.train.seed, rngmod.INIT, config.train.init_index + index_offset),
    )


def train(
    config: ExperimentConfig,
    scenes: Sequence[Scene],
    teacher: Optional[ModelParams] = None,
    init: Optional[ModelParams] = None,
    init_partner: Optional[ModelParams] = None,
    callback: Optional[Callable[..., None]] = None,
) -> TrainResult:
    """Train under ``config.strategy`` and return parameters plus the history log.

    Args:
        teacher: frozen teacher parameters (soft_label, lad, solad).
        init: starting parameters; default drawn from the ``init`` stream.
        init_partner: CoLAD network B's starting parameters; default uses the
            next ``init`` counter.
        callback: called as ``callback(record, params, partner)`` after every
            update; the parameter objects are live and must not be mutated.
    """
    config.validate()
    if not scenes:
        raise ValueError("training needs at least one scene")
    variant = config.strategy.variant
    if config.strategy.needs_teacher and teacher is None:
        raise ValueError(f"strategy {variant!r} needs a teacher")
    grid = generate_anchors(config.anchors)
    nf = num_features(config.world.num_classes)
    params = (init if init is not None else initial_params(config)).copy()
    check_params(params, nf, config.fusion.mode)
    partner = None
    if variant == "colad":
        partner = (init_partner if init_partner is not None else initial_params(config, 1)).copy()
        check_params(partner, nf, config.fusion.mode)
    if teacher is not None:
        check_params(teacher, nf, config.fusion.mode)

    for name, net in (("params", params), ("partner", partner)):
        if net is not None and not all(np.isfinite(v).all() for v in net.arrays.values()):
            raise NumericalAbort(0, name, float("nan"))

    contexts = build_contexts(config, scenes, grid)
    if config.strategy.needs_teacher:
        contexts = attach_teacher(config, contexts, grid, teacher, variant in ("lad", "solad"))
    distill = variant in ("soft_label", "solad")

    tc = config.train
    opt = _SGD(params, tc.lr, tc.momentum, tc.weight_decay)
    opt_b = _SGD(partner, tc.lr, tc.momentum, tc.weight_decay) if partner is not None else None
    schedule = _BatchSchedule(tc.seed, len(contexts), tc.batch_scenes)
    pool = ThreadPoolExecutor(tc.workers) if tc.workers > 1 else None
    mapper = pool.map if pool is not None else map
    history = []

    def own_assignment_terms(ctx, net):
        out = forward(net, ctx.features, grid, config.fusion.mode)
        res = paa_assign(
            out.predictions(), grid, ctx.scene.objects, tc.gamma_assign, tc.positive_rule, ctx.anchor_ious
        )
        return scene_terms(net, ctx, grid, config, res.assignment.labels, distill, out)

    def teacher_assignment_terms(ctx):
        return scene_terms(params, ctx, grid, config, ctx.teacher.assignment.labels, distill)

    def colad_stage(ctx):
        outs, tables, fits = [], [], []
        for net in (params, partner):
            out = forward(net, ctx.features, grid, config.fusion.mode)
            table, fit = score_objects(
                out.predictions(), grid, ctx.scene.objects, tc.gamma_assign, ctx.anchor_ious
            )
            outs.append(out)
            tables.append(table)
            fits.append(fit)
        return outs, tables, fits

    try:
        for it in range(tc.iterations):
            lr = learning_rate(config, it)
            batch = [contexts[i] for i in schedule(it)]
            record = {"iteration": it, "lr": lr, "scenes": [c.scene.id for c in batch]}
            if variant == "colad":
                stage = list(mapper(colad_stage, batch))
                criterion = SwitchCriterion(config.strategy.criterion)
                score_a = network_score(
                    [e for s in stage for e in s[1][0]], [f for s in stage for f in s[2][0]], criterion
                )
                score_b = network_score(
                    [e for s in stage for e in s[1][1]], [f for s in stage for f in s[2][1]], criterion
                )
                teacher_id = choose_teacher(score_a, score_b)
                ti = 0 if teacher_id == "A" else 1
                decision = RoleDecision(teacher_id, score_a, score_b, criterion, it)
                labels = [
                    assign_from_costs(len(grid), s[1][ti], s[2][ti], tc.positive_rule).labels for s in stage
                ]

                def loss_job(args, net_index):
                    ctx, lab, s = args
                    net = params if net_index == 0 else partner
                    return scene_terms(net, ctx, grid, config, lab, False, s[0][net_index])

                jobs = list(zip(batch, labels, stage))
                terms_a = list(mapper(lambda a: loss_job(a, 0), jobs))
                terms_b = list(mapper(lambda a: loss_job(a, 1), jobs))
                losses_a, grads_a, npos = reduce_terms(params, terms_a)
                losses_b, grads_b, _ = reduce_terms(partner, terms_b)
                _check_finite(it, losses_a, "a.")
                _check_finite(it, losses_b, "b.")
                opt.step(grads_a, lr)
                opt_b.step(grads_b, lr)
                record.update(loss=losses_a, loss_b=losses_b, num_pos=npos, role=decision.to_dict())
            else:
                if variant in ("lad", "solad"):
                    terms = list(mapper(teacher_assignment_terms, batch))
                else:
                    terms = list(mapper(lambda c: own_assignment_terms(c, params), batch))
                losses, grads, npos = reduce_terms(params, terms)
                _check_finite(it, losses)
                opt.step(grads, lr)
                record.update(loss=losses, num_pos=npos)
            for name, net in (("params", params), ("partner", partner)):
                if net is not None and not all(np.isfinite(v).all() for v in net.arrays.values()):
                    raise NumericalAbort(it, name, float("nan"))
            if tc.eval_every and (it + 1) % tc.eval_every == 0:
                subset = contexts[:EVAL_SUBSET]
                record["eval"] = {"AP50": evaluate_contexts(params, subset, grid, config).ap50}
                if partner is not None:
                    record["eval_b"] = {"AP50": evaluate_contexts(partner, subset, grid, config).ap50}
            history.append(record)
            if callback is not None:
                callback(record, params, partner)
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(params, history, partner)


def detect_contexts(params: ModelParams, contexts: Sequence[SceneContext], grid: AnchorGrid, config: ExperimentConfig) -> list:
    dets = []
    use_iou = config.fusion.use_iou_head_at_inference
    for ctx in contexts:
        out = forward(params, ctx.features, grid, config.fusion.mode)
        dets.extend(
            detections_from_output(
                ctx.scene.id, out.scored, out.boxes, config.eval, out.iou_pred if use_iou else None
            )
        )
    return dets


def evaluate_contexts(params, contexts, grid, config) -> MetricsReport:
    dets = detect_contexts(params, contexts, grid, config)
    return evaluate_detections(dets, [c.scene for c in contexts], config.world.num_classes)


def evaluate_model(params: ModelParams, scenes: Sequence[Scene], config: ExperimentConfig) -> MetricsReport:
    """Detect on ``scenes`` and score against their ground truth."""
    grid = generate_anchors(config.anchors)
    check_params(params, num_features(config.world.num_classes), config.fusion.mode)
    return evaluate_contexts(params, build_contexts(config, scenes, grid), grid, config)
