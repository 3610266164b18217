"""Experiment configuration: dataclasses, JSON round-trip and validation.

Validation failures raise :class:`ConfigError`, whose ``field`` attribute is
the dotted path of the offending entry (``"train.seed"``); the CLI turns
that into exit code 2.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

from .geometry import AnchorLevel

FORMAT_VERSION = 1

STRATEGIES = ("baseline", "soft_label", "lad", "solad", "colad")
TEACHER_STRATEGIES = ("soft_label", "lad", "solad")
DISTILL_LOSSES = ("kl", "l1", "l2")
CRITERIA = ("std_over_mean", "fisher")
FUSION_MODES = ("none", "iop", "cop")
POSITIVE_RULES = ("below_mean", "posterior")


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _default_levels() -> tuple:
    return (
        AnchorLevel(stride=4, scale=8, rows=16, cols=16),
        AnchorLevel(stride=8, scale=16, rows=8, cols=8),
        AnchorLevel(stride=16, scale=32, rows=4, cols=4),
    )


@dataclass(frozen=True)
class WorldConfig:
    width: float = 64.0
    height: float = 64.0
    num_classes: int = 3
    max_objects: int = 3
    size_range: tuple = (8.0, 24.0)
    noise_sigma: float = 0.25

    def validate(self) -> None:
        if not (self.width >= 32 and self.height >= 32):
            raise ConfigError("world.width", "canvas must be at least 32x32")
        if self.num_classes < 1:
            raise ConfigError("world.num_classes", "need at least one class")
        if self.max_objects < 1:
            raise ConfigError("world.max_objects", "must be >= 1")
        lo, hi = self.size_range
        if not (0 < lo <= hi):
            raise ConfigError("world.size_range", "need 0 < min <= max")
        if lo > min(self.width, self.height):
            raise ConfigError("world.size_range", "minimum object size exceeds the canvas")
        if self.noise_sigma < 0:
            raise ConfigError("world.noise_sigma", "must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    iterations: int = 2000
    warmup_iters: Optional[int] = None
    batch_scenes: int = 2
    gamma_assign: float = 2.0
    gamma_distill: float = 0.5
    workers: int = 1
    iou_head: bool = True
    positive_rule: str = "below_mean"
    eval_every: int = 0
    init_index: int = 0

    def validate(self) -> None:
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError("train.seed", "seed must be a non-negative integer")
        if self.lr < 0:
            raise ConfigError("train.lr", "must be >= 0")
        if self.iterations < 0:
            raise ConfigError("train.iterations", "must be >= 0")
        if self.warmup_iters is not None and self.warmup_iters < 0:
            raise ConfigError("train.warmup_iters", "must be >= 0")
        if self.batch_scenes < 1:
            raise ConfigError("train.batch_scenes", "must be >= 1")
        if self.gamma_assign < 0:
            raise ConfigError("train.gamma_assign", "must be >= 0")
        if self.gamma_distill < 0:
            raise ConfigError("train.gamma_distill", "must be >= 0")
        if self.workers < 1:
            raise ConfigError("train.workers", "must be >= 1")
        if self.positive_rule not in POSITIVE_RULES:
            raise ConfigError("train.positive_rule", f"expected one of {POSITIVE_RULES}")
        if self.eval_every < 0:
            raise ConfigError("train.eval_every", "must be >= 0")


@dataclass(frozen=True)
class StrategyConfig:
    variant: str = "baseline"
    teacher_path: Optional[str] = None
    distill_loss: str = "kl"
    criterion: str = "std_over_mean"

    def validate(self) -> None:
        if self.variant not in STRATEGIES:
            raise ConfigError("strategy.variant", f"expected one of {STRATEGIES}")
        if self.distill_loss not in DISTILL_LOSSES:
            raise ConfigError("strategy.distill_loss", f"expected one of {DISTILL_LOSSES}")
        if self.criterion not in CRITERIA:
            raise ConfigError("strategy.criterion", f"expected one of {CRITERIA}")

    @property
    def needs_teacher(self) -> bool:
        return self.variant in TEACHER_STRATEGIES


@dataclass(frozen=True)
class FusionConfig:
    mode: str = "none"
    use_iou_head_at_inference: bool = False

    def validate(self) -> None:
        if self.mode not in FUSION_MODES:
            raise ConfigError("fusion.mode", f"expected one of {FUSION_MODES}")


@dataclass(frozen=True)
class EvalConfig:
    nms_iou: float = 0.6
    score_floor: float = 0.05
    max_dets: int = 100

    def validate(self) -> None:
        if not 0 <= self.nms_iou <= 1:
            raise ConfigError("eval.nms_iou", "must lie in [0, 1]")
        if not 0 <= self.score_floor <= 1:
            raise ConfigError("eval.score_floor", "must lie in [0, 1]")
        if self.max_dets < 1:
            raise ConfigError("eval.max_dets", "must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig
    world: WorldConfig = field(default_factory=WorldConfig)
    anchors: tuple = field(default_factory=_default_levels)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "ExperimentConfig":
        self.world.validate()
        if not self.anchors:
            raise ConfigError("anchors.levels", "at least one level is required")
        self.train.validate()
        self.strategy.validate()
        self.fusion.validate()
        self.eval.validate()
        return self

    @property
    def warmup_iters(self) -> int:
        """Configured warm-up, or the strategy default (3000 for soft-label, else 500)."""
        if self.train.warmup_iters is not None:
            return self.train.warmup_iters
        return 3000 if self.strategy.variant == "soft_label" else 500

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)

    def with_train(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **kw))

    def with_strategy(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, strategy=dataclasses.replace(self.strategy, **kw))

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "world": {**dataclasses.asdict(self.world), "size_range": list(self.world.size_range)},
            "anchors": {"levels": [dataclasses.asdict(lvl) for lvl in self.anchors]},
            "train": dataclasses.asdict(self.train),
            "strategy": dataclasses.asdict(self.strategy),
            "fusion": dataclasses.asdict(self.fusion),
            "eval": dataclasses.asdict(self.eval),
        }

    def model_hash(self) -> str:
        """Hash of the fields that fix parameter shapes and feature semantics."""
        d = self.to_dict()
        key = {
            "world": d["world"],
            "anchors": d["anchors"],
            "fusion_mode": self.fusion.mode,
            "iou_head": self.train.iou_head,
        }
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config", "top level must be a JSON object")
        version = d.get("format_version", FORMAT_VERSION)
        if version != FORMAT_VERSION:
            raise ConfigError("format_version", f"unsupported version {version!r}")
        train_d = _section(d, "train")
        if "seed" not in train_d:
            raise ConfigError("train.seed", "seed is mandatory")
        world = _build(WorldConfig, _section(d, "world"), "world")
        if isinstance(world.size_range, list):
            world = dataclasses.replace(world, size_range=tuple(world.size_range))
        anchors_d = _section(d, "anchors")
        levels_raw = anchors_d.get("levels")
        if levels_raw is None:
            levels = _default_levels()
        else:
            if not isinstance(levels_raw, list):
                raise ConfigError("anchors.levels", "must be a list")
            levels = []
            for i, lvl in enumerate(levels_raw):
                try:
                    levels.append(AnchorLevel(**lvl))
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"anchors.levels[{i}]", str(exc)) from None
            levels = tuple(levels)
        cfg = cls(
            train=_build(TrainConfig, train_d, "train"),
            world=world,
            anchors=levels,
            strategy=_build(StrategyConfig, _section(d, "strategy"), "strategy"),
            fusion=_build(FusionConfig, _section(d, "fusion"), "fusion"),
            eval=_build(EvalConfig, _section(d, "eval"), "eval"),
        )
        return cfg.validate()


def _section(d: dict, name: str) -> dict:
    sec = d.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(name, "must be a JSON object")
    return sec


def _build(klass, d: dict, prefix: str):
    known = {f.name: f for f in dataclasses.fields(klass)}
    for k in d:
        if k not in known:
            raise ConfigError(f"{prefix}.{k}", "unknown field")
    for k, v in d.items():
        ftype = str(known[k].type)
        if v is None:
            if "Optional" not in ftype:
                raise ConfigError(f"{prefix}.{k}", "may not be null")
            continue
        if ("int" in ftype or "float" in ftype) and (
            isinstance(v, bool) or not isinstance(v, (int, float))
        ):
            raise ConfigError(f"{prefix}.{k}", f"expected a number, got {type(v).__name__}")
        if ftype == "int" and isinstance(v, float):
            raise ConfigError(f"{prefix}.{k}", "expected an integer")
        if ftype == "bool" and not isinstance(v, bool):
            raise ConfigError(f"{prefix}.{k}", "expected true or false")
        if ftype == "str" and not isinstance(v, str):
            raise ConfigError(f"{prefix}.{k}", "expected a string")
    return klass(**d)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from None
    return ExperimentConfig.from_dict(raw)
