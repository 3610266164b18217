"""The seeded end-to-end comparison of all strategies.

One teacher (a longer baseline run) feeds the soft-label, LAD and SoLAD
students. The CoLAD pair is compared with two independently trained
baselines started from the same initial parameters as networks A and B.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

from .config import ExperimentConfig, TrainConfig, WorldConfig
from .evaluation import MetricsReport
from .io import metrics_csv_row
from .simenv.train import evaluate_model, train
from .simenv.world import generate_dataset

logger = logging.getLogger(__name__)

TRAIN_SCENES = 200
EVAL_SCENES = 100
TEACHER_ITERS = 4000


@dataclass
class BenchmarkResult:
    reports: dict = field(default_factory=dict)
    histories: dict = field(default_factory=dict)

    def ap50(self, run: str) -> float:
        return self.reports[run].ap50

    def delta(self, run: str, reference: str) -> float:
        return self.reports[run].ap50 - self.reports[reference].ap50

    def csv_rows(self, seed: int) -> list[dict]:
        refs = {
            "soft_label": "baseline",
            "lad": "baseline",
            "solad": "baseline",
            "colad_a": "baseline",
            "colad_b": "baseline_b",
        }
        rows = []
        for run, rep in self.reports.items():
            row = metrics_csv_row(run, run.split("_")[0] if run.startswith("colad") else run, seed, rep)
            ref = refs.get(run)
            row["delta_AP50"] = "" if ref is None else self.delta(run, ref)
            row["reference"] = ref or ""
            rows.append(row)
        return rows


def benchmark_config(seed: int = 42, iterations: int = 2000, workers: int = 1) -> ExperimentConfig:
    return ExperimentConfig(
        train=TrainConfig(seed=seed, iterations=iterations, workers=workers),
        world=WorldConfig(num_classes=3, noise_sigma=0.25),
    )


def run_benchmark(
    seed: int = 42,
    iterations: int = 2000,
    teacher_iterations: int = TEACHER_ITERS,
    workers: int = 1,
    train_scenes: int = TRAIN_SCENES,
    eval_scenes: int = EVAL_SCENES,
    base: Optional[ExperimentConfig] = None,
) -> BenchmarkResult:
    cfg = base if base is not None else benchmark_config(seed, iterations, workers)
    cfg = cfg.with_train(seed=seed, iterations=iterations, workers=workers)
    scenes = generate_dataset(cfg.world, seed, train_scenes)
    held_out = generate_dataset(cfg.world, seed, eval_scenes, start_id=train_scenes)
    out = BenchmarkResult()

    def record(name: str, params, history) -> MetricsReport:
        rep = evaluate_model(params, held_out, cfg)
        out.reports[name] = rep
        if history is not None:
            out.histories[name] = history
        logger.info("%s AP50=%s mAP=%s", name, rep.ap50, rep.map)
        return rep

    teacher = train(cfg.with_train(iterations=teacher_iterations), scenes)
    record("teacher", teacher.params, teacher.history)
    base_run = train(cfg, scenes)
    record("baseline", base_run.params, base_run.history)
    for variant in ("soft_label", "lad", "solad"):
        run = train(cfg.with_strategy(variant=variant), scenes, teacher=teacher.params)
        record(variant, run.params, run.history)
    co = train(cfg.with_strategy(variant="colad"), scenes)
    record("colad_a", co.params, co.history)
    record("colad_b", co.partner, None)
    base_b = train(cfg.with_train(init_index=cfg.train.init_index + 1), scenes)
    record("baseline_b", base_b.params, base_b.history)
    return out
