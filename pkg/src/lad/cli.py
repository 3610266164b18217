"""Command-line experiment runner.

Subcommands: ``gen``, ``train``, ``eval``, ``assign``, ``gmm-fit``.
Exit codes: 0 success, 2 usage or configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .assign import EmptyCandidateWarning, assign_from_costs, score_objects
from .config import ConfigError, load_config
from .geometry import generate_anchors
from .gmm import fit_gmm2
from .io import (
    append_csv_row,
    load_checkpoint,
    metrics_csv_row,
    read_dataset,
    save_checkpoint,
    write_dataset,
    write_jsonl,
)
from .simenv.model import check_params, forward
from .simenv.train import NumericalAbort, build_contexts, evaluate_model, train
from .simenv.world import generate_dataset, num_features

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

logger = logging.getLogger("lad")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def cmd_gen(args) -> int:
    cfg = load_config(args.config)
    if args.count < 0:
        raise ConfigError("count", "must be >= 0")
    scenes = generate_dataset(cfg.world, cfg.train.seed, args.count, start_id=args.start_id)
    write_dataset(args.out, scenes)
    return EXIT_OK


def _load_dataset(path, cfg):
    if not Path(path).exists():
        raise ConfigError("dataset", f"file not found: {path}")
    return read_dataset(path, cfg.world)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.workers is not None:
        cfg = cfg.with_train(workers=args.workers)
        cfg.validate()
    scenes = _load_dataset(args.data, cfg)
    if not scenes:
        raise ConfigError("dataset", "training needs at least one scene")
    teacher = None
    if cfg.strategy.needs_teacher:
        path = cfg.strategy.teacher_path
        if not path:
            raise ConfigError("strategy.teacher_path", f"{cfg.strategy.variant} needs a teacher checkpoint")
        if not Path(path).exists():
            raise ConfigError("strategy.teacher_path", f"file not found: {path}")
        teacher = load_checkpoint(path, cfg)
    out = Path(args.out)
    history_path = Path(args.history) if args.history else out.with_name(out.name + ".history.jsonl")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyCandidateWarning)
        result = train(cfg, scenes, teacher=teacher)
    if result.partner is not None:
        save_checkpoint(out.with_name(out.name + ".a"), result.params, cfg)
        save_checkpoint(out.with_name(out.name + ".b"), result.partner, cfg)
    else:
        save_checkpoint(out, result.params, cfg)
    write_jsonl(history_path, result.history)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    params = load_checkpoint(args.checkpoint, cfg)
    scenes = _load_dataset(args.data, cfg)
    report = evaluate_model(params, scenes, cfg)
    _emit(report.to_dict())
    if args.csv:
        run_id = args.run_id or Path(args.checkpoint).name
        append_csv_row(args.csv, metrics_csv_row(run_id, cfg.strategy.variant, cfg.train.seed, report))
    return EXIT_OK


def assignment_dump(params, scene, cfg) -> dict:
    """Costs, mixture fits and resulting labels for one scene, as plain JSON data."""
    grid = generate_anchors(cfg.anchors)
    check_params(params, num_features(cfg.world.num_classes), cfg.fusion.mode)
    ctx = build_contexts(cfg, [scene], grid)[0]
    out = forward(params, ctx.features, grid, cfg.fusion.mode)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyCandidateWarning)
        table, fits = score_objects(
            out.predictions(), grid, scene.objects, cfg.train.gamma_assign, ctx.anchor_ious
        )
    assignment = assign_from_costs(len(grid), table, fits, cfg.train.positive_rule)
    objects = []
    for obj, entry, fit in zip(scene.objects, table, fits):
        d = entry.to_dict()
        d.update(
            {
                "class": obj.class_id,
                "box": obj.box.as_list(),
                "empty_candidates": len(entry.anchor_ids) == 0,
                "gmm": None
                if fit is None
                else {**fit.model.params(), "iterations": fit.iterations, "final_loglik": _finite(fit.final_loglik)},
                "positives": assignment.positives_of(entry.object_index).tolist(),
            }
        )
        objects.append(d)
    return {
        "scene_id": scene.id,
        "num_anchors": len(grid),
        "positive_rule": cfg.train.positive_rule,
        "objects": objects,
        "labels": assignment.labels.tolist(),
    }


def _finite(v: float):
    return v if np.isfinite(v) else None


def cmd_assign(args) -> int:
    cfg = load_config(args.config)
    params = load_checkpoint(args.checkpoint, cfg)
    scenes = {s.id: s for s in _load_dataset(args.data, cfg)}
    if args.scene not in scenes:
        raise ConfigError("scene", f"no scene with id {args.scene}")
    _emit(assignment_dump(params, scenes[args.scene], cfg))
    return EXIT_OK


def cmd_gmm_fit(args) -> int:
    text = sys.stdin.read() if args.costs == "-" else Path(args.costs).read_text(encoding="utf-8")
    try:
        costs = [float(tok) for tok in text.split()]
    except ValueError as exc:
        raise ConfigError("costs", f"not a number: {exc}") from None
    if not costs:
        raise ConfigError("costs", "no costs given")
    report = fit_gmm2(costs, tol=args.tol, max_iters=args.max_iters)
    _emit(
        {
            **report.model.params(),
            "iterations": report.iterations,
            "final_loglik": _finite(report.final_loglik),
            "n": len(costs),
        }
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lad", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--start-id", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train under the configured strategy")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--history", help="history JSONL path (default: <out>.history.jsonl)")
    t.add_argument("--workers", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--csv", help="append a metrics row to this CSV file")
    e.add_argument("--run-id")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("assign", help="dump costs, mixture fits and assignment for one scene")
    a.add_argument("--config", required=True)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--scene", type=int, required=True)
    a.set_defaults(func=cmd_assign)

    m = sub.add_parser("gmm-fit", help="fit the two-component mixture to newline-separated costs")
    m.add_argument("costs", nargs="?", default="-", help="file of costs, or - for stdin")
    m.add_argument("--tol", type=float, default=1e-6)
    m.add_argument("--max-iters", type=int, default=100)
    m.set_defaults(func=cmd_gmm_fit)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"lad: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"lad: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as exc:
        print(f"lad: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
