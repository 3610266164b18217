"""File formats: dataset JSONL, checkpoints, history JSONL, metrics CSV.

Every writer goes through :func:`atomic_write_text` (temp file + rename).
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable

import numpy as np

from .assign import LabeledObject
from .config import FORMAT_VERSION, ConfigError
from .geometry import Box

CSV_COLUMNS = ("run_id", "strategy", "seed", "AP50", "mAP", "tp", "fp", "fn", "loc_err")


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def write_jsonl(path, records: Iterable[dict]) -> None:
    atomic_write_text(path, dumps_jsonl(records))


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{lineno}", f"invalid JSON line: {exc}") from None
    return out


# -- scenes -----------------------------------------------------------------


def scene_to_dict(scene) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "id": scene.id,
        "seed": scene.seed,
        "objects": [{"class": o.class_id, "box": o.box.as_list()} for o in scene.objects],
    }


def scene_from_dict(d: dict, world=None):
    from .simenv.world import Scene

    try:
        objects = tuple(
            LabeledObject(int(o["class"]), Box.from_array(o["box"])) for o in d.get("objects", [])
        )
        kw = {}
        if world is not None:
            kw = {"width": world.width, "height": world.height}
        return Scene(id=int(d["id"]), objects=objects, seed=int(d["seed"]), **kw)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("dataset", f"malformed scene record {d!r}: {exc}") from None


def write_dataset(path, scenes) -> None:
    write_jsonl(path, (scene_to_dict(s) for s in scenes))


def read_dataset(path, world=None) -> list:
    return [scene_from_dict(d, world) for d in read_jsonl(path)]


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(path, params, config) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "config_hash": config.model_hash(),
        "params": {k: np.asarray(v).tolist() for k, v in sorted(params.arrays.items())},
    }
    atomic_write_text(path, json.dumps(payload, sort_keys=True) + "\n")


def load_checkpoint(path, config=None):
    """Load parameters; when ``config`` is given, its model hash must match."""
    from .simenv.model import ModelParams

    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("checkpoint", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("checkpoint", f"invalid JSON in {path}: {exc}") from None
    if payload.get("format_version") != FORMAT_VERSION:
        raise ConfigError("checkpoint", f"unsupported format_version in {path}")
    if config is not None and payload.get("config_hash") != config.model_hash():
        raise ConfigError(
            "checkpoint", f"{path} was trained with an incompatible world/anchor/head config"
        )
    return ModelParams({k: np.asarray(v, dtype=float) for k, v in payload["params"].items()})


# -- metrics ----------------------------------------------------------------


def _csv_cell(v):
    return "" if v is None else v


def metrics_csv_row(run_id: str, strategy: str, seed: int, report) -> dict:
    c = report.counts
    return {
        "run_id": run_id,
        "strategy": strategy,
        "seed": seed,
        "AP50": _csv_cell(report.ap50),
        "mAP": _csv_cell(report.map),
        "tp": c["tp"],
        "fp": c["fp"],
        "fn": c["fn"],
        "loc_err": c["loc_err"],
    }


def append_csv_row(path, row: dict, columns=CSV_COLUMNS) -> None:
    """Append one row, writing a header first when the file is new or empty."""
    path = Path(path)
    existing = path.read_text(encoding="utf-8") if path.exists() else ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    if not existing:
        writer.writeheader()
    writer.writerow(row)
    atomic_write_text(path, existing + buf.getvalue())
