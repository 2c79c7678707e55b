"""Command-line entry point: synth, train, eval, predict, gradcheck, ablate.

Exit codes: 0 success, 1 invalid input or config, 2 numeric failure,
3 file-system or format error. Errors are written to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import checks
from .data import SyntheticSpec, generate_synthetic, read_split, write_dataset
from .metadata import Task, ValidationError
from .metrics import ConfusionCounts, change_counts, scores_from_counts
from .model import ModelConfig, STSUN, canonical_json, load_checkpoint, save_checkpoint
from .tensor import NonFiniteError
from .training import TrainPlan, TrainSet, evaluate, metrics_csv, predict_dataset, remap_labels, train

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

_int_pair = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2}

MODEL_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        **{k: {"type": "integer", "minimum": 1} for k in
           ("H", "W", "T", "C_e", "C_a", "heads", "mlp_ratio", "hyper_heads")},
        **{k: {"type": "integer", "minimum": 0} for k in ("encoder_depth", "decoder_depth", "hyper_depth")},
        "horizontal_window": _int_pair,
        "vertical_window": _int_pair,
        "square_window": _int_pair,
        "stride_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "attention": {"enum": ["lgwa", "global"]},
        "unification": {"enum": ["decoupled", "coupled"]},
        "input_positional": {"type": "boolean"},
        "categories": {"type": "array", "items": {"type": "string"}, "minItems": 1, "uniqueItems": True},
    },
}

TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "factor": {"type": "number", "exclusiveMinimum": 0},
        "patience": {"type": "integer", "minimum": 1},
        "max_epochs": {"type": "integer", "minimum": 1},
        "max_steps": {"type": ["integer", "null"], "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "augment": {"type": "boolean"},
        "target_f1": {"type": ["number", "null"]},
        "loss": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"type": "number", "minimum": 0} for k in ("bce_weight", "dice_weight", "dice_smooth")},
        },
    },
}

RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["datasets", "output_dir"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string", "minLength": 1},
        "model": MODEL_SCHEMA,
        "train": TRAIN_SCHEMA,
        "datasets": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["path"],
                "properties": {
                    "name": {"type": "string", "minLength": 1},
                    "path": {"type": "string", "minLength": 1},
                    "task": {"enum": ["SS", "BCD", "SCD"]},
                    "categories": {"type": "array", "items": {"type": "string"}, "minItems": 1,
                                   "uniqueItems": True},
                },
            },
        },
    },
}


class RunConfig:
    """Validated run description; the seed drives both initialisation and sampling."""

    def __init__(self, raw: dict, base: Path = Path(".")):
        try:
            jsonschema.validate(raw, RUN_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ValidationError(f"run config at {where}: {exc.message}") from None
        self.raw = raw
        self.seed = raw.get("seed", 0)
        self.output_dir = Path(raw["output_dir"])
        self.model = ModelConfig.from_dict({**raw.get("model", {}), "seed": self.seed})
        self.train = TrainPlan.from_dict({**raw.get("train", {}), "seed": self.seed})
        self.datasets = []
        for i, d in enumerate(raw["datasets"]):
            self.datasets.append({"name": d.get("name", Path(d["path"]).name or f"dataset{i}"),
                                  "path": base / d["path"], "task": d.get("task"),
                                  "categories": d.get("categories")})

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path} is not valid JSON: {exc}") from None
        return cls(raw)

    def with_model(self, **overrides) -> "RunConfig":
        raw = json.loads(json.dumps(self.raw))
        raw.setdefault("model", {}).update(overrides)
        return RunConfig(raw)


def _threads() -> int:
    value = os.environ.get("STSUN_THREADS", "1")
    try:
        n = int(value)
    except ValueError:
        raise ValidationError(f"STSUN_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise ValidationError("STSUN_THREADS must be >= 1")
    return n


def _load_sets(cfg: RunConfig) -> list:
    sets = []
    for d in cfg.datasets:
        tr = read_split(d["path"] / "train")
        val = read_split(d["path"] / "val") if (d["path"] / "val" / "meta.json").exists() else None
        if d["task"] is not None and Task.parse(d["task"]).value != tr.manifest.task:
            raise ValidationError(f"dataset {d['name']!r} declares task {d['task']} but holds {tr.manifest.task}")
        sets.append(TrainSet(d["name"], tr, val, d["categories"]))
    return sets


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def run_training(cfg: RunConfig, out: Path) -> dict:
    sets = _load_sets(cfg)
    model = STSUN(cfg.model)
    result = train(model, sets, cfg.train)
    model.store.load_state(result.best_state)
    opt_state, opt_arrays = result.optimizer.state()
    state = {"steps": result.steps, "best_epoch": result.best_epoch, "best_mean_f1": result.best_f1,
             "optimizer": opt_state, "scheduler": result.scheduler.state(), "train": cfg.train.to_dict()}
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.stsn", model, state, opt_arrays)
    _write(out / "metrics.csv", result.csv())
    (out / "run.json").write_bytes(canonical_json(cfg.raw))
    return {"model": model, "sets": sets, "result": result}


def cmd_synth(args) -> dict:
    try:
        raw = json.loads(Path(args.spec).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{args.spec} is not valid JSON: {exc}") from None
    spec = SyntheticSpec.from_dict(raw)
    splits = generate_synthetic(spec)
    write_dataset(args.out, splits)
    return {"out": str(args.out), "splits": {k: len(v) for k, v in splits.items()}}


def cmd_train(args) -> dict:
    cfg = RunConfig.load(args.config)
    out = Path(args.out) if args.out else cfg.output_dir
    r = run_training(cfg, out)["result"]
    return {"out": str(out), "steps": r.steps, "best_epoch": r.best_epoch, "best_mean_f1": r.best_f1}


def _resolve_categories(model: STSUN, text: str) -> list:
    names = []
    for tok in text.split(","):
        tok = tok.strip()
        if tok.lstrip("-").isdigit():
            cid = int(tok)
            model.registry.check_category(cid)
            names.append(model.registry.categories[cid])
        else:
            model.registry.category_id(tok)
            names.append(tok)
    return names


EVAL_COLUMNS = ("dataset", "task", "split", "category", "P", "R", "F1", "IoU", "OA", "SCS", "BC", "SC")


def eval_csv(model: STSUN, ds, categories=None, split: str = "test") -> str:
    m = ds.manifest
    cats = list(categories) if categories is not None else m.categories
    binary = len(cats) == 1
    labels = ds.labels if binary else remap_labels(ds.labels, m.categories, cats)
    pred = predict_dataset(model, ds, cats)
    n_cls = 2 if binary else len(cats)
    sc = scores_from_counts(ConfusionCounts.from_maps(pred, labels, n_cls), [1] if binary else None)
    change = None
    if not binary and m.T2 >= 2:
        change = change_counts(pred, labels, n_cls).result()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_COLUMNS)
    for c in sc.per_class:
        name = cats[0] if binary else cats[c.index]
        w.writerow([m.name, m.task, split, name] + [repr(v) for v in (c.P, c.R, c.F1, c.IoU, c.OA)] + ["", "", ""])
    tail = [repr(v) for v in (change.SCS, change.BC, change.SC)] if change else ["", "", ""]
    w.writerow([m.name, m.task, split, "mean"] + [repr(v) for v in (sc.P, sc.R, sc.F1, sc.IoU, sc.OA)] + tail)
    return buf.getvalue()


def cmd_eval(args) -> dict:
    model, _, _ = load_checkpoint(args.ckpt)
    ds = read_split(Path(args.dataset) / args.split)
    cats = _resolve_categories(model, args.categories) if args.categories else None
    text = eval_csv(model, ds, cats, args.split)
    if args.out:
        _write(Path(args.out) / "metrics.csv", text)
    sys.stdout.write(text)
    return None


def _pgm(path: Path, img: np.ndarray, levels: int):
    h, w = img.shape
    scale = 255 // max(levels - 1, 1)
    body = (img.astype(np.int64) * scale).astype(np.uint8).tobytes()
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + body)


def cmd_predict(args) -> dict:
    model, _, _ = load_checkpoint(args.ckpt)
    ds = read_split(Path(args.dataset) / args.split)
    cats = _resolve_categories(model, args.categories) if args.categories else ds.manifest.categories
    pred = predict_dataset(model, ds, cats).astype(np.uint8)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "labels.u8").write_bytes(np.ascontiguousarray(pred).tobytes())
    info = {"format": "stsun-predictions/1", "shape": list(pred.shape), "categories": list(cats),
            "binary": len(cats) == 1, "dataset": ds.manifest.name, "split": args.split}
    (out / "predictions.json").write_bytes(canonical_json(info))
    if args.pgm:
        levels = 2 if len(cats) == 1 else len(cats)
        (out / "pgm").mkdir(exist_ok=True)
        for i, t in itertools.product(range(pred.shape[0]), range(pred.shape[1])):
            _pgm(out / "pgm" / f"sample{i:04d}_t{t}.pgm", pred[i, t], levels)
    return {"out": str(out), "shape": list(pred.shape)}


def cmd_gradcheck(args) -> dict:
    try:
        results = checks.run(args.module)
    except KeyError as exc:
        raise ValidationError(exc.args[0]) from None
    print(f"{'module':<20} {'check':<22} {'rel.err':>10}  result")
    for r in results:
        print(f"{r.module:<20} {r.name:<22} {r.error:>10.2e}  {'pass' if r.passed else 'FAIL'}")
    failed = [f"{r.module}/{r.name}" for r in results if not r.passed]
    if failed:
        raise _CheckFailure(failed)
    return None


class _CheckFailure(Exception):
    pass


ABLATION_COLUMNS = ("unification", "attention", "dataset", "task", "steps", "loss", "P", "R", "F1", "IoU", "OA")


def _parse_grid(items) -> dict:
    grid = {}
    for item in items:
        key, sep, values = item.partition("=")
        if not sep or key not in ("unification", "attention") or not values:
            raise ValidationError(f"bad --grid entry {item!r}; expected unification=... or attention=...")
        grid[key] = [v for v in values.split(",") if v]
    grid.setdefault("unification", ["coupled", "decoupled"])
    grid.setdefault("attention", ["global", "lgwa"])
    return grid


def cmd_ablate(args) -> dict:
    cfg = RunConfig.load(args.config)
    grid = _parse_grid(args.grid or [])
    out = Path(args.out) if args.out else cfg.output_dir
    rows = []
    for uni, att in itertools.product(grid["unification"], grid["attention"]):
        cell = cfg.with_model(unification=uni, attention=att)
        run = run_training(cell, out / f"{uni}-{att}")
        model, result = run["model"], run["result"]
        for s in run["sets"]:
            test_path = Path(next(d["path"] for d in cell.datasets if d["name"] == s.name)) / "test"
            ds = read_split(test_path) if (test_path / "meta.json").exists() else (s.val or s.train)
            sc = evaluate(model, ds, s.categories)
            losses = [r["loss"] for r in result.rows if r["dataset"] == s.name]
            rows.append([uni, att, s.name, s.task.value, str(result.steps), repr(float(losses[-1])),
                         *[repr(v) for v in (sc.P, sc.R, sc.F1, sc.IoU, sc.OA)]])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    w.writerows(rows)
    _write(out / "ablation.csv", buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stsun", description="Metadata-conditioned segmentation and change detection.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train from a run config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="override output_dir")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--categories", help="comma-separated registry ids or names")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("predict", help="write predicted class maps")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--categories")
    s.add_argument("--out", required=True)
    s.add_argument("--pgm", action="store_true", help="also write one PGM raster per sample and frame")
    s.set_defaults(fn=cmd_predict)

    s = sub.add_parser("gradcheck", help="run registered finite-difference checks")
    s.add_argument("--module", choices=checks.modules())
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("ablate", help="train the unification x attention grid")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", nargs="*", metavar="KEY=V1,V2")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_ablate)
    return p


def _fail(code: int, kind: str, exc) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        # overflow surfaces as NonFiniteError; numpy's own warnings would only add noise
        with threadpool_limits(limits=_threads()), np.errstate(all="ignore"):
            summary = args.fn(args)
    except ValidationError as exc:
        return _fail(EXIT_INVALID, "validation", exc)
    except NonFiniteError as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    except _CheckFailure as exc:
        return _fail(EXIT_NUMERIC, "gradcheck", "failed: " + ", ".join(exc.args[0]))
    except OSError as exc:
        return _fail(EXIT_IO, "io", exc)
    if summary is not None:
        print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
