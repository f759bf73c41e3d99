"""Command-line entry point: generate, train, eval, register, gradcheck, bench."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import bench, experiment, geom, gradcheck
from .experiment import NumericalError, RunConfig
from .metrics import MetricRecord, write_csv, write_jsonl
from .models import load_model, save_model

log = logging.getLogger("hdconv")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _config(args, base: dict | None = None) -> RunConfig:
    try:
        values = dict(base or {})
        if getattr(args, "config", None):
            try:
                with open(args.config) as fh:
                    loaded = yaml.safe_load(fh) or {}
            except OSError as exc:
                raise DataError(f"cannot read config: {exc}") from exc
            if not isinstance(loaded, dict):
                raise ConfigError(f"{args.config}: top level must be a mapping")
            values = _deep_update(values, loaded)
        overrides = list(args.overrides or [])
        if args.workers is not None:
            overrides.append(f"workers={args.workers}")
        return experiment.make_config(values, overrides)
    except (ValueError, TypeError, yaml.YAMLError) as exc:
        raise ConfigError(str(exc)) from exc


def _deep_update(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        nested = isinstance(v, dict) and isinstance(out.get(k), dict)
        out[k] = _deep_update(out[k], v) if nested else v
    return out


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _scenes(cfg: RunConfig, data_dir, split: str) -> list[geom.Dataset]:
    """Scenes from a generated dataset directory, or generated in memory."""
    if data_dir is None:
        return experiment.generate_scenes(cfg, split)
    manifest_path = Path(data_dir) / "manifest.json"
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        files = [Path(data_dir) / e["file"] for e in manifest["splits"].get(split, [])]
        scenes = [geom.load_dataset(f) for f in files]
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot load {split} split from {data_dir}: {exc}") from exc
    if manifest.get("config", {}).get("task") not in (None, cfg.task):
        raise ConfigError(f"dataset task {manifest['config']['task']!r} != {cfg.task!r}")
    return scenes


def _records(cfg: RunConfig, model: str, values: dict) -> list[MetricRecord]:
    return [MetricRecord(cfg.task, model, cfg.seed, k, float(v)) for k, v in values.items()]


def _report(out: Path, stem: str, records: list[MetricRecord]) -> None:
    write_jsonl(out / f"{stem}.jsonl", records)
    write_csv(out / f"{stem}.csv", records)
    for r in records:
        print(f"{r.task}\t{r.model}\t{r.metric}\t{r.value:.6g}")


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = _outdir(args.out or cfg.output)
    manifest = {"config": cfg.to_dict(), "seed": cfg.seed, "format": args.format, "splits": {}}
    ext = "hdds" if args.format == "binary" else "csv"
    totals = {"inliers": 0, "outliers": 0}
    for split in ("train", "eval"):
        n = cfg.data.scenes if split == "train" else cfg.data.eval_scenes
        seeds = experiment.scene_seeds(cfg.seed, f"dataset/{split}", n)
        (out / split).mkdir(exist_ok=True)
        entries = []
        for i, seed in enumerate(seeds):
            ds = experiment.generate_scene(cfg, seed)
            name = f"{split}/scene_{i:04d}.{ext}"
            geom.save_dataset(out / name, ds, args.format)
            n_in = int(ds.labels.sum())
            entries.append({"file": name, "seed": seed, "points": len(ds), "inliers": n_in,
                            "outliers": len(ds) - n_in, "inlier_ratio": n_in / max(len(ds), 1)})
            totals["inliers"] += n_in
            totals["outliers"] += len(ds) - n_in
        manifest["splits"][split] = entries
    total = totals["inliers"] + totals["outliers"]
    manifest["label_counts"] = dict(totals, inlier_ratio=totals["inliers"] / max(total, 1))
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {sum(len(v) for v in manifest['splits'].values())} scenes to {out} "
          f"(inlier ratio {manifest['label_counts']['inlier_ratio']:.4f})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _outdir(args.out or cfg.output)
    model = cfg.train.model
    train_scenes = _scenes(cfg, args.data, "train")
    eval_scenes = _scenes(cfg, args.data, "eval")
    if cfg.train.steps and not train_scenes:
        raise ConfigError("no training scenes")
    net = experiment.new_network(cfg, model)
    batches = experiment.make_batches(cfg, train_scenes, model) if cfg.train.steps else []
    eval_batches = experiment.make_batches(cfg, eval_scenes, model) if eval_scenes else []

    def progress(rec):
        if "eval_f1" in rec:
            log.info("step %d loss %.4f eval f1 %.4f", rec["step"], rec["loss"], rec["eval_f1"])

    history = experiment.train(net, batches, cfg, out / "train_log.jsonl", eval_batches, progress)
    save_model(out / "model.ckpt", net, cfg.to_dict())
    values = {"final_loss": history[-1]["loss"]} if history else {}
    if eval_batches:
        values.update(experiment.evaluate(net, eval_batches))
    values["parameters"] = net.num_parameters()
    _report(out, "train_metrics", _records(cfg, model, values))
    _write_json(out / "manifest.json", {"command": "train", "config": cfg.to_dict(),
                                        "checkpoint": "model.ckpt", "steps": len(history),
                                        "data": str(args.data) if args.data else None})
    return EXIT_OK


def _load_checkpoint(args):
    try:
        net, meta = load_model(args.checkpoint, with_meta=True)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    cfg = _config(args, meta.get("run"))
    if cfg.network.to_dict() != net.config.to_dict():
        raise ConfigError("network overrides do not match the checkpoint architecture")
    return net, cfg


def cmd_eval(args) -> int:
    net, cfg = _load_checkpoint(args)
    out = _outdir(args.out or cfg.output)
    scenes = _scenes(cfg, args.data, args.split)
    if not scenes:
        raise ConfigError(f"no scenes in the {args.split} split")
    prepared = experiment.make_batches(cfg, scenes, net.kind)
    _report(out, "eval_metrics", _records(cfg, net.kind, experiment.evaluate(net, prepared)))
    return EXIT_OK


def cmd_register(args) -> int:
    net, cfg = _load_checkpoint(args)
    if cfg.task != "reg3d":
        raise ConfigError("register needs a reg3d checkpoint")
    out = _outdir(args.out or cfg.output)
    scenes = _scenes(cfg, args.data, args.split)
    if not scenes:
        raise ConfigError(f"no scenes in the {args.split} split")
    rows = experiment.register_scenes(scenes, net, cfg, args.iterations,
                                      args.rot_thresh, args.trans_thresh)
    records = [MetricRecord(cfg.task, name, cfg.seed, k, float(v))
               for name, row in rows.items() for k, v in row.items()]
    write_jsonl(out / "register.jsonl", records)
    write_csv(out / "register.csv", records)
    keys = ["success_rate", "rotation_error", "translation_error", "inlier_ratio"]
    print("method".ljust(16) + "".join(k.rjust(19) for k in keys))
    for name, row in rows.items():
        print(name.ljust(16) + "".join(f"{row[k]:19.4f}" for k in keys))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(args.instances, args.seed)
    ok = True
    for r in results:
        ok &= r.passed
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<24} max rel err {r.max_rel_error:.3e}"
              f"  (tol {r.tol:.0e}, {r.instances} instances)")
    if args.out:
        out = _outdir(args.out)
        write_jsonl(out / "gradcheck.jsonl", [
            {"layer": r.name, "max_rel_error": r.max_rel_error, "instances": r.instances,
             "tol": r.tol, "passed": r.passed} for r in results])
    return EXIT_OK if ok else EXIT_FAILED


def cmd_bench(args) -> int:
    rows = bench.run(args.quick, args.workers or 1, args.seed)
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    if args.out:
        out = _outdir(args.out)
        write_jsonl(out / "bench.jsonl", rows)
        fields = sorted({k for r in rows for k in r})
        with open(out / "bench.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fields)
            writer.writeheader()
            writer.writerows(rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hdconv", description=__doc__)
    p.add_argument("--workers", type=int, default=None, help="worker threads for kernel maps")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--out", help="output directory (default: config output)")
        sp.add_argument("overrides", nargs="*", metavar="key=value",
                        help="config overrides, e.g. data.dim=4 train.steps=100")

    g = sub.add_parser("generate", help="write synthetic scenes and a manifest")
    with_config(g)
    g.add_argument("--format", choices=("binary", "csv"), default="binary")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    with_config(t)
    t.add_argument("--data", help="dataset directory from `generate` (default: generate inline)")
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "inlier classification metrics"),
                              ("register", cmd_register, "RANSAC with and without filtering")):
        e = sub.add_parser(name, help=help_)
        with_config(e)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data")
        e.add_argument("--split", default="eval", choices=("train", "eval"))
        if name == "register":
            e.add_argument("--iterations", type=int, default=1000)
            e.add_argument("--rot-thresh", type=float, default=15.0)
            e.add_argument("--trans-thresh", type=float, default=0.30)
        e.set_defaults(func=func)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    gc.add_argument("--instances", type=int, default=20)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--out")
    gc.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="pooling scaling, kernel-map timings, matmul counts")
    b.add_argument("--quick", action="store_true", help="skip the largest sizes")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.workers is not None and args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
