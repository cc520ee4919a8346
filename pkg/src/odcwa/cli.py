"""Command-line entry point.

Every ``TrainConfig`` field can be overridden with ``--key value`` after a
subcommand, e.g. ``odcwa train --config cfg.json --mode OD-SN --k_max 500``.
Exit codes: 0 success, 1 usage error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import pipeline
from .model import params_from_json, params_to_json
from .numerics import NumericalError
from .openset_eval import read_dump, score_records, write_metrics_csv

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


def _coerce(field: dataclasses.Field, raw: str):
    default = field.default
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"--{field.name} expects a boolean, got {raw!r}")
    if isinstance(default, tuple):
        try:
            vals = json.loads(raw) if raw.strip().startswith("[") else raw.split(",")
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in vals)
        except ValueError as exc:
            raise UsageError(f"--{field.name}: {exc}") from None
    if isinstance(default, (int, float)):
        try:
            return int(raw) if isinstance(default, int) else float(raw)
        except ValueError:
            raise UsageError(f"--{field.name} expects a number, got {raw!r}") from None
    return raw


def parse_overrides(tokens: list[str]) -> dict:
    fields = {f.name: f for f in dataclasses.fields(pipeline.TrainConfig)}
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise UsageError(f"--{key} needs a value")
            raw = tokens[i + 1]
            i += 2
        if key not in fields:
            raise UsageError(f"unknown option --{key}")
        out[key] = _coerce(fields[key], raw)
    return out


def load_config(path: str | None, overrides: dict) -> pipeline.TrainConfig:
    base = {}
    if path:
        base = json.loads(Path(path).read_text())
    try:
        return pipeline.TrainConfig.from_dict({**base, **overrides})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _load_dataset(path: str | None, cfg) -> pipeline.SyntheticDataset:
    if path:
        return pipeline.SyntheticDataset.from_json(Path(path).read_text())
    return pipeline.generate_dataset(cfg)


def _metrics_rows(report: pipeline.RunReport) -> list[tuple]:
    m = report.metrics
    rows = [
        ("WI", m.get("operating_threshold"), m.get("WI")),
        ("AOSE", m.get("operating_threshold"), m.get("AOSE")),
        ("mAP_K", None, m.get("mAP_K")),
        ("AP_U", None, m.get("AP_U")),
        ("accuracy", None, m.get("accuracy")),
        ("compactness_ratio", None, report.compactness_ratio),
    ]
    rows += [(k, None, v) for k, v in report.cluster_indices.items()]
    for thr, vals in m.get("threshold_grid", {}).items():
        rows += [(name, float(thr), v) for name, v in vals.items()]
    return [r for r in rows if r[2] is not None]


def cmd_gen_data(args, cfg):
    ds = pipeline.generate_dataset(cfg)
    Path(args.out).write_text(ds.to_json())
    print(f"wrote {args.out}: {len(ds.y_train)} train, {len(ds.y_test)} test points")


def cmd_train(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = _load_dataset(args.data, cfg)
    params, report = pipeline.run(cfg, ds)
    (out / "report.json").write_text(report.to_json())
    (out / "checkpoint.json").write_text(params_to_json(params, {"config": cfg.to_dict(), "config_hash": report.config_hash}))
    write_metrics_csv(_metrics_rows(report), out / "metrics.csv")
    m = report.metrics
    print(f"{cfg.mode} seed={cfg.seed}: WI={m.get('WI')} AOSE={m.get('AOSE')} mAP_K={m.get('mAP_K'):.2f}")


def cmd_eval(args, cfg):
    ckpt = json.loads(Path(args.checkpoint).read_text())
    if not args.config_given and "config" in ckpt.get("meta", {}):
        cfg = pipeline.TrainConfig.from_dict({**ckpt["meta"]["config"], **args.overrides})
    params = params_from_json(Path(args.checkpoint).read_text())
    ds = _load_dataset(args.data, cfg)
    ev = pipeline.evaluate(params, ds, cfg)
    report = pipeline.RunReport(cfg.to_dict(), pipeline.config_hash(cfg), pipeline.__version__)
    report.metrics = ev["metrics"]
    report.compactness_ratio = ev["compactness_ratio"]
    report.cluster_indices = ev["cluster_indices"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    write_metrics_csv(_metrics_rows(report), out / "metrics.csv")
    print(f"wrote {out / 'metrics.csv'}")


def cmd_sweep(args, cfg):
    grid = json.loads(Path(args.grid).read_text())
    seeds = grid.pop("seeds", None)
    rows = pipeline.sweep(cfg, grid, seeds)
    pipeline.write_sweep_csv(rows, args.out)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"wrote {len(rows)} rows to {args.out} ({failed} failed)")


def cmd_export(args, cfg):
    ckpt = json.loads(Path(args.checkpoint).read_text())
    if not args.config_given and "config" in ckpt.get("meta", {}):
        cfg = pipeline.TrainConfig.from_dict({**ckpt["meta"]["config"], **args.overrides})
    params = params_from_json(Path(args.checkpoint).read_text())
    ds = _load_dataset(args.data, cfg)
    csv_path, svg_path = pipeline.export_embeddings(params, ds, args.out, cfg)
    print(f"wrote {csv_path} and {svg_path}")


def cmd_score_dump(args, cfg):
    records = read_dump(args.dump)
    rows = score_records(records, tuple(cfg.score_thresholds))
    write_metrics_csv(rows, args.out)
    print(f"scored {len(records)} records into {args.out}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="odcwa", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file")
        p.set_defaults(fn=fn)
        return p

    p = add("gen-data", cmd_gen_data, "generate the synthetic dataset")
    p.add_argument("--out", default="dataset.json")
    p = add("train", cmd_train, "train and evaluate one configuration")
    p.add_argument("--data", help="dataset JSON (generated from the config when omitted)")
    p.add_argument("--out", default="run")
    p = add("eval", cmd_eval, "evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out", default="eval")
    p = add("sweep", cmd_sweep, "train/evaluate a grid of configurations")
    p.add_argument("--grid", required=True, help='JSON like {"blur": [0.5, 0.1], "seeds": [0, 1]}')
    p.add_argument("--out", default="sweep.csv")
    p = add("export-embeddings", cmd_export, "write test embeddings as CSV and SVG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out", default="embeddings.csv")
    p = add("score-dump", cmd_score_dump, "score an external JSON-lines detection dump")
    p.add_argument("--dump", required=True)
    p.add_argument("--out", default="metrics.csv")
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        args.overrides = parse_overrides(rest)
        args.config_given = bool(args.config)
        cfg = load_config(args.config, args.overrides)
        args.fn(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, PermissionError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
