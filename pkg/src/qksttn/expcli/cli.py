"""Command-line entry point: ``qksttn <subcommand> --config run.yaml ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from qksttn import data
from qksttn.errors import QksTtnError
from qksttn.expcli import pipelines, store
from qksttn.expcli.config import load_config
from qksttn.expcli.plots import emit_plots

log = logging.getLogger("qksttn")


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="YAML run configuration")
    p.add_argument("--data-dir", help=f"dataset root (default: ${data.DATA_DIR_ENV})")
    p.add_argument("--out", help="output directory (default: the config's 'out')")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--shard", help="run realizations r with r %% n == i, given as i/n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qksttn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch", help="download a dataset into the data directory")
    p.add_argument("--dataset", default="mnist", choices=sorted(data.SOURCES))
    p.add_argument("--data-dir")
    p.add_argument("--base-url", help="mirror URL overriding the built-in source")

    for name, text in (("run", "run the configured pipeline"),
                       ("ablate", "run the tensor-network ablation pipeline"),
                       ("grid-search", "cross-validated (sigma, E) grid"),
                       ("benchmark", "pairwise error matrix and multi-class error")):
        _common(sub.add_parser(name, help=text))
    p = sub.add_parser("scaling", help="dataset-fraction power-law study")
    _common(p)
    p.add_argument("--fractions", type=float, nargs="+", help="override the config fractions")

    p = sub.add_parser("plot", help="render SVG figures from records")
    p.add_argument("records", nargs="+", help="record JSON files or directories holding them")
    p.add_argument("--out", required=True)
    return parser


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg.validate()


def _collect(paths) -> list:
    found = []
    for item in map(Path, paths):
        files = sorted(item.rglob("*.json")) if item.is_dir() else [item]
        for f in files:
            raw = json.loads(f.read_text())
            if raw.get("kind") == "benchmark" or "test_error" in raw:
                found.append(raw)
    return found


def _summary(records) -> list:
    return [{"realization": r.realization, "train_error": r.train_error,
             "test_error": r.test_error, **r.metrics} for r in records]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        result = _dispatch(args)
    except QksTtnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(store._jsonable(result), indent=2, sort_keys=True))
    return 0


def _dispatch(args):
    if args.command == "fetch":
        return data.fetch(args.dataset, args.data_dir, args.base_url)
    if args.command == "plot":
        return [str(p) for p in emit_plots(_collect(args.records), args.out)]
    cfg = _config(args)
    if args.command == "ablate":
        cfg = cfg.replace(pipeline="ablate").validate()
    out = Path(args.out or cfg.out)
    if args.command in ("run", "ablate"):
        return _summary(pipelines.run(cfg, args.data_dir, out, args.shard))
    if args.command == "grid-search":
        rows, best = pipelines.grid_search(cfg, args.data_dir, out)
        return {"best": best, "cells": len(rows), "csv": str(out / "grid.csv")}
    if args.command == "scaling":
        fractions = args.fractions or cfg.fractions
        return pipelines.scaling_study(cfg, fractions, args.data_dir, out)
    if args.command == "benchmark":
        return pipelines.benchmark_matrix(cfg, args.data_dir, out)
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
