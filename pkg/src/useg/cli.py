"""``useg`` command line: generate, train, evaluate, compare, gradcheck.

Exit codes: 0 success, 1 a check failed (gradient check, checksum,
case mismatch, non-finite training), 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from useg.errors import (
    DatasetMissing,
    InvalidConfig,
    MissingFile,
    UsegError,
)

USAGE_ERRORS = (InvalidConfig, DatasetMissing, MissingFile)


class Clobber(UsegError):
    """Output already exists and --overwrite was not given."""


def _read_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise InvalidConfig(f"config file {p} not found")
    try:
        d = json.loads(p.read_text())
    except ValueError as exc:
        raise InvalidConfig(f"{p}: {exc}") from None
    if not isinstance(d, dict):
        raise InvalidConfig(f"{p}: top level must be a JSON object")
    return d


def _claim(out: Path, overwrite: bool, names=None) -> None:
    """Refuse to write into ``out`` if it (or any of ``names`` inside it) already exists."""
    if overwrite:
        return
    if names is None:
        if out.exists() and any(out.iterdir()):
            raise Clobber(f"{out} exists and is not empty; pass --overwrite to replace it")
        return
    taken = [n for n in names if (out / n).exists()]
    if taken:
        raise Clobber(f"{out} already holds {taken}; pass --overwrite to replace them")


# --------------------------------------------------------------------------


def cmd_generate(args) -> int:
    from useg.data import GenerateConfig, generate_dataset, write_dataset

    cfg = GenerateConfig.from_dict(_read_config(args.config))
    out = Path(args.out or "dataset")
    _claim(out, args.overwrite)
    samples = generate_dataset(cfg)
    manifest = write_dataset(samples, out, {"generate_config": cfg.to_dict()})
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return 0


def _run_config(args):
    from useg.train import RunConfig

    d = _read_config(args.config)
    if args.dataset:
        d["dataset"] = args.dataset
    if args.out:
        d["out_dir"] = args.out
    if args.epochs is not None:
        d["epochs"] = args.epochs
    if args.fusion:
        d["fusion"] = args.fusion
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = RunConfig.from_dict(d)
    if not cfg.out_dir:
        raise InvalidConfig("no output directory: pass --out or set out_dir in the config")
    if not cfg.dataset or not (Path(cfg.dataset) / "manifest.json").exists():
        raise DatasetMissing(f"no dataset at {cfg.dataset!r}; run `useg generate` first")
    return cfg


def cmd_train(args) -> int:
    from dataclasses import replace

    from useg.data import load_dataset
    from useg.train import train

    cfg = _run_config(args)
    samples, _ = load_dataset(cfg.dataset)
    if args.fold == "all":
        runs = [(k, Path(cfg.out_dir) / f"fold{k}") for k in range(5)]
    elif args.fold is not None:
        runs = [(int(args.fold), Path(cfg.out_dir))]
    else:
        runs = [(cfg.fold, Path(cfg.out_dir))]
    for _, out in runs:
        _claim(out, args.overwrite, ["checkpoint.json", "checkpoint.bin", "train_log.json"])
    summary = []
    for fold, out in runs:
        run = replace(cfg, fold=fold, out_dir=str(out))
        run.validate()
        out.mkdir(parents=True, exist_ok=True)
        (out / "run_config.json").write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n")
        log = train(run, samples, out, progress=args.verbose)
        summary.append({"fold": fold, "out_dir": str(out), "best_val_dice": log["best_val_dice"],
                        "final_train_dice": log["final_train_dice"], "checkpoint": log["checkpoint"]})
    print(json.dumps(summary if len(summary) > 1 else summary[0], indent=2))
    return 0


def _checkpoint_stem(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "checkpoint"
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    if not p.with_suffix(".json").exists():
        raise MissingFile(f"no checkpoint at {p}.json")
    return p


def cmd_evaluate(args) -> int:
    from useg.data import load_dataset, select
    from useg.model import SegmentationModel
    from useg.train import evaluate

    if not args.checkpoint:
        raise InvalidConfig("evaluate needs --checkpoint")
    stem = _checkpoint_stem(args.checkpoint)
    model, meta = SegmentationModel.load(stem)
    dataset = args.dataset or meta.get("run_config", {}).get("dataset")
    if not dataset or not (Path(dataset) / "manifest.json").exists():
        raise DatasetMissing(f"no dataset at {dataset!r}")
    out = Path(args.out or stem.parent / f"eval_{args.split}")
    _claim(out, args.overwrite, ["report.json", "report.csv", "per_case.jsonl"])
    samples, _ = load_dataset(dataset)
    name = args.name or model.config.fusion
    report = evaluate(model, select(samples, args.split), model_name=name, split=args.split)
    report.write(out)
    print(report.to_json())
    return 0


def _per_case_path(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "per_case.jsonl"
    if not p.exists():
        raise MissingFile(f"no per-case file at {p}")
    return p


def cmd_compare(args) -> int:
    from useg.metrics import read_per_case
    from useg.train import compare, format_comparison

    a = read_per_case(_per_case_path(args.report_a))
    b = read_per_case(_per_case_path(args.report_b))
    result = compare(a, b)
    result["a"], result["b"] = str(args.report_a), str(args.report_b)
    print(format_comparison(result, args.name_a, args.name_b))
    if args.out:
        out = Path(args.out)
        _claim(out, args.overwrite, ["comparison.json"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    from useg import gradcheck

    results = gradcheck.run_suite(seed=args.seed, names=args.only or None, tol=args.tol)
    width = max(len(r.name) for r in results) if results else 10
    for r in results:
        line = f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  max_rel_err={r.max_rel_err:.3e}  ({r.seconds:.1f}s)"
        print(line + (f"  [{r.error}]" if r.error else ""))
    cov = gradcheck.coverage()
    missing = sorted(op for op, checks in cov.items() if not checks)
    print(f"operators covered: {len(cov) - len(missing)}/{len(cov)}")
    if missing:
        print(f"FAIL  no check exercises: {', '.join(missing)}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
    return 1 if failed or missing else 0


# --------------------------------------------------------------------------


def _fold(value: str):
    if value == "all":
        return value
    try:
        k = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("fold must be 0-4 or 'all'") from None
    if not 0 <= k <= 4:
        raise argparse.ArgumentTypeError("fold must be 0-4 or 'all'")
    return k


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="useg", description="Text-guided lesion segmentation at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true", help="progress output and debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--overwrite", action="store_true", help="replace existing outputs")

    p = sub.add_parser("generate", help="write a synthetic captioned dataset")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model (or five with --fold all)")
    common(p)
    p.add_argument("--dataset", help="dataset directory (overrides the config)")
    p.add_argument("--fold", type=_fold, help="validation fold 0-4, or 'all' for five runs")
    p.add_argument("--fusion", choices=["stage_add", "stage_gate", "tail", "none"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics report for a checkpoint on one split")
    common(p, config=False)
    p.add_argument("--checkpoint", help="checkpoint stem, .json file, or run directory")
    p.add_argument("--dataset", help="dataset directory (default: the one the model was trained on)")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--name", help="model name recorded in the report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="paired comparison of two per-case reports")
    common(p, config=False)
    p.add_argument("report_a", help="per_case.jsonl or evaluation directory")
    p.add_argument("report_b", help="per_case.jsonl or evaluation directory")
    p.add_argument("--name-a", default="A")
    p.add_argument("--name-b", default="B")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--only", nargs="*", help="run only the named checks")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (Clobber,) + USAGE_ERRORS as exc:
        print(f"useg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except UsegError as exc:
        print(f"useg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
