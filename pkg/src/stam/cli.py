"""Command line entry point: ``stam <subcommand> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .errors import ConfigError, DimensionError, DomainError, NumericalError
from .harness import (
    ExperimentConfig,
    compare_baselines,
    fit,
    gradient_check_suite,
    export_attention_trace,
    summarize,
    sweep_layers,
    write_json,
    write_metrics,
)
from .initializers import INITIALIZER_KINDS
from .synthetic import calibration, generate, save_dataset

log = logging.getLogger("stam")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_CHECK_FAILED = 4


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--seed", type=_u64, help="run seed (model init and shuffling)")
    p.add_argument("--task-seed", type=_u64, help="seed of the synthetic task data")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--layers", type=int, help="number of global attention layers M")
    p.add_argument("--init", choices=INITIALIZER_KINDS, help="global initializer kind")
    p.add_argument("--clips", type=int, help="clips per video N")
    p.add_argument("--lambda", dest="lambdas", type=_float_list, help="loss weights, e.g. 1,1,1")
    p.add_argument("--epochs", type=int)
    p.add_argument("--train-size", type=int)
    p.add_argument("--test-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stam", description="Global attention stacks on synthetic clip features.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model, write metrics.csv and report.json")
    _common(p)
    p.add_argument("--baseline", choices=("avg_consensus", "vanilla_stack"))

    p = sub.add_parser("sweep-layers", help="one run per layer count and seed")
    _common(p)
    p.add_argument("--layer-counts", type=_int_list, default=[0, 1, 2])
    p.add_argument("--seeds", type=_int_list, help="default: seed, seed+1, seed+2")

    p = sub.add_parser("compare-baselines", help="STAM vs average consensus vs vanilla stack")
    _common(p)
    p.add_argument("--seeds", type=_int_list, help="default: seed, seed+1, seed+2")

    p = sub.add_parser("export-trace", help="train, then dump per-layer attention for test samples")
    _common(p)
    p.add_argument("--samples", type=_int_list, default=[0, 1, 2, 3], help="test sample ids")

    p = sub.add_parser("check-grads", help="finite-difference check for every initializer and depth")
    p.add_argument("--out", type=Path, default=Path("."))
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--init", dest="kinds", type=lambda s: s.split(","), default=list(INITIALIZER_KINDS))
    p.add_argument("--layer-counts", type=_int_list, default=[1, 2, 3])
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("gen-data", help="write the task dataset to dataset.bin")
    _common(p)

    p = sub.add_parser("oracle", help="Monte-Carlo oracle accuracies to calibration.json")
    _common(p)
    p.add_argument("--draws", type=int, default=200_000)
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    task, model, train = config.task, config.model, config.train
    if args.task_seed is not None:
        task = dataclasses.replace(task, seed=args.task_seed)
    if args.clips is not None:
        task = dataclasses.replace(task, clip_count=args.clips)
    if args.train_size is not None:
        task = dataclasses.replace(task, train_size=args.train_size)
    if args.test_size is not None:
        task = dataclasses.replace(task, test_size=args.test_size)
    if args.layers is not None:
        model = dataclasses.replace(model, layers=args.layers)
    if args.init is not None:
        model = dataclasses.replace(model, initializer=args.init)
    if args.seed is not None:
        train = dataclasses.replace(train, seed=args.seed)
    if args.epochs is not None:
        train = dataclasses.replace(train, epochs=args.epochs)
    if args.lambdas is not None:
        train = dataclasses.replace(train, lambdas=args.lambdas)
    config = config.replace(task=task, model=model, train=train)
    if getattr(args, "baseline", None):
        config = config.with_baseline(args.baseline)
    config.validate()
    return config


def _seeds(args: argparse.Namespace, config: ExperimentConfig) -> list[int]:
    if args.seeds:
        return args.seeds
    return [config.train.seed + k for k in range(3)]


def _print_summary(reports) -> None:
    for row in summarize(reports):
        mass = row["median_final_mass"]
        print(
            f"{row['kind']:<14} M={row['layers']}  seeds={row['seeds']}  "
            f"median acc={row['median_accuracy']:.4f}  final mass={'-' if mass is None else f'{mass:.3f}'}"
        )


def cmd_train(args, config: ExperimentConfig) -> int:
    run = fit(config)
    write_metrics(args.out / config.output.metrics_path, [run.report])
    write_json(args.out / "report.json", run.report.comparable())
    _print_summary([run.report])
    return EXIT_OK


def cmd_sweep(args, config: ExperimentConfig) -> int:
    reports = sweep_layers(config, args.layer_counts, _seeds(args, config))
    write_metrics(args.out / config.output.metrics_path, reports)
    _print_summary(reports)
    return EXIT_OK


def cmd_compare(args, config: ExperimentConfig) -> int:
    reports = compare_baselines(config, _seeds(args, config))
    write_metrics(args.out / config.output.metrics_path, reports)
    _print_summary(reports)
    return EXIT_OK


def cmd_export(args, config: ExperimentConfig) -> int:
    run = fit(config)
    trace = export_attention_trace(run, args.samples)
    write_metrics(args.out / config.output.metrics_path, [run.report])
    write_json(args.out / config.output.trace_path, trace)
    print(f"wrote {len(trace['samples'])} samples to {args.out / config.output.trace_path}")
    return EXIT_OK


def cmd_check_grads(args) -> int:
    rows = gradient_check_suite(kinds=args.kinds, layer_counts=args.layer_counts, seed=args.seed)
    failed = False
    table = []
    for row in rows:
        ok = row["max_relative_error"] <= args.tol
        failed |= not ok
        print(
            f"{'PASS' if ok else 'FAIL'}  {row['initializer']:<8} M={row['layers']}  "
            f"max rel err {row['max_relative_error']:.3e}  ({row['seconds']:.1f} s)"
        )
        # timings stay on stdout so the file is reproducible
        table.append({k: v for k, v in row.items() if k != "seconds"} | {"passed": ok})
    write_json(args.out / "grad_check.json", {"tolerance": args.tol, "cases": table})
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def cmd_gen_data(args, config: ExperimentConfig) -> int:
    train_split, test_split = generate(config.task)
    path = args.out / "dataset.bin"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(path, config.task, train_split, test_split)
    print(f"wrote {len(train_split)} train and {len(test_split)} test samples to {path}")
    return EXIT_OK


def cmd_oracle(args, config: ExperimentConfig) -> int:
    result = calibration(config.task, draws=args.draws, seed=args.seed or 0)
    write_json(args.out / "calibration.json", result)
    print(json.dumps(result, indent=2))
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        if args.command == "check-grads":
            return cmd_check_grads(args)
        config = resolve_config(args)
        handler = {
            "train": cmd_train,
            "sweep-layers": cmd_sweep,
            "compare-baselines": cmd_compare,
            "export-trace": cmd_export,
            "gen-data": cmd_gen_data,
            "oracle": cmd_oracle,
        }[args.command]
        return handler(args, config)
    except (ConfigError, DimensionError, DomainError) as exc:
        print(f"stam: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"stam: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
