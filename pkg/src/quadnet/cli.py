"""Command-line entry point: ``quadnet {train,eval,gradcheck,bench,report}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as E
from .network import gradcheck

log = logging.getLogger("quadnet")


def _apply_overrides(config: E.ExperimentConfig, args) -> E.ExperimentConfig:
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    if args.memory_mode is not None:
        changes["memory_mode"] = args.memory_mode
    if args.optimizer is not None:
        changes["optimizer"] = args.optimizer
    if args.relu is not None:
        changes["relu"] = args.relu == "on"
    if args.full:
        changes["full"] = True
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.data_dir is not None:
        changes["data_dir"] = args.data_dir
    return config.replace(**changes) if changes else config


def cmd_train(args) -> int:
    config = _apply_overrides(E.ExperimentConfig.load(args.config), args)
    record, net = E.train(config)
    out = Path(config.out_dir)
    csv_path = E.write_run(record, out)
    E.save_checkpoint(out / f"{config.name}.ckpt", net, config)
    config.save(out / f"{config.name}.cfg")
    _, table, warnings = E.report([record])
    print(table, end="")
    for w in warnings:
        print(w, file=sys.stderr)
    print(f"metrics: {csv_path}")
    return 0


def cmd_eval(args) -> int:
    net, config = E.load_checkpoint(args.checkpoint)
    if config.dataset != "xor":
        config = config.replace(data_dir=args.dataset)
    splits = E.load_splits(config)
    print(f"test accuracy: {E.evaluate(net, splits.test):.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    dataset = args.dataset or ("xor" if args.preset.startswith("xor") else "mnist")
    config = E.ExperimentConfig(preset=args.preset, dataset=dataset, relu=args.relu == "on",
                                seed=args.seed or 0)
    net = E.build_preset(config)
    rng = np.random.default_rng(config.seed)
    x = rng.normal(size=(args.batch,) + net.input_shape)
    y = rng.integers(0, net.classes, size=args.batch)
    result = gradcheck(net, x, y, eps=args.eps, tol=args.tol, max_coords=args.coords or None, rng=rng,
                       directional=args.directional)
    for name, err in result.errors.items():
        flag = "  (crossed a ReLU/max-pool switch)" if name in result.kinks else ""
        print(f"{name:>12}  {err:.3e}{flag}")
    print(f"max relative error {result.max_rel_error:.3e} -> {'PASS' if result.passed else 'FAIL'}")
    if not result.differentiable:
        print("warning: the check point is not differentiable for some tensors; retry with another --seed")
        return 0 if result.passed else 3
    return 0 if result.passed else 1


def cmd_bench(args) -> int:
    config = _apply_overrides(E.ExperimentConfig.load(args.config), args)
    print(json.dumps(E.benchmark(config, steps=args.steps), indent=2))
    return 0


def cmd_report(args) -> int:
    records = [E.RunRecord.from_csv(Path(p).read_text()) for p in args.csv]
    csv_text, table, warnings = E.report(records)
    print(table, end="")
    for w in warnings:
        print(w, file=sys.stderr)
    if args.out:
        Path(args.out).write_text(csv_text)
    return 0


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--memory-mode", choices=["cached", "recompute"])
    p.add_argument("--optimizer", choices=["sgd", "lbfgs"])
    p.add_argument("--relu", choices=["on", "off"])
    p.add_argument("--full", action="store_true", help="use the complete CIFAR-10 training split")
    p.add_argument("--out", help="output directory for metrics and checkpoints")
    p.add_argument("--data-dir", help="directory holding the dataset files")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quadnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one experiment config")
    p.add_argument("config")
    _run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test accuracy of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("dataset", help="dataset directory (ignored for xor)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of a preset network")
    p.add_argument("preset", choices=E.PRESETS)
    p.add_argument("--dataset", choices=E.DATASETS)
    p.add_argument("--relu", choices=["on", "off"], default="off")
    p.add_argument("--seed", type=int)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--coords", type=int, default=8, help="coordinates sampled per tensor (0: all)")
    p.add_argument("--directional", action="store_true",
                   help="one central difference per tensor along a random unit direction")
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="parameters, FLOPs, memory and timing of a config")
    p.add_argument("config")
    p.add_argument("--steps", type=int, default=5)
    _run_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="comparison table from metrics CSV files")
    p.add_argument("csv", nargs="*")
    p.add_argument("--out", help="write the machine-readable summary CSV here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, E.TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
