"""Command-line entry point.

Subcommands: ``synth``, ``train``, ``eval``, ``compare``, ``plot``. Exit codes:
0 success, 1 usage error, 2 data or validation error, 3 training divergence.

Seeds: ``--seed S`` is expanded with ``numpy.random.SeedSequence(S)`` into four
independent streams (data, split, init, shuffle); see ``training.derive_seeds``.
``synth`` uses ``S`` directly so the dataset file depends only on its own flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .dataset import (
    DatasetError,
    SynthParams,
    filter_valid,
    generate_synthetic,
    load_dataset,
    make_sample,
    save_dataset,
    split,
)
from .geodesy import EDGE_FORMULAS
from .models import ARCHITECTURES, CheckpointError, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .plotting import layer_boundaries, predicted_boundaries, profile_csv, profile_svg
from .training import (
    TrainConfig,
    TrainingDiverged,
    derive_seeds,
    prepare_splits,
    rmse,
    run_trials,
    table_csv,
    table_text,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("icestack")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _model_flags(p: argparse.ArgumentParser, with_arch: bool = True) -> None:
    if with_arch:
        p.add_argument("--arch", choices=ARCHITECTURES, default="multibranch")
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--kt", type=int, default=3)
    p.add_argument("--weighted-agg", type=_on_off, default=True, metavar="{on,off}")
    p.add_argument("--edge-formula", choices=EDGE_FORMULAS, default="as-written")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--lr-step", type=int, default=75)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="icestack", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset file")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=SynthParams.noise)
    p.add_argument("--n-nodes", type=int, default=256)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train one model, write checkpoint and report")
    p.add_argument("--data", type=Path, required=True)
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--out", type=Path, default=Path("model.ckpt.json"), help="checkpoint path")
    p.add_argument("--report", type=Path, default=None, help="report path (default: <out>.report.json)")

    p = sub.add_parser("eval", help="RMSE of a checkpoint on one split of a dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")

    p = sub.add_parser("compare", help="multi-trial benchmark of all three architectures")
    p.add_argument("--data", type=Path, required=True)
    _model_flags(p, with_arch=False)
    _train_flags(p)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--parallel-trials", action="store_true")
    p.add_argument("--out", type=Path, default=Path("compare.csv"), help="CSV table path")

    p = sub.add_parser("plot", help="SVG + CSV depth profile for one record")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--record-id", required=True)
    p.add_argument("--out", type=Path, required=True, help="SVG path; the CSV goes next to it")
    return parser


def _check_input(path: Path) -> None:
    if not path.is_file():
        raise UsageError(f"input file not found: {path}")


def _check_output(path: Path) -> None:
    parent = path.resolve().parent
    if not parent.is_dir():
        raise UsageError(f"output directory does not exist: {parent}")


def _model_config(args, arch: str) -> ModelConfig:
    try:
        return ModelConfig(arch=arch, hidden=args.hidden, kt=args.kt, weighted_agg=args.weighted_agg,
                           edge_formula=args.edge_formula)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _train_config(args, **extra) -> TrainConfig:
    try:
        return TrainConfig(lr0=args.lr, weight_decay=args.weight_decay, lr_step=args.lr_step,
                           epochs=args.epochs, seed=args.seed, **extra)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_valid(path: Path):
    records = load_dataset(path)
    valid = filter_valid(records)
    if len(valid) < len(records):
        log.info("dropped %d incomplete records", len(records) - len(valid))
    if len(valid) < 5:
        raise DatasetError(f"{path}: only {len(valid)} complete records, need at least 5")
    return valid


def cmd_synth(args) -> int:
    _check_output(args.out)
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    params = SynthParams(n_nodes=args.n_nodes, noise=args.noise)
    save_dataset(generate_synthetic(args.n, args.seed, params), args.out)
    print(f"wrote {args.n} records to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    _check_input(args.data)
    report_path = args.report or args.out.with_name(args.out.name.removesuffix(".json") + ".report.json")
    _check_output(args.out)
    _check_output(report_path)
    mc = _model_config(args, args.arch)
    tc = _train_config(args)
    seeds = derive_seeds(args.seed)
    records = _load_valid(args.data)
    splits, norm = prepare_splits(records, seeds["split"], mc)
    model = build_model(mc, seeds["init"])
    report, ckpt = train(model, splits, tc, norm, shuffle_seed=seeds["shuffle"], init_seed=seeds["init"])
    ckpt.seed = args.seed
    ckpt.extra = {**ckpt.extra, "split_seed": seeds["split"], "train_config": asdict(tc)}
    save_checkpoint(ckpt, args.out)
    report_path.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(f"{mc.arch}: test RMSE {report.test_rmse_final:.4f} (best-val {report.test_rmse_best_val:.4f}, "
          f"train-mean baseline {report.baseline_rmse:.4f}) in {report.total_seconds:.1f}s")
    return EXIT_OK


def _split_records(records, ckpt, which: str):
    if which == "all":
        return list(records)
    seed = ckpt.extra.get("split_seed", derive_seeds(ckpt.seed)["split"])
    spec = split(records, seed)
    return [records[i] for i in getattr(spec, which)]


def cmd_eval(args) -> int:
    _check_input(args.checkpoint)
    _check_input(args.data)
    ckpt = load_checkpoint(args.checkpoint)
    records = _load_valid(args.data)
    chosen = _split_records(records, ckpt, args.split)
    cfg = ckpt.model.config
    samples = [make_sample(r, ckpt.normalizer, n_in=cfg.n_in, n_out=cfg.n_out, edge_formula=cfg.edge_formula)
               for r in chosen]
    value = rmse(ckpt.model, samples, ckpt.normalizer)
    print(f"{cfg.arch} {args.split} RMSE {value:.6f} over {len(samples)} records")
    return EXIT_OK


def cmd_compare(args) -> int:
    _check_input(args.data)
    _check_output(args.out)
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    tc = _train_config(args, trials=args.trials, parallel_trials=args.parallel_trials)
    records = _load_valid(args.data)
    summaries = []
    for arch in ("gcn-lstm", "sage-lstm", "multibranch"):
        mc = _model_config(args, arch)
        s = run_trials(arch, records, tc, mc)
        if s.failed:
            log.warning("%s: trials with seeds %s diverged", arch, s.failed)
        summaries.append(s)
    args.out.write_text(table_csv(summaries), encoding="utf-8")
    print(table_text(summaries), end="")
    if any(s.failed for s in summaries):
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_plot(args) -> int:
    _check_input(args.checkpoint)
    _check_input(args.data)
    _check_output(args.out)
    ckpt = load_checkpoint(args.checkpoint)
    records = load_dataset(args.data)
    match = [r for r in records if r.id == args.record_id]
    if not match:
        raise DatasetError(f"record id {args.record_id!r} not found in {args.data}")
    rec = match[0]
    if not rec.is_complete:
        raise DatasetError(f"record {rec.id!r} has gap values and cannot be plotted")
    cfg = ckpt.model.config
    sample = make_sample(rec, ckpt.normalizer, n_in=cfg.n_in, n_out=cfg.n_out, edge_formula=cfg.edge_formula)
    pred = ckpt.model.predict(sample)
    if ckpt.normalizer is not None:
        pred = ckpt.normalizer.invert_thickness(pred, slice(cfg.n_in, cfg.n_in + cfg.n_out), axis=1)
    truth = layer_boundaries(rec.thickness[:cfg.n_in + cfg.n_out])
    pred_b = predicted_boundaries(rec.thickness[:cfg.n_in], pred)
    title = f"{rec.id}: {cfg.arch}"
    args.out.write_text(profile_svg(truth, pred_b, cfg.n_in, title=title), encoding="utf-8")
    csv_path = args.out.with_suffix(".csv")
    csv_path.write_text(profile_csv(truth, pred_b, cfg.n_in), encoding="utf-8")
    print(f"wrote {args.out} and {csv_path}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare, "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"icestack {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, OSError) as exc:
        print(f"icestack {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"icestack {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FloatingPointError as exc:
        print(f"icestack {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
