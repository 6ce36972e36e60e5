"""Command-line entry point: ``hetscale <subcommand> ...``.

Subcommands:

    train <config>                        run a grow-while-training experiment
    eval <checkpoint> <dataset>           top-1/top-5 of a checkpoint
    spectra <checkpoint> <dataset>        export per-neuron eigenvalue spectra
    plan --dry-run ...                    print the growth plan for a model or spectra
    count <config>                        parameter and FLOP counts of a model config

``<dataset>`` is a YAML file (a dataset section or a full run config), a
directory of IDX or CIFAR files, or the word ``synthetic``.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import yaml

from hetscale.checkpoint import load_checkpoint, save_checkpoint
from hetscale.config import load_config
from hetscale.data import DatasetConfig, load_dataset, train_batches
from hetscale.hessian import SplittingSpectrum, export_spectrum, model_spectra, read_spectrum_csv
from hetscale.model import ModelConfig, count_table, param_count
from hetscale.scheduler import SELECTIONS, ScheduleConfig, apply_plan, build_plan
from hetscale.train import evaluate, train


def _threads(n: int | None):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _dataset_config(arg: str, model_cfg: ModelConfig, fallback: dict | None) -> DatasetConfig:
    geometry = {"num_classes": model_cfg.num_classes, "image_size": model_cfg.image_size,
                "channels": model_cfg.in_chans}
    if arg == "synthetic":
        base = dict(fallback or {})
        if base.get("name", "synthetic") != "synthetic":
            base = {}
        return DatasetConfig.from_dict({**base, **geometry, "name": "synthetic", "path": None})
    path = Path(arg)
    if path.is_dir():
        kind = "cifar" if any(path.glob("*.bin")) else "idx"
        return DatasetConfig(name=kind, path=str(path), **geometry)
    if path.is_file():
        data = yaml.safe_load(path.read_text()) or {}
        if "dataset" in data:
            data = data["dataset"]
        return DatasetConfig.from_dict(data)
    raise FileNotFoundError(f"dataset {arg!r} is neither 'synthetic', a directory nor a file")


def _load_model_config(path: str) -> ModelConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if "model" in data:
        data = data["model"]
    return ModelConfig.from_dict(data)


def _schedule_from(args) -> ScheduleConfig:
    base = load_config(args.config).schedule.to_dict() if args.config else {"layer_threshold": 8}
    for key, value in (("parameter_budget", args.budget), ("layer_threshold", args.layer_threshold),
                       ("selection", args.selection)):
        if value is not None:
            base[key] = value
    return ScheduleConfig.from_dict(base)


def cmd_train(args) -> int:
    cfg = load_config(args.config).with_overrides(seed=args.seed, output_dir=args.output_dir)
    result = train(cfg)
    f = result.final
    print(json.dumps({"epochs": len(result.metrics), "base_params": result.base_params,
                      "final_params": f.param_count, "target_params": result.target_params,
                      "eval_top1": f.eval_top1, "eval_top5": f.eval_top5,
                      "events": len(result.events), "checkpoint": str(result.checkpoint)}))
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dcfg = _dataset_config(args.dataset, ckpt.model.cfg, ckpt.run_config.get("dataset"))
    data = load_dataset(dcfg)
    loss, top1, top5 = evaluate(ckpt.model, data.eval)
    print(json.dumps({"eval_loss": loss, "eval_top1": top1, "eval_top5": top5,
                      "param_count": param_count(ckpt.model)}))
    return 0


def _spectra_for(ckpt, args, layers=None) -> list[SplittingSpectrum]:
    dcfg = _dataset_config(args.dataset, ckpt.model.cfg, ckpt.run_config.get("dataset"))
    data = load_dataset(dcfg)
    seed = args.seed if args.seed is not None else ckpt.run_config.get("seed", 0)
    batches = list(train_batches(data.train, args.batch_size, seed, ckpt.epoch))[-args.batches:]
    if len(batches) < args.batches:
        raise ValueError(f"dataset yields only {len(batches)} batches of {args.batch_size}")
    return model_spectra(ckpt.model, batches, ckpt.epoch, layer_ids=layers,
                         max_batches=args.batches, fallback_samples=args.samples,
                         mode=args.mode)


def cmd_spectra(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    spectra = _spectra_for(ckpt, args, args.layers)
    out = Path(args.output_dir or ".")
    for path in export_spectrum(spectra, out):
        print(path)
    return 0


def cmd_plan(args) -> int:
    if not args.dry_run and not args.checkpoint:
        raise ValueError("applying a plan needs --checkpoint")
    sched = _schedule_from(args)
    if args.spectra:
        spectra = []
        for item in args.spectra:
            p = Path(item)
            files = sorted(p.rglob("*.csv")) if p.is_dir() else [p]
            for f in files:
                spectra.extend(read_spectrum_csv(f))
        ckpt = None
    elif args.checkpoint and args.dataset:
        ckpt = load_checkpoint(args.checkpoint)
        spectra = _spectra_for(ckpt, args)
    else:
        raise ValueError("plan needs --spectra, or --checkpoint with --dataset")
    budget = args.budget if args.budget is not None else sched.parameter_budget
    if budget is None:
        raise ValueError("plan needs a parameter budget (--budget or schedule.parameter_budget)")
    plan = build_plan(spectra, sched, budget)
    print(json.dumps(plan.to_dict(), sort_keys=True))
    if not args.dry_run:
        if ckpt is None:
            raise ValueError("applying a plan needs --checkpoint")
        report = apply_plan(ckpt.model, plan, sched)
        history = ckpt.growth_history + [e.to_dict() for e in report.events]
        out = Path(args.output_dir or ".") / "grown.ckpt"
        save_checkpoint(out, ckpt.model, ckpt.epoch, ckpt.run_config, history)
        print(out)
    return 0


def cmd_count(args) -> int:
    cfg = _load_model_config(args.config)
    table = count_table(cfg)
    print(f"{'params':>12} {'params (M)':>11} {'MACs':>14} {'GFLOPs':>8}")
    print(f"{table['params']:>12d} {table['params'] / 1e6:>11.2f} {table['flops']:>14d} "
          f"{table['flops'] / 1e9:>8.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    def common(q, default):
        q.add_argument("--seed", type=int, default=default, help="override the run seed")
        q.add_argument("--output-dir", default=default, help="directory for all outputs")
        q.add_argument("--device-threads", type=int, default=default,
                       help="cap BLAS threads for numerical kernels")
        q.add_argument("-v", "--verbose", action="store_true", default=default)

    parser = argparse.ArgumentParser(prog="hetscale", description=__doc__.splitlines()[0])
    common(parser, None)
    # The same overrides are accepted after the subcommand as well.
    shared = argparse.ArgumentParser(add_help=False)
    common(shared, argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[shared], help="train with growth events")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[shared], help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.set_defaults(func=cmd_eval)

    def spectra_opts(q, positional: bool):
        if positional:
            q.add_argument("checkpoint")
            q.add_argument("dataset")
        q.add_argument("--batches", type=int, default=4)
        q.add_argument("--batch-size", type=int, default=64)
        q.add_argument("--samples", type=int, default=8,
                       help="samples per layer for the block-Hessian curvature")
        q.add_argument("--mode", choices=("auto", "strict", "hessian"), default="auto")

    p = sub.add_parser("spectra", parents=[shared], help="export per-neuron eigenvalue spectra")
    spectra_opts(p, True)
    p.add_argument("--layers", nargs="+", default=None)
    p.set_defaults(func=cmd_spectra)

    p = sub.add_parser("plan", parents=[shared], help="build a growth plan")
    p.add_argument("--dry-run", action="store_true", help="print the plan without applying it")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--spectra", nargs="+", help="spectrum CSV files or directories")
    p.add_argument("--config", help="run config supplying the schedule")
    p.add_argument("--budget", type=int)
    p.add_argument("--layer-threshold", type=int)
    p.add_argument("--selection", choices=SELECTIONS)
    spectra_opts(p, False)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("count", parents=[shared], help="parameter/FLOP table for a model config")
    p.add_argument("config")
    p.set_defaults(func=cmd_count)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads(args.device_threads):
            return args.func(args)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"hetscale: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
