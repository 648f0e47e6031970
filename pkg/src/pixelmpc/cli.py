"""Command-line entry point: collect-data, train-dof, race, evaluate, bench."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np


def _common(sub):
    sub.add_argument("--config", default=None, help="experiment config file")
    sub.add_argument("--seed", type=int, default=None, help="master seed override")
    sub.add_argument("--out", default="out", help="output directory")


def build_parser():
    p = argparse.ArgumentParser(prog="pixelmpc",
                                description="perception-aware racing MPC testbed")
    subs = p.add_subparsers(dest="command", required=True)
    for name, help_ in [("collect-data", "fly nominal laps and log flow training data"),
                        ("train-dof", "train the pixel-flow model on a dataset"),
                        ("race", "run seeded racing laps and write run logs"),
                        ("evaluate", "summarize run-log CSVs into metric tables"),
                        ("bench", "microbenchmark batched flow inference")]:
        _common(subs.add_parser(name, help=help_))
    return p


def _load_cfg(args):
    from .config import ExperimentConfig, load_experiment_config
    cfg = load_experiment_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.master_seed = args.seed
    return cfg


def cmd_collect_data(args):
    from .dof import collect_dataset, save_dataset, split_by_laps
    from .experiment import course_for
    cfg = _load_cfg(args)
    course = course_for(cfg)
    ds, _logs = collect_dataset(course, cfg, cfg.collect_laps, cfg.collect_speeds,
                                cfg.pixels_per_frame, cfg.master_seed)
    os.makedirs(args.out, exist_ok=True)
    train, test = split_by_laps(ds, cfg.holdout_laps)
    save_dataset(train, os.path.join(args.out, "train.dfds"))
    save_dataset(test, os.path.join(args.out, "test.dfds"))
    print(f"collected {len(ds)} samples -> {len(train)} train, {len(test)} held out")
    if ds.warning:
        print("warning: at least one collection lap did not finish cleanly")
    return 0


def cmd_train_dof(args):
    from .dof import load_dataset, train_dof
    from .neural import NetworkSpec, save_weights
    cfg = _load_cfg(args)
    train_path = cfg.dataset_path or os.path.join(args.out, "train.dfds")
    test_path = os.path.join(os.path.dirname(train_path) or args.out, "test.dfds")
    train = load_dataset(train_path)
    test = load_dataset(test_path) if os.path.exists(test_path) else None
    spec = NetworkSpec(dropout=cfg.dropout)
    history = []
    weights = train_dof(train, spec, cfg.epochs, cfg.batch_size, cfg.master_seed,
                        lr=cfg.learning_rate, test_dataset=test,
                        target_mode=cfg.target_mode,
                        on_epoch=lambda e, tr, te: history.append((e, tr, te)))
    os.makedirs(args.out, exist_ok=True)
    save_weights(weights, spec, os.path.join(args.out, "dof.weights"))
    with open(os.path.join(args.out, "training.csv"), "w") as f:
        f.write("epoch,train_loss,test_loss\n")
        for e, tr, te in history:
            f.write(f"{e},{tr!r},{'' if te is None else repr(te)}\n")
    print(f"trained {cfg.epochs} epochs; final train loss {history[-1][1]:.6g}")
    return 0


def cmd_race(args):
    from .experiment import run_experiment, save_runs, write_metrics
    cfg = _load_cfg(args)
    if cfg.mode == "pixelmpc" and not cfg.weights_path:
        default = os.path.join(args.out, "dof.weights")
        if os.path.exists(default):
            cfg.weights_path = default
        else:
            raise FileNotFoundError("pixelmpc mode needs run.weights or out/dof.weights")
    logs = run_experiment(cfg)
    save_runs(logs, args.out)
    write_metrics(logs, args.out)
    ok = sum(1 for l in logs if l.outcome == "success")
    print(f"{ok}/{len(logs)} laps succeeded; logs in {args.out}")
    return 0


def cmd_evaluate(args):
    from .experiment import load_runs, write_metrics
    logs = load_runs(args.out)
    if not logs:
        raise FileNotFoundError(f"no run logs (lap_*.csv) in {args.out}")
    write_metrics(logs, args.out)
    print(f"evaluated {len(logs)} run logs -> {args.out}/metrics.csv, aggregate.csv")
    return 0


def cmd_bench(args):
    from .bench import bench_dof
    from .neural import NetworkSpec, init_weights, load_weights
    cfg = _load_cfg(args)
    if cfg.weights_path and os.path.exists(cfg.weights_path):
        weights, spec = load_weights(cfg.weights_path)
    else:
        spec = NetworkSpec()
        weights = init_weights(spec, cfg.master_seed)
    rows, fits = bench_dof(weights, spec)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "bench.csv"), "w") as f:
        f.write("batch,horizon,mean_ms,two_sigma_ms,max_ms\n")
        for r in rows:
            f.write(f"{r.batch},{r.horizon},{r.mean_ms},{r.two_sigma_ms},{r.max_ms}\n")
    for r in rows:
        print(f"batch {r.batch:4d}  horizon {r.horizon:3d}  "
              f"{r.mean_ms:8.3f} +- {r.two_sigma_ms:.3f} ms  (max {r.max_ms:.3f})")
    print(f"512x80 within 25 ms control period: {'yes' if fits else 'NO'}")
    return 0


_COMMANDS = {
    "collect-data": cmd_collect_data,
    "train-dof": cmd_train_dof,
    "race": cmd_race,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (OSError, ValueError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
