"""Experiment orchestration: seeded multi-lap runs and metric tables."""

from __future__ import annotations

import os

import numpy as np

from .config import ExperimentConfig
from .control import build_setup, pixelmpc_loop
from .course import default_course, load_course
from .metrics import mean_two_sigma, total_variation, visibility_metrics
from .runlog import RunLog, load_runlog, save_runlog


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def lap_seed(master_seed: int, lap: int) -> int:
    """Per-lap seed: master XOR a lap-index hash, so paired runs align."""
    return (master_seed ^ _splitmix64(lap)) & 0xFFFFFFFFFFFFFFFF


def course_for(cfg: ExperimentConfig):
    if cfg.course_path:
        return load_course(cfg.course_path)
    return default_course()


def run_experiment(cfg: ExperimentConfig, course=None, weights=None, spec=None):
    """Run cfg.laps independent laps with derived per-lap seeds."""
    if cfg.laps == 0:
        return []
    if cfg.mode == "pixelmpc" and weights is None and not cfg.weights_path:
        raise FileNotFoundError("pixelmpc mode needs run.weights in the config")
    if course is None:
        course = course_for(cfg)
    setup = build_setup(cfg, course, weights=weights, spec=spec)
    logs = []
    for lap in range(cfg.laps):
        logs.append(pixelmpc_loop(setup, seed=lap_seed(cfg.master_seed, lap)))
    return logs


def lap_metrics(log: RunLog) -> dict:
    vis = visibility_metrics(log, (0.5, 0.0))
    tv = total_variation(log)
    cov = log.cov_trace[np.isfinite(log.cov_trace)]
    return {
        "seed": log.seed,
        "mode": log.mode,
        "outcome": log.outcome,
        "lap_time": log.lap_time,
        "time_below_50": vis[0.5],
        "time_below_0": vis[0.0],
        "tv_roll": tv[0],
        "tv_pitch": tv[1],
        "tv_yaw": tv[2],
        "max_cov_trace": float(cov.max()) if len(cov) else float("nan"),
    }


_METRIC_COLUMNS = ["lap_time", "time_below_50", "time_below_0",
                   "tv_roll", "tv_pitch", "tv_yaw", "max_cov_trace"]


def write_metrics(logs, out_dir):
    """Per-lap metrics plus mean +- 2 sigma aggregates, as CSV files."""
    rows = [lap_metrics(log) for log in logs]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.csv"), "w") as f:
        cols = ["seed", "mode", "outcome"] + _METRIC_COLUMNS
        f.write(",".join(cols) + "\n")
        for r in rows:
            f.write(",".join(str(r[c]) for c in cols) + "\n")
    with open(os.path.join(out_dir, "aggregate.csv"), "w") as f:
        f.write("metric,mean,two_sigma,n\n")
        success = [r for r in rows if r["outcome"] == "success"]
        f.write(f"success_rate,{len(success) / len(rows)},0.0,{len(rows)}\n")
        for c in _METRIC_COLUMNS:
            vals = [r[c] for r in rows if np.isfinite(r[c])]
            mu, ts = mean_two_sigma(vals)
            f.write(f"{c},{mu},{ts},{len(vals)}\n")
    return rows


def save_runs(logs, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, log in enumerate(logs):
        path = os.path.join(out_dir, f"lap_{i:03d}.csv")
        save_runlog(log, path)
        paths.append(path)
    return paths


def load_runs(out_dir):
    names = sorted(n for n in os.listdir(out_dir)
                   if n.startswith("lap_") and n.endswith(".csv"))
    return [load_runlog(os.path.join(out_dir, n)) for n in names]
