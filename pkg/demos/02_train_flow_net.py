"""Collect pixel-flow training data and fit the flow network.

The nominal controller races the course at several target speeds while a
logger samples random in-frame pixels each tick and records the exact
image-plane flow of the world points they see (computed analytically from
the camera motion, no rendering involved). A small ReLU network then learns
to predict that flow from attitude, pixel location, body rates, and thrust
alone, which is what lets the controller roll a pixel forward through a
candidate control sequence without knowing the scene.

Run:  python demos/02_train_flow_net.py [--laps 10] [--epochs 40] [--out out]

Defaults match the full experiment pipeline (about 7 minutes). For a quick
look, try --laps 3 --epochs 4.
"""

import argparse
import os

from pixelmpc.config import ExperimentConfig
from pixelmpc.course import default_course
from pixelmpc.dof import collect_dataset, save_dataset, split_by_laps, train_dof
from pixelmpc.metrics import aee
from pixelmpc.neural import NetworkSpec, save_weights


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--laps", type=int, default=10)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--out", default="out")
    args = ap.parse_args()

    cfg = ExperimentConfig(cam_pitch=0.15, hfov=1.0)
    course = default_course()
    speeds = cfg.collect_speeds
    print(f"collecting {args.laps} laps at speeds {speeds} ...")
    ds, logs = collect_dataset(course, cfg, args.laps, speeds,
                               cfg.pixels_per_frame, cfg.master_seed)
    outcomes = [log.outcome for log in logs]
    print(f"{len(ds)} samples from {len(logs)} laps ({outcomes.count('success')} clean)")

    holdout = min(cfg.holdout_laps, max(1, args.laps - 1))
    train, test = split_by_laps(ds, holdout)
    spec = NetworkSpec(dropout=cfg.dropout)
    print(f"training {spec.widths} network, {args.epochs} epochs on "
          f"{len(train)} samples (holding out the last {holdout} laps) ...")

    def on_epoch(epoch, train_loss, test_loss):
        print(f"  epoch {epoch:3d}  train loss {train_loss:.4f}  "
              f"test loss {test_loss:.4f}")

    weights = train_dof(train, spec, args.epochs, cfg.batch_size,
                        cfg.master_seed, lr=cfg.learning_rate,
                        test_dataset=test, target_mode=cfg.target_mode,
                        on_epoch=on_epoch)

    result = aee(weights, spec, test, target_mode=cfg.target_mode)
    print(f"held-out flow error: {result.per_frame:.4f} normalized units per "
          f"25 ms frame ({result.px_per_frame:.2f} px on the 204x153 image)")

    os.makedirs(args.out, exist_ok=True)
    save_dataset(ds, os.path.join(args.out, "demo.dfds"))
    save_weights(weights, spec, os.path.join(args.out, "dof.weights"))
    print(f"wrote {args.out}/demo.dfds and {args.out}/dof.weights")


if __name__ == "__main__":
    main()
