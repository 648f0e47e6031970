"""Nominal racing vs perception-aware racing, same seeds, side by side.

The perception-aware controller adds one term to the rollout cost: the
predicted distance of the next gate's image-plane pixel from the frame
center over the first second of each candidate trajectory, using the
learned flow network from demo 02. The result is a small lap-time price
paid for keeping the gate in view much more of the time.

Run demo 02 first (it writes out/dof.weights), then:

    python demos/03_perception_tradeoff.py [--weights out/dof.weights]
"""

import argparse
import os
import sys

from pixelmpc.config import ExperimentConfig
from pixelmpc.control import build_setup, pixelmpc_loop
from pixelmpc.course import default_course
from pixelmpc.metrics import total_variation, visibility_metrics
from pixelmpc.neural import load_weights

# Weighting used for the head-to-head comparison: the racing weights and
# the softmax temperature are scaled together (which leaves nominal
# behavior unchanged) so the fixed pixel weight stops drowning out the
# racing objective, and the attitude-alignment weight is nearly removed so
# pointing the camera is up to the controller, not the cost prior.
KAPPA = 1e4
C2_SCALE = 0.005


def make_cfg(mode):
    cfg = ExperimentConfig(mode=mode, cam_pitch=0.15, hfov=1.0,
                           desired_speed=14.0)
    cfg.c1 *= KAPPA
    cfg.c2 *= KAPPA * C2_SCALE
    cfg.c3 *= KAPPA
    cfg.temperature *= KAPPA
    return cfg


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--weights", default="out/dof.weights")
    ap.add_argument("--seeds", type=int, nargs="+", default=[101, 202, 303])
    args = ap.parse_args()
    if not os.path.exists(args.weights):
        sys.exit(f"{args.weights} not found - run demos/02_train_flow_net.py first")
    weights, spec = load_weights(args.weights)
    course = default_course()

    print(f"{'mode':<12}{'seed':>6}{'outcome':>9}{'lap [s]':>9}"
          f"{'low-vis [s]':>13}{'attitude TV [rad]':>19}")
    means = {}
    for mode in ("nominal", "pixelmpc"):
        cfg = make_cfg(mode)
        kwargs = {"weights": weights, "spec": spec} if mode == "pixelmpc" else {}
        setup = build_setup(cfg, course, **kwargs)
        laps, low_vis = [], []
        for seed in args.seeds:
            log = pixelmpc_loop(setup, seed=seed)
            vis = visibility_metrics(log)
            tv = sum(total_variation(log))
            print(f"{mode:<12}{seed:>6}{log.outcome:>9}{log.lap_time:>9.2f}"
                  f"{vis[0.5]:>13.2f}{tv:>19.1f}")
            laps.append(log.lap_time)
            low_vis.append(vis[0.5])
        means[mode] = (sum(laps) / len(laps), sum(low_vis) / len(low_vis))

    lap_n, vis_n = means["nominal"]
    lap_p, vis_p = means["pixelmpc"]
    print(f"\nlap time: {lap_n:.2f} s -> {lap_p:.2f} s "
          f"({100 * (lap_p / lap_n - 1):+.1f}%)")
    print(f"time with the gate under half visible: {vis_n:.2f} s -> {vis_p:.2f} s "
          f"({100 * (1 - vis_p / vis_n):.0f}% less)")


if __name__ == "__main__":
    main()
