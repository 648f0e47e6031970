"""Per-tick race log and its CSV round trip."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CSV_HEADER = ("time,px,py,pz,qw,qx,qy,qz,vx,vy,vz,wx,wy,wz,thrust,"
              "target_u,target_v,visibility,active_gate,robot_cost,pixel_cost,cov_trace")


@dataclass
class RunLog:
    t: np.ndarray
    states: np.ndarray        # (n, 10) = p, q, v
    controls: np.ndarray      # (n, 4) executed [wx, wy, wz, thrust]
    target_px: np.ndarray     # (n, 2), NaN when no detection
    visibility: np.ndarray    # (n,)
    active_gate: np.ndarray   # (n,) int
    robot_cost: np.ndarray    # (n,) stage cost of the realized state
    pixel_cost: np.ndarray    # (n,)
    cov_trace: np.ndarray     # (n,), NaN when running on ground truth
    outcome: str = "timeout"  # success | crash | timeout
    lap_time: float = float("nan")
    seed: int = 0
    mode: str = "nominal"
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)


def _fmt(x):
    return "" if np.isnan(x) else repr(float(x))


def save_runlog(log: RunLog, path):
    with open(path, "w") as f:
        f.write(f"# outcome = {log.outcome}\n")
        f.write(f"# lap_time = {_fmt(log.lap_time) or 'nan'}\n")
        f.write(f"# seed = {log.seed}\n")
        f.write(f"# mode = {log.mode}\n")
        f.write(CSV_HEADER + "\n")
        for i in range(len(log)):
            row = ([repr(float(log.t[i]))]
                   + [repr(float(x)) for x in log.states[i]]
                   + [repr(float(x)) for x in log.controls[i]]
                   + [_fmt(log.target_px[i, 0]), _fmt(log.target_px[i, 1])]
                   + [repr(float(log.visibility[i])), str(int(log.active_gate[i])),
                      repr(float(log.robot_cost[i])), repr(float(log.pixel_cost[i])),
                      _fmt(log.cov_trace[i]) or "nan"])
            f.write(",".join(row) + "\n")


def load_runlog(path) -> RunLog:
    meta = {}
    rows = []
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if line.startswith("#"):
                k, _, v = line[1:].partition("=")
                meta[k.strip()] = v.strip()
            elif line and not line.startswith("time,"):
                rows.append(line.split(","))
    n = len(rows)
    cols = np.full((n, 22), np.nan)
    gate = np.zeros(n, int)
    for i, r in enumerate(rows):
        for j, cell in enumerate(r):
            if j == 18:
                gate[i] = int(cell)
            elif cell:
                cols[i, j] = float(cell)
    return RunLog(cols[:, 0], cols[:, 1:11], cols[:, 11:15], cols[:, 15:17],
                  cols[:, 17], gate, cols[:, 19], cols[:, 20], cols[:, 21],
                  outcome=meta.get("outcome", "timeout"),
                  lap_time=float(meta.get("lap_time", "nan")),
                  seed=int(meta.get("seed", "0")),
                  mode=meta.get("mode", "nominal"))
