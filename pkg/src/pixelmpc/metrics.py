"""Run-log metrics: visibility loss, lap times, total variation, flow AEE."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .neural import NetworkSpec, NetworkWeights, forward
from .runlog import RunLog

FRAME_RATE = 40.0  # ticks per second; converts per-second flow to per-frame


def visibility_metrics(log: RunLog, thresholds=(0.5, 0.0)) -> dict:
    """Seconds with active-gate visibility at or below each threshold.

    The clock for a gate starts at the first tick the gate is seen at all
    and runs until the active gate changes.
    """
    if len(log) == 0:
        raise ValueError("empty run log")
    dt = float(log.t[1] - log.t[0]) if len(log) > 1 else 0.025
    out = {th: 0.0 for th in thresholds}
    seen_gates = set()
    counting = False
    current = None
    for i in range(len(log)):
        g = int(log.active_gate[i])
        if g != current:
            current = g
            counting = g in seen_gates
        if not counting and log.visibility[i] > 0:
            seen_gates.add(g)
            counting = True
            continue  # the sighting tick itself is never a loss tick
        if counting:
            for th in thresholds:
                if log.visibility[i] <= th:
                    out[th] += dt
    return out


def quat_to_euler_zyx(q: np.ndarray):
    """Yaw-pitch-roll (Z-Y-X) angles of quaternions stacked as (..., 4)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    yaw = np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))
    sinp = np.clip(2 * (w * y - z * x), -1.0, 1.0)
    pitch = np.arcsin(sinp)
    roll = np.arctan2(2 * (w * x + y * z), 1 - 2 * (x * x + y * y))
    return roll, pitch, yaw


def total_variation(log: RunLog):
    """(TV_roll, TV_pitch, TV_yaw) of the attitude trace, angles unwrapped."""
    if len(log) == 0:
        raise ValueError("empty run log")
    roll, pitch, yaw = quat_to_euler_zyx(log.states[:, 3:7])
    tv = []
    for ang in (roll, pitch, yaw):
        ang = np.unwrap(ang)
        tv.append(float(np.sum(np.abs(np.diff(ang)))))
    return tuple(tv)


@dataclass(frozen=True)
class AeeResult:
    per_second: float     # normalized units / s
    per_frame: float      # normalized units per 40 Hz frame
    px_per_frame: float   # pixels per frame via the image size


def aee(weights: NetworkWeights, spec: NetworkSpec, testset,
        target_mode: str = "polar", image_size=(204, 153)) -> AeeResult:
    """Average endpoint error between oracle and predicted flow vectors."""
    if len(testset) == 0:
        raise ValueError("empty test set")
    pred = forward(weights, spec, testset.inputs)
    if target_mode == "polar":
        pred_vec = np.column_stack([np.maximum(pred[:, 0], 0) * np.cos(pred[:, 1]),
                                    np.maximum(pred[:, 0], 0) * np.sin(pred[:, 1])])
    else:
        pred_vec = pred
    gt = testset.targets
    gt_vec = np.column_stack([gt[:, 0] * np.cos(gt[:, 1]), gt[:, 0] * np.sin(gt[:, 1])])
    err = pred_vec - gt_vec
    per_second = float(np.mean(np.linalg.norm(err, axis=1)))
    w, h = image_size
    err_px = err / FRAME_RATE * np.array([w, h])
    px_per_frame = float(np.mean(np.linalg.norm(err_px, axis=1)))
    return AeeResult(per_second, per_second / FRAME_RATE, px_per_frame)


def mean_two_sigma(values):
    """Sample mean and 2x sample standard deviation, the tables' format."""
    v = np.asarray(values, float)
    if len(v) == 0:
        return float("nan"), float("nan")
    if len(v) == 1:
        return float(v[0]), 0.0
    return float(np.mean(v)), float(2.0 * np.std(v, ddof=1))


def tracking_segments_from_log(log: RunLog, course, cam, length: int,
                               stride: int = 10):
    """Ground-truth pixel-tracking windows for multi-step prediction error.

    Each segment is a window of ``length`` ticks over which the active
    gate is constant and its center stays projectable; yields dicts with
    the attitude trace, executed controls, and the true pixel trajectory.
    """
    from .dynamics import RobotState
    from .vision import project
    n = len(log)
    segments = []
    for start in range(0, n - length, stride):
        g = int(log.active_gate[start])
        if np.any(log.active_gate[start:start + length + 1] != g):
            continue
        center = course.gates[g].center
        pixels = np.empty((length + 1, 2))
        ok = True
        for k in range(length + 1):
            s = log.states[start + k]
            px = project(RobotState(s[0:3], s[3:7], s[7:10]), cam, center)
            if px is None:
                ok = False
                break
            pixels[k] = (px.u, px.v)
        if not ok:
            continue
        segments.append({
            "q_traj": log.states[start:start + length, 3:7].copy(),
            "controls": log.controls[start:start + length].copy(),
            "pixels": pixels,
        })
    return segments


def multistep_pixel_error(predictor, segments, horizons, u_scale: float,
                          dt: float = 0.025):
    """Mean absolute pixel-prediction error per horizon over segments."""
    from .dof import rollout_pixel
    errs = {h: [] for h in horizons}
    for seg in segments:
        traj = rollout_pixel(predictor, seg["q_traj"], seg["controls"],
                             seg["pixels"][0], dt, u_scale)
        for h in horizons:
            e = np.abs(traj[h] - seg["pixels"][h]).mean()
            errs[h].append(e)
    return {h: float(np.mean(v)) for h, v in errs.items()}
