"""Learned single-pixel flow dynamics and the combined robot+pixel model.

The regressor maps [q (4), u, v (2), body rates (3), scaled thrust (1)]
to the flow (l, theta) of that pixel in normalized units per second.
Thrust is scaled by 1 / (2 * mass * |g|) so it enters the network at unit
order like every other input; the same constant must be applied at
inference (it is part of the model contract, carried by the experiment
config alongside the weights file).

Targets come from the analytic flow oracle, so dataset collection needs
only course geometry, no rendering. An optional "cartesian" target mode
regresses (u_dot, v_dot) = (l cos theta, l sin theta) instead of raw
(l, theta), avoiding the +-pi wrap in the angle channel; the polar mode
is the default.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ControlInput, RobotState, VehicleParams, robot_derivative
from .neural import NetworkSpec, NetworkWeights, AdamState, adam_step, forward, loss_and_grad
from .vision import CameraModel, FlowVector, PixelState, flow_components_batch, project_batch

MIN_SAMPLE_DEPTH = 2.0  # ignore world points closer than this when sampling pixels [m]


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch):
        super().__init__(f"non-finite training loss at epoch {epoch}")
        self.epoch = epoch


def thrust_scale(params: VehicleParams) -> float:
    return 1.0 / (2.0 * params.mass * float(np.linalg.norm(params.gravity)))


def polar_to_euler(f: FlowVector):
    """(u_dot, v_dot) = (l cos theta, l sin theta)."""
    return f.l * np.cos(f.theta), f.l * np.sin(f.theta)


def make_input(q, pixel, omega, thrust, scale) -> np.ndarray:
    """Assemble the 10-vector [qw,qx,qy,qz,u,v,wx,wy,wz,thrust*scale]."""
    q = np.asarray(q, float)
    return np.concatenate([q, np.asarray(pixel, float), np.asarray(omega, float),
                           [thrust * scale]])


@dataclass
class DofDataset:
    inputs: np.ndarray    # (N, 10) float32
    targets: np.ndarray   # (N, 2) float32, (l, theta)
    metadata: dict = field(default_factory=dict)
    warning: bool = False

    def __len__(self):
        return len(self.inputs)

    def subset(self, idx) -> "DofDataset":
        return DofDataset(self.inputs[idx], self.targets[idx], dict(self.metadata),
                          self.warning)


DATASET_MAGIC = b"DFDS"
DATASET_VERSION = 1


def save_dataset(ds: DofDataset, path):
    meta = dict(ds.metadata)
    meta["warning"] = bool(ds.warning)
    blob = json.dumps(meta, sort_keys=True).encode()
    records = np.hstack([ds.inputs.astype("<f4"), ds.targets.astype("<f4")])
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<IQI", DATASET_VERSION, len(ds), len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(records).tobytes())


def load_dataset(path) -> DofDataset:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != DATASET_MAGIC:
        raise ValueError("bad dataset magic")
    version, n, blob_len = struct.unpack_from("<IQI", data, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    off = 4 + 16
    meta = json.loads(data[off:off + blob_len].decode())
    off += blob_len
    expect = n * 12 * 4
    if len(data) - off != expect:
        raise ValueError("truncated dataset file")
    records = np.frombuffer(data, "<f4", n * 12, off).reshape(n, 12)
    warning = bool(meta.pop("warning", False))
    return DofDataset(records[:, :10].copy(), records[:, 10:].copy(), meta, warning)


def sample_flow_targets(p, q, v, omega, course, cam: CameraModel, n_pixels: int,
                        rng: np.random.Generator):
    """In-frame world-point pixel samples and their oracle flow at one pose.

    Candidate points are the course's gate corners, gate centers, and the
    background cloud. Returns (uv (k,2), flow (k,2) as (l, theta)) with
    k <= n_pixels.
    """
    pts = [course.background] if len(course.background) else []
    pts.append(course.centers)
    pts.extend(g.corners for g in course.gates)
    points = np.vstack(pts)
    uv, front = project_batch(p[None, :], q[None, :], cam, points)
    uv, front = uv[0], front[0]
    in_frame = front & (uv[:, 0] >= 0) & (uv[:, 0] <= 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= 1)
    # Depth gate: very close points have unbounded flow and are skipped.
    from .dynamics import rotation_matrix
    R = rotation_matrix(q)
    axis = R @ cam.R_bc[:, 2]
    depth = (points - p) @ axis
    ok = np.flatnonzero(in_frame & (depth >= MIN_SAMPLE_DEPTH))
    if len(ok) == 0:
        return np.zeros((0, 2)), np.zeros((0, 2))
    if len(ok) > n_pixels:
        ok = rng.choice(ok, n_pixels, replace=False)
    k = len(ok)
    pz = np.broadcast_to(p, (k, 3))
    qz = np.broadcast_to(q, (k, 4))
    vz = np.broadcast_to(v, (k, 3))
    wz = np.broadcast_to(omega, (k, 3))
    u_dot, v_dot, _ = flow_components_batch(pz, qz, vz, wz, cam, points[ok])
    flow = np.column_stack([np.hypot(u_dot, v_dot), np.arctan2(v_dot, u_dot)])
    return uv[ok], flow


def collect_dataset(course, cfg, n_laps: int, speeds, pixels_per_frame: int,
                    seed: int):
    """Race the nominal controller and log pixel/flow training pairs.

    ``cfg`` is an ExperimentConfig used for vehicle, camera, cost, and MPPI
    parameters (pixel cost forced off). Returns (DofDataset, lap logs);
    the dataset's metadata records per-lap sample boundaries so held-out
    laps can be split off temporally. A crashed or timed-out lap yields a
    partial dataset with the warning flag set.
    """
    from .control import build_setup, pixelmpc_loop

    speeds = list(speeds)
    if n_laps <= 0:
        return DofDataset(np.zeros((0, 10), np.float32), np.zeros((0, 2), np.float32),
                          {"seed": seed, "course": course.course_id, "lap_starts": []},
                          warning=True), []
    seeds = np.random.SeedSequence(seed).spawn(n_laps)
    inputs, targets, lap_starts = [], [], []
    logs = []
    warning = False
    count = 0
    for lap in range(n_laps):
        speed = speeds[lap % len(speeds)]
        setup = build_setup(cfg, course, mode="nominal", desired_speed=speed)
        lap_seed = int(seeds[lap].generate_state(1)[0])
        pix_rng = np.random.default_rng(lap_seed ^ 0x5EED)
        samples = []

        def on_tick(p, q, v, u_ctrl, tick, samples=samples, pix_rng=pix_rng, speed=speed):
            uv, flow = sample_flow_targets(p, q, v, u_ctrl[:3], course, setup.cam,
                                           pixels_per_frame, pix_rng)
            if len(uv):
                k = len(uv)
                x = np.empty((k, 10), np.float32)
                x[:, 0:4] = q
                x[:, 4:6] = uv
                x[:, 6:9] = u_ctrl[:3]
                x[:, 9] = u_ctrl[3] * setup.u_scale
                samples.append((x, flow.astype(np.float32)))

        log = pixelmpc_loop(setup, seed=lap_seed, on_tick=on_tick)
        logs.append(log)
        if log.outcome != "success":
            warning = True
        lap_starts.append(count)
        for x, y in samples:
            inputs.append(x)
            targets.append(y)
            count += len(x)
    inputs = np.vstack(inputs) if inputs else np.zeros((0, 10), np.float32)
    targets = np.vstack(targets) if targets else np.zeros((0, 2), np.float32)
    meta = {"seed": seed, "course": course.course_id,
            "speeds": [speeds[l % len(speeds)] for l in range(n_laps)],
            "lap_starts": lap_starts, "n_laps": n_laps}
    return DofDataset(inputs, targets, meta, warning), logs


def split_by_laps(ds: DofDataset, holdout_laps: int):
    """Temporal train/test split holding out the last ``holdout_laps`` laps."""
    starts = list(ds.metadata.get("lap_starts", []))
    if holdout_laps <= 0 or len(starts) <= holdout_laps:
        raise ValueError("not enough laps to hold out")
    cut = starts[len(starts) - holdout_laps]
    return ds.subset(slice(0, cut)), ds.subset(slice(cut, len(ds)))


def targets_for_mode(targets: np.ndarray, target_mode: str) -> np.ndarray:
    if target_mode == "polar":
        return targets
    l, th = targets[:, 0], targets[:, 1]
    return np.column_stack([l * np.cos(th), l * np.sin(th)]).astype(targets.dtype)


def train_dof(dataset: DofDataset, spec: NetworkSpec, epochs: int, batch_size: int,
              seed: int, lr: float = 1e-3, test_dataset: DofDataset | None = None,
              target_mode: str = "polar", on_epoch=None) -> NetworkWeights:
    """Shuffled mini-batch training with Adam; deterministic for a seed.

    ``on_epoch(epoch, train_loss, test_loss)`` is called after each epoch
    (test_loss is None without a test set). Raises TrainingDiverged on a
    non-finite loss.
    """
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    from .neural import init_weights
    weights = init_weights(spec, seed)
    adam = AdamState.for_weights(weights, lr=lr)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD0F]))
    x = dataset.inputs
    y = targets_for_mode(dataset.targets, target_mode)
    n = len(x)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            loss, grads = loss_and_grad(weights, spec, x[idx], y[idx], rng=rng)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            adam, weights = adam_step(adam, weights, grads)
            total += loss * len(idx)
            seen += len(idx)
        train_loss = total / seen
        test_loss = None
        if test_dataset is not None and len(test_dataset):
            yt = targets_for_mode(test_dataset.targets, target_mode)
            pred = forward(weights, spec, test_dataset.inputs)
            test_loss = float(np.mean(np.sum((pred - yt) ** 2, axis=1)))
        if on_epoch is not None:
            on_epoch(epoch, train_loss, test_loss)
    return weights


def dof_predict(weights: NetworkWeights, spec: NetworkSpec, q, pixel, u_ctrl,
                params: VehicleParams, target_mode: str = "polar") -> FlowVector:
    """Single-pixel flow prediction in inference mode; l clamped at 0."""
    if isinstance(pixel, PixelState):
        pixel = pixel.as_array()
    if isinstance(u_ctrl, ControlInput):
        omega, thrust = u_ctrl.omega, u_ctrl.thrust
    else:
        omega, thrust = np.asarray(u_ctrl[:3]), float(u_ctrl[3])
    x = make_input(q, pixel, omega, thrust, thrust_scale(params))
    out = forward(weights, spec, x.astype(np.float32))
    if target_mode == "polar":
        return FlowVector(max(float(out[0]), 0.0), float(out[1]))
    return FlowVector(float(np.hypot(out[0], out[1])), float(np.arctan2(out[1], out[0])))


def pixel_derivative(weights, spec, q, pixel, u_ctrl, params, target_mode="polar"):
    """(u_dot, v_dot): polar_to_euler composed with the flow prediction."""
    return polar_to_euler(dof_predict(weights, spec, q, pixel, u_ctrl, params,
                                      target_mode))


@dataclass(frozen=True)
class CombinedState:
    robot: RobotState
    pixel: PixelState


def combined_derivative(x: CombinedState, u: ControlInput, weights, spec,
                        params: VehicleParams, target_mode: str = "polar"):
    """Stacked derivative (p_dot, q_dot, v_dot, u_dot, v_dot_px).

    The robot part is the nominal rigid-body model (w_f = 0); the pixel
    part reads only (q, pixel, control), never position or velocity.
    """
    p_dot, q_dot, v_dot = robot_derivative(x.robot, u, params)
    px_dot = pixel_derivative(weights, spec, x.robot.q, x.pixel, u, params, target_mode)
    return p_dot, q_dot, v_dot, np.array(px_dot)


class BatchFlowPredictor:
    """Preallocated-buffer batched inference for rollout loops.

    Calling with an (n, 10) float32 input returns an (n, 2) view of
    (u_dot, v_dot) in the configured target mode. n may vary up to max_n.
    """

    def __init__(self, weights: NetworkWeights, spec: NetworkSpec, max_n: int,
                 target_mode: str = "polar"):
        self.W = [np.ascontiguousarray(w, np.float32) for w in weights.W]
        self.b = [np.ascontiguousarray(b, np.float32) for b in weights.b]
        self.spec = spec
        self.target_mode = target_mode
        self._bufs = [np.empty((max_n, w.shape[1]), np.float32) for w in self.W]
        self._flow = np.empty((max_n, 2), np.float32)

    def raw(self, x: np.ndarray) -> np.ndarray:
        n = len(x)
        h = x
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            out = self._bufs[i][:n]
            np.dot(h, W, out=out)
            np.add(out, b, out=out)
            if i < len(self.W) - 1:
                np.maximum(out, 0, out=out)
            h = out
        return h

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out = self.raw(x)
        n = len(out)
        flow = self._flow[:n]
        if self.target_mode == "polar":
            l = np.maximum(out[:, 0], 0)
            np.multiply(l, np.cos(out[:, 1]), out=flow[:, 0])
            np.multiply(l, np.sin(out[:, 1]), out=flow[:, 1])
        else:
            flow[:] = out
        return flow


def rollout_pixel(predictor: BatchFlowPredictor, q_traj, controls, pixel0, dt: float,
                  u_scale: float) -> np.ndarray:
    """Euler rollout of the pixel under logged attitudes and controls.

    q_traj: (n, 4), controls: (n, 4) raw [wx, wy, wz, thrust]. Returns the
    (n + 1, 2) pixel trajectory, not clamped to the frame.
    """
    n = len(q_traj)
    if n < 1:
        raise ValueError("need at least one step")
    traj = np.empty((n + 1, 2))
    traj[0] = pixel0
    x = np.empty((1, 10), np.float32)
    for t in range(n):
        x[0, 0:4] = q_traj[t]
        x[0, 4:6] = traj[t]
        x[0, 6:9] = controls[t, :3]
        x[0, 9] = controls[t, 3] * u_scale
        flow = predictor(x)
        traj[t + 1] = traj[t] + dt * flow[0]
    return traj
