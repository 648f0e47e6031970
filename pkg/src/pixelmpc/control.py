"""Sampling-based MPC over the combined robot+pixel dynamics.

The racing cost penalizes corridor deviation (through a [-1, 1] path
indicator that jumps to 1000 on a gate-frame hit), attitude error to the
segment-aligned level-roll heading, and velocity error to the desired
speed along the segment. The pixel cost is an L1 pull of the tracked
gate-center pixel toward the image center, active only while a detection
exists and only over the pixel-cost horizon t_f.

The optimizer perturbs a warm-started control sequence with per-channel
Gaussian noise, rolls all samples forward in one vectorized batch, and
averages the perturbations with exponentially cost-weighted weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ControlInput, RobotState, VehicleParams, step_batch
from .dof import BatchFlowPredictor, thrust_scale
from .neural import NetworkSpec, NetworkWeights
from .vision import CameraModel, PixelState, detect_gate, visibility_fraction
from .runlog import RunLog

CRASH_H = 1000.0


class OptimizerFailure(RuntimeError):
    """Every sampled rollout diverged; caller should hold the last control."""


@dataclass(frozen=True)
class CostParams:
    c1: float = 400.0
    c2: float = 250.0
    c3: float = 8.0
    c_pixel: float = 9.0e6
    t_f_pixel: float = 1.0            # pixel-cost horizon [s]
    crash_penalty: float = CRASH_H
    desired_speed: float = 14.0
    center: tuple = (0.5, 0.5)

    def __post_init__(self):
        if min(self.c1, self.c2, self.c3, self.c_pixel) < 0:
            raise ValueError("cost weights must be non-negative")


@dataclass(frozen=True)
class MppiConfig:
    horizon: int = 80
    samples: int = 512
    iterations: int = 1
    dt: float = 0.025
    temperature: float = 1.0
    sigma: tuple = (0.2, 0.2, 0.3, 2.2)   # roll, pitch, yaw rate, thrust
    omega_max: float = 3.0
    thrust_max: float = 2.0 * 9.81        # for unit mass; build_setup scales by m|g|

    def __post_init__(self):
        if self.horizon < 1 or self.samples < 1 or self.iterations < 1:
            raise ValueError("horizon, samples, iterations must be >= 1")
        if min(self.sigma) <= 0:
            raise ValueError("control noise must be positive")

    def clip_controls(self, u):
        np.clip(u[..., :3], -self.omega_max, self.omega_max, out=u[..., :3])
        np.clip(u[..., 3], 0.0, self.thrust_max, out=u[..., 3])
        return u


def h_path_indicator(p, course, seg_idx: int) -> float:
    """Path indicator: 1000 inside any gate frame, else clamp(2 d/d_max - 1)."""
    for i in range(course.n_gates):
        if course.in_frame_material(p, i):
            return CRASH_H
    d = course.segment_distance(p, seg_idx)
    return float(np.clip(2.0 * d / course.d_max - 1.0, -1.0, 1.0))


def robot_cost(state: RobotState, params: CostParams, course, seg_idx: int,
               dt: float = 0.025) -> float:
    """One racing stage cost: (c1 h^2 + c2 |q_d - q|^2 + c3 |v_d - v|^2) dt."""
    h = h_path_indicator(state.p, course, seg_idx)
    q_d = course.seg_quat[seg_idx]
    q = state.q if float(state.q @ q_d) >= 0 else -state.q
    v_d = params.desired_speed * course.seg_dir[seg_idx]
    return float((params.c1 * h * h
                  + params.c2 * np.sum((q_d - q) ** 2)
                  + params.c3 * np.sum((v_d - state.v) ** 2)) * dt)


def pixel_cost(pixel_traj, params: CostParams, detection_present: bool,
               dt: float = 0.025) -> float:
    """c_pixel sum over steps with t dt < t_f of L1(pixel, center) dt."""
    if not detection_present or params.c_pixel == 0:
        return 0.0
    traj = np.atleast_2d(np.asarray(pixel_traj, float))
    n_active = min(len(traj), int(math.ceil(params.t_f_pixel / dt - 1e-12)))
    if n_active <= 0:
        return 0.0
    l1 = np.abs(traj[:n_active] - np.asarray(params.center)).sum(axis=1)
    return float(params.c_pixel * np.sum(np.minimum(l1, 1.0)) * dt)


class RolloutEngine:
    """Vectorized batch rollout of the combined dynamics with cost accumulation.

    One engine is built per course/parameter set and reused every tick.
    The flow predictor is optional; without it (or without a detection)
    rollouts are pure racing rollouts and never touch the network.
    """

    def __init__(self, course, vehicle: VehicleParams, cost: CostParams,
                 cfg: MppiConfig, predictor: BatchFlowPredictor | None = None):
        self.course = course
        self.vehicle = vehicle
        self.cost = cost
        self.cfg = cfg
        self.predictor = predictor
        self.u_scale = thrust_scale(vehicle)
        # Per-gate geometry stacked for fancy-indexed lookups.
        self.centers = course.centers
        self.normals = course.normals
        self.side = course.gate_side
        self.up = course.gate_up
        self.half = course.half_opening
        self.framew = course.frame_w
        self.n_gates = course.n_gates
        self.n_pixel_steps = int(math.ceil(cost.t_f_pixel / cfg.dt - 1e-12))
        # Static argument pack for the compiled fast path.
        dummy = np.zeros((1, 1), np.float32)
        dummy_b = np.zeros(1, np.float32)
        if predictor is not None:
            Ws, bs = predictor.W, predictor.b
            polar = predictor.target_mode == "polar"
        else:
            Ws, bs = [dummy] * 4, [dummy_b] * 4
            polar = True
        geo = [np.ascontiguousarray(a, float) for a in
               (course.seg_start, course.seg_dir, course.seg_len, course.seg_quat,
                self.centers, self.normals, self.side, self.up, self.half,
                self.framew)]
        self._fast_static = (tuple(geo), float(course.d_max),
                             float(cost.c1), float(cost.c2), float(cost.c3),
                             float(cost.desired_speed), float(cfg.dt),
                             float(vehicle.mass), float(vehicle.drag_coeff),
                             np.asarray(vehicle.gravity, float),
                             float(cost.c_pixel), self.n_pixel_steps,
                             float(cost.center[0]), float(cost.center[1]),
                             float(self.u_scale), polar,
                             Ws[0], bs[0], Ws[1], bs[1], Ws[2], bs[2], Ws[3], bs[3])

    def _rollout_costs_fast(self, p0, q0, v0, seg0, u_seqs, pixel0, use_pixel):
        from ._kernels import rollout_costs
        (geo, d_max, c1, c2, c3, speed, dt, mass, drag, gvec, c_pixel,
         n_pix, cx, cy, u_scale, polar, W0, b0, W1, b1, W2, b2, W3, b3) \
            = self._fast_static
        pix0 = (np.asarray(pixel0, float) if use_pixel else np.zeros(2))
        return rollout_costs(
            np.asarray(p0, float), np.asarray(q0, float), np.asarray(v0, float),
            seg0, np.ascontiguousarray(u_seqs, float), *geo,
            d_max, c1, c2, c3, speed, dt, mass, drag, gvec,
            use_pixel, pix0, c_pixel, n_pix, cx, cy, u_scale, polar,
            W0, b0, W1, b1, W2, b2, W3, b3)

    def _stage_costs(self, p, q, v, seg, crashed, dt):
        course, cost = self.course, self.cost
        a = course.seg_start[seg]
        dvec = course.seg_dir[seg]
        L = course.seg_len[seg]
        rel = p - a
        tproj = np.clip(np.einsum("ni,ni->n", rel, dvec), 0.0, L)
        d = np.linalg.norm(rel - tproj[:, None] * dvec, axis=1)
        h = np.clip(2.0 * d / course.d_max - 1.0, -1.0, 1.0)
        h = np.where(crashed, CRASH_H, h)
        q_d = course.seg_quat[seg]
        sign = np.where(np.einsum("ni,ni->n", q, q_d) >= 0, 1.0, -1.0)
        qerr = np.sum((q * sign[:, None] - q_d) ** 2, axis=1)
        verr = np.sum((v - cost.desired_speed * dvec) ** 2, axis=1)
        return (cost.c1 * h * h + cost.c2 * qerr + cost.c3 * verr) * dt

    def _advance_and_crash(self, p_old, p_new, seg, crashed):
        """Gate-plane crossing: advance through the opening, crash on frame."""
        c = self.centers[seg]
        n = self.normals[seg]
        d0 = np.einsum("ni,ni->n", p_old - c, n)
        d1 = np.einsum("ni,ni->n", p_new - c, n)
        crossing = (d0 > 0) & (d1 <= 0)
        if np.any(crossing):
            alpha = d0 / (d0 - d1 + 1e-300)
            cross = p_old + alpha[:, None] * (p_new - p_old)
            relc = cross - c
            ain = np.abs(np.einsum("ni,ni->n", relc, self.side[seg]))
            bin_ = np.abs(np.einsum("ni,ni->n", relc, self.up[seg]))
            m = np.maximum(ain, bin_)
            through = crossing & (m <= self.half[seg])
            hit = crossing & (m > self.half[seg]) & (m <= self.half[seg] + self.framew[seg])
            crashed |= hit
            adv = through & (seg < self.n_gates - 1)
            seg = seg + adv.astype(seg.dtype)
        crashed |= p_new[:, 2] <= 0.0   # ground contact, same as the plant
        # Lateral frame hits that never cross the plane.
        relg = p_new - self.centers[seg]
        dn = np.abs(np.einsum("ni,ni->n", relg, self.normals[seg]))
        ain = np.abs(np.einsum("ni,ni->n", relg, self.side[seg]))
        bin_ = np.abs(np.einsum("ni,ni->n", relg, self.up[seg]))
        m = np.maximum(ain, bin_)
        slab = (dn <= self.framew[seg] / 2) & (m > self.half[seg]) \
            & (m <= self.half[seg] + self.framew[seg])
        crashed |= slab
        return seg, crashed

    def rollout_batch(self, p0, q0, v0, seg0: int, u_seqs, pixel0=None, record=False):
        """Roll N control sequences (N, T, 4) from a shared initial state.

        Returns (costs, traces) where traces is None unless ``record``:
        then it is a dict with per-step states, pixels, stage costs, and
        segment indices for offline recomputation.
        """
        cfg = self.cfg
        N, T, _ = u_seqs.shape
        if not record:
            use_pixel = (pixel0 is not None and self.predictor is not None
                         and self.cost.c_pixel > 0)
            return self._rollout_costs_fast(p0, q0, v0, seg0, u_seqs, pixel0,
                                            use_pixel), None
        p = np.broadcast_to(p0, (N, 3)).copy()
        q = np.broadcast_to(q0, (N, 4)).copy()
        v = np.broadcast_to(v0, (N, 3)).copy()
        seg = np.full(N, seg0, int)
        crashed = np.zeros(N, bool)
        costs = np.zeros(N)
        use_pixel = (pixel0 is not None and self.predictor is not None
                     and self.cost.c_pixel > 0)
        if use_pixel:
            pix = np.broadcast_to(np.asarray(pixel0, float), (N, 2)).copy()
            net_in = np.empty((N, 10), np.float32)
            cx, cy = self.cost.center
            pix_weight = self.cost.c_pixel * cfg.dt
        traces = None
        if record:
            traces = {"states": np.empty((N, T + 1, 10)), "pixels": None,
                      "stage": np.empty((N, T)), "seg": np.empty((N, T), int)}
            traces["states"][:, 0, 0:3] = p
            traces["states"][:, 0, 3:7] = q
            traces["states"][:, 0, 7:10] = v
            if use_pixel:
                traces["pixels"] = np.empty((N, T + 1, 2))
                traces["pixels"][:, 0] = pix
        for t in range(T):
            stage = self._stage_costs(p, q, v, seg, crashed, cfg.dt)
            if use_pixel and t < self.n_pixel_steps:
                l1 = np.abs(pix[:, 0] - cx) + np.abs(pix[:, 1] - cy)
                stage = stage + pix_weight * np.minimum(l1, 1.0)
            costs += stage
            if record:
                traces["stage"][:, t] = stage
                traces["seg"][:, t] = seg
            u_t = u_seqs[:, t, :]
            # pix_{t+1} is needed while the pixel cost is still active, or
            # for the full trajectory when recording.
            if use_pixel and (record or t + 1 < self.n_pixel_steps):
                net_in[:, 0:4] = q
                net_in[:, 4:6] = pix
                net_in[:, 6:9] = u_t[:, :3]
                net_in[:, 9] = u_t[:, 3] * self.u_scale
                flow = self.predictor(net_in)
                pix = pix + cfg.dt * flow
            p_new, q, v = step_batch(p, q, v, u_t[:, :3], u_t[:, 3], self.vehicle, cfg.dt)
            seg, crashed = self._advance_and_crash(p, p_new, seg, crashed)
            p = p_new
            if record:
                traces["states"][:, t + 1, 0:3] = p
                traces["states"][:, t + 1, 3:7] = q
                traces["states"][:, t + 1, 7:10] = v
                if use_pixel:
                    traces["pixels"][:, t + 1] = pix
        bad = ~np.isfinite(costs)
        if np.any(bad):
            costs[bad] = np.inf
        return costs, traces


@dataclass
class RolloutResult:
    states: np.ndarray      # (T+1, 10)
    pixels: np.ndarray | None
    stage_costs: np.ndarray
    seg_idx: np.ndarray
    cost: float


def rollout(x0, u_seq, engine: RolloutEngine, seg_idx: int = 0,
            detection_present: bool = True) -> RolloutResult:
    """Single-sequence rollout with full trajectory capture.

    x0 is a CombinedState (or RobotState when no pixel is tracked); the
    total cost is exactly the sum of the returned stage costs.
    """
    from .dof import CombinedState
    if isinstance(x0, CombinedState):
        robot, pixel0 = x0.robot, x0.pixel.as_array()
    else:
        robot, pixel0 = x0, None
    if not detection_present:
        pixel0 = None
    u = np.asarray(u_seq, float)[None, :, :]
    costs, traces = engine.rollout_batch(robot.p, robot.q, robot.v, seg_idx, u,
                                         pixel0, record=True)
    return RolloutResult(traces["states"][0],
                         None if traces["pixels"] is None else traces["pixels"][0],
                         traces["stage"][0], traces["seg"][0], float(costs[0]))


def mppi_weights(costs: np.ndarray, temperature: float) -> np.ndarray:
    """Exponentially tilted weights from rollout costs, min-shifted."""
    beta = np.min(costs)
    w = np.exp(-(costs - beta) / temperature)
    s = w.sum()
    if s == 0 or not np.isfinite(s):
        raise OptimizerFailure("all rollouts have infinite cost")
    return w / s


def mppi_step(p0, q0, v0, seg0: int, pixel0, u_init, engine: RolloutEngine,
              rng: np.random.Generator) -> np.ndarray:
    """K refinement iterations of the sampling update; returns (T, 4)."""
    cfg = engine.cfg
    sigma = np.asarray(cfg.sigma)
    u = np.asarray(u_init, float).copy()
    for _ in range(cfg.iterations):
        eps = rng.standard_normal((cfg.samples, cfg.horizon, 4)) * sigma
        samples = cfg.clip_controls(u[None, :, :] + eps)
        costs, _ = engine.rollout_batch(p0, q0, v0, seg0, samples, pixel0)
        if not np.any(np.isfinite(costs)):
            raise OptimizerFailure("all rollouts have infinite cost")
        w = mppi_weights(costs, cfg.temperature)
        u = u + np.einsum("n,ntc->tc", w, samples - u[None, :, :])
        cfg.clip_controls(u)
    return u


@dataclass
class RaceSetup:
    """Bundle of everything one lap needs; build once, race many seeds."""
    course: object
    vehicle: VehicleParams
    cam: CameraModel
    cost: CostParams
    cfg: MppiConfig
    predictor: BatchFlowPredictor | None = None
    state_source: str = "truth"
    filter_config: object = None
    detector_noise_std: float = 0.0
    plant_noise: bool = False
    max_time: float = 60.0
    mode: str = "nominal"

    @property
    def u_scale(self):
        return thrust_scale(self.vehicle)

    def engine(self) -> RolloutEngine:
        return RolloutEngine(self.course, self.vehicle, self.cost, self.cfg,
                             self.predictor)


def build_setup(cfg, course, mode=None, desired_speed=None,
                weights: NetworkWeights | None = None,
                spec: NetworkSpec | None = None) -> RaceSetup:
    """Assemble a RaceSetup from an ExperimentConfig.

    ``mode`` / ``desired_speed`` override the config (data collection runs
    the nominal controller at several speeds from one config).
    """
    from .estimation import FilterConfig
    from .neural import load_weights
    mode = mode or cfg.mode
    vehicle = VehicleParams(cfg.mass, drag_coeff=cfg.drag_coeff,
                            force_noise_std=np.full(3, cfg.plant_noise_std))
    cam = CameraModel(cfg.hfov, cfg.vfov, cfg.image_width, cfg.image_height,
                      cfg.cam_pitch)
    c_pixel = cfg.c_pixel if mode == "pixelmpc" else 0.0
    cost = CostParams(cfg.c1, cfg.c2, cfg.c3, c_pixel, cfg.t_f_pixel,
                      desired_speed=desired_speed or cfg.desired_speed)
    mcfg = MppiConfig(cfg.horizon, cfg.samples, cfg.iterations, cfg.dt,
                      cfg.temperature, cfg.sigma, cfg.omega_max,
                      thrust_max=2.0 * vehicle.hover_thrust)
    predictor = None
    if mode == "pixelmpc":
        if weights is None:
            if not cfg.weights_path:
                raise ValueError("pixelmpc mode needs a weights file")
            weights, spec = load_weights(cfg.weights_path)
        predictor = BatchFlowPredictor(weights, spec or NetworkSpec(), cfg.samples,
                                       cfg.target_mode)
    fc = None
    if cfg.state_source == "particle_filter":
        fc = FilterConfig(cfg.pf_particles, cfg.pf_pos_noise, cfg.pf_accel_noise,
                          cfg.pf_rate_noise, cfg.pf_meas_std_px, cfg.pf_ess_fraction,
                          cfg.image_width, cfg.image_height)
    return RaceSetup(course, vehicle, cam, cost, mcfg, predictor,
                     cfg.state_source, fc, cfg.detector_noise_std,
                     cfg.plant_noise_std > 0, cfg.max_time, mode)


def pixelmpc_loop(setup: RaceSetup, seed: int = 0, on_tick=None) -> RunLog:
    """Run one lap of the receding-horizon loop at 1/dt Hz.

    Each tick: read the state (truth or filter estimate), detect the
    active gate, refine the control sequence, execute its head on the
    plant, shift for warm start, and advance the active gate on a clean
    crossing. ``on_tick(p, q, v, u_exec, tick)`` observes the plant state
    right before execution (used by dataset collection).
    """
    from .dynamics import robot_derivative, step
    from .estimation import ParticleFilter, simulate_imu
    course, vehicle, cam, cfg = setup.course, setup.vehicle, setup.cam, setup.cfg
    engine = setup.engine()
    ss = np.random.SeedSequence([seed, 0xACE])
    rng_mppi, rng_plant, rng_det, rng_pf = [np.random.default_rng(s)
                                            for s in ss.spawn(4)]
    p, q, v = course.start_state_arrays()
    hover = np.array([0.0, 0.0, 0.0, vehicle.hover_thrust])
    u_seq = np.tile(hover, (cfg.horizon, 1))
    pf = None
    if setup.state_source == "particle_filter":
        pf = ParticleFilter(setup.filter_config, p, q, v, rng_pf)
    seg = 0
    max_ticks = int(round(setup.max_time / cfg.dt))
    n_alloc = max_ticks + 1
    T = {"t": np.zeros(n_alloc), "states": np.zeros((n_alloc, 10)),
         "controls": np.zeros((n_alloc, 4)), "target": np.full((n_alloc, 2), np.nan),
         "vis": np.zeros(n_alloc), "gate": np.zeros(n_alloc, int),
         "rc": np.zeros(n_alloc), "pc": np.zeros(n_alloc),
         "cov": np.full(n_alloc, np.nan)}
    outcome, lap_time = "timeout", float("nan")
    tick = 0
    while tick < max_ticks:
        truth = RobotState(p, q, v)
        if pf is not None:
            est_state, cov = pf.estimate()
            cov_trace = float(np.trace(cov))
        else:
            est_state, cov_trace = truth, float("nan")
        gate = course.gates[seg]
        detection = detect_gate(truth, cam, gate, setup.detector_noise_std, rng_det)
        vis = visibility_fraction(truth, cam, gate)
        pixel0 = None
        if detection is not None and setup.predictor is not None and setup.cost.c_pixel > 0:
            pixel0 = detection.center.as_array()
        try:
            u_seq = mppi_step(est_state.p, est_state.q, est_state.v, seg, pixel0,
                              u_seq, engine, rng_mppi)
        except OptimizerFailure:
            pass  # hold the previous (shifted) sequence
        u0 = u_seq[0].copy()
        # Log the realized tick.
        stage_r = robot_cost(truth, setup.cost, course, seg, cfg.dt)
        stage_p = 0.0
        if pixel0 is not None:
            stage_p = float(setup.cost.c_pixel * cfg.dt *
                            (abs(pixel0[0] - setup.cost.center[0])
                             + abs(pixel0[1] - setup.cost.center[1])))
        T["t"][tick] = tick * cfg.dt
        T["states"][tick, 0:3], T["states"][tick, 3:7], T["states"][tick, 7:10] = p, q, v
        T["controls"][tick] = u0
        if detection is not None:
            T["target"][tick] = detection.center.as_array()
        T["vis"][tick] = vis
        T["gate"][tick] = seg
        T["rc"][tick], T["pc"][tick], T["cov"][tick] = stage_r, stage_p, cov_trace
        if on_tick is not None:
            on_tick(p.copy(), q.copy(), v.copy(), u0, tick)
        # Plant step (optionally with the stochastic force).
        u_in = ControlInput(u0[:3], u0[3])
        noise_rng = rng_plant if setup.plant_noise else None
        _, _, v_dot = robot_derivative(truth, u_in, vehicle)
        try:
            new = step(truth, u_in, vehicle, cfg.dt, noise_rng)
        except FloatingPointError:
            outcome = "crash"
            tick += 1
            break
        # Estimator update (the synthetic IMU reads the true derivative).
        if pf is not None:
            imu = simulate_imu(q, v_dot, u0[:3], setup.filter_config, rng_pf)
            pf.motion_update(imu, cfg.dt)
            dets = []
            for g in course.gates:
                d = detect_gate(truth, cam, g, setup.detector_noise_std, rng_det)
                if d is not None:
                    dets.append(d)
            pf.sensor_update(dets, course, cam)
            pf.maybe_resample()
        # Gate crossing / crash on the true state.
        c, n = course.centers[seg], course.normals[seg]
        p_old = p
        d0 = float((p - c) @ n)
        d1 = float((new.p - c) @ n)
        p, q, v = new.p, new.q, new.v
        tick += 1
        if d0 > 0 >= d1:
            alpha = d0 / (d0 - d1) if d0 != d1 else 0.0
            cross = p_old + alpha * (p - p_old)
            relc = cross - c
            m = max(abs(relc @ course.gate_side[seg]), abs(relc @ course.gate_up[seg]))
            if m <= course.half_opening[seg]:
                if seg == course.n_gates - 1:
                    outcome, lap_time = "success", tick * cfg.dt
                    break
                seg += 1
            elif m <= course.half_opening[seg] + course.frame_w[seg]:
                outcome = "crash"
                break
        if p[2] <= 0.0 or any(course.in_frame_material(p, i)
                              for i in (seg, max(seg - 1, 0))):
            outcome = "crash"
            break
        # Warm start: shift and refill the tail with hover.
        u_seq[:-1] = u_seq[1:]
        u_seq[-1] = hover
    n = tick
    return RunLog(T["t"][:n], T["states"][:n], T["controls"][:n], T["target"][:n],
                  T["vis"][:n], T["gate"][:n], T["rc"][:n], T["pc"][:n], T["cov"][:n],
                  outcome=outcome, lap_time=lap_time, seed=seed, mode=setup.mode)
