"""Particle-filter state estimation from synthetic IMU and gate detections.

Motion update integrates a noisy IMU per particle through the rigid-body
kinematics and then inflates position with extra Gaussian noise, which
keeps the filter responsive but makes it balloon without detections.
The sensor update reprojects each expected-visible gate's corners from
every particle and scores the pixel-space residual against the detected
corners; an expected gate with no detection is penalized as a 4-image-width
residual. All particle math is vectorized across the whole set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import RobotState, GRAVITY, rotation_matrix, rotation_matrix_batch, \
    quat_derivative_batch
from .vision import CameraModel, project_batch


@dataclass(frozen=True)
class FilterConfig:
    n_particles: int = 6400
    pos_noise: float = 0.2      # position inflation std [m]
    accel_noise: float = 0.2    # IMU accel noise std [m/s^2]
    rate_noise: float = 0.1     # IMU rate noise std [rad/s]
    meas_std_px: float = 8.0    # reprojection likelihood std [px]
    ess_fraction: float = 0.5   # resample when ESS < fraction * N
    image_width: int = 204
    image_height: int = 153

    def __post_init__(self):
        if self.n_particles <= 0:
            raise ValueError("particle count must be positive")
        if min(self.pos_noise, self.accel_noise, self.rate_noise) < 0:
            raise ValueError("noise stds must be non-negative")

    @property
    def missing_penalty_px(self) -> float:
        return 4.0 * self.image_width


@dataclass(frozen=True)
class ImuReading:
    accel: np.ndarray   # body-frame specific force [m/s^2]
    rates: np.ndarray   # body rates [rad/s]


@dataclass
class Particles:
    p: np.ndarray   # (N, 3)
    q: np.ndarray   # (N, 4)
    v: np.ndarray   # (N, 3)
    w: np.ndarray   # (N,), normalized

    @property
    def n(self):
        return len(self.w)


def simulate_imu(q_true, v_dot_true, omega_true, config: FilterConfig,
                 rng: np.random.Generator) -> ImuReading:
    """Synthesize what the onboard IMU would read for the true motion."""
    R = rotation_matrix(np.asarray(q_true, float))
    specific = R.T @ (np.asarray(v_dot_true, float) - GRAVITY)
    accel = specific + rng.normal(0.0, config.accel_noise, 3)
    rates = np.asarray(omega_true, float) + rng.normal(0.0, config.rate_noise, 3)
    return ImuReading(accel, rates)


def init_particles(config: FilterConfig, p0, q0, v0, rng,
                   pos_spread: float = 0.1, vel_spread: float = 0.1) -> Particles:
    n = config.n_particles
    p = np.asarray(p0, float) + rng.normal(0.0, pos_spread, (n, 3))
    v = np.asarray(v0, float) + rng.normal(0.0, vel_spread, (n, 3))
    q = np.tile(np.asarray(q0, float), (n, 1))
    return Particles(p, q, v, np.full(n, 1.0 / n))


def motion_update(particles: Particles, imu: ImuReading, dt: float,
                  config: FilterConfig, rng: np.random.Generator) -> Particles:
    """Per-particle noisy IMU integration plus position inflation noise."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = particles.n
    rates = imu.rates + rng.normal(0.0, config.rate_noise, (n, 3))
    accel = imu.accel + rng.normal(0.0, config.accel_noise, (n, 3))
    R = rotation_matrix_batch(particles.q)
    v_dot = np.einsum("nij,nj->ni", R, accel) + GRAVITY
    p = particles.p + dt * particles.v
    v = particles.v + dt * v_dot
    q = particles.q + dt * quat_derivative_batch(particles.q, rates)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    p += rng.normal(0.0, config.pos_noise, (n, 3))
    return Particles(p, q, v, particles.w)


def _expected_visible(particles: Particles, course, cam: CameraModel):
    """(N, G) mask: gate center in front, in frame, and facing the particle."""
    uv, front = project_batch(particles.p, particles.q, cam, course.centers)
    in_frame = front & np.all((uv >= 0.0) & (uv <= 1.0), axis=-1)
    facing = np.einsum("gj,ngj->ng", course.normals,
                       particles.p[:, None, :] - course.centers[None, :, :]) > 0
    return in_frame & facing


def sensor_update(particles: Particles, detections, course, cam: CameraModel,
                  config: FilterConfig) -> Particles:
    """Reweight particles by gate-corner reprojection likelihood.

    An empty detection list leaves the weights untouched. If every weight
    underflows to zero the set is reinitialized uniform and the returned
    Particles carries ``diverged = True``.
    """
    if len(detections) == 0:
        return particles
    scale = np.array([config.image_width, config.image_height], float)
    expected = _expected_visible(particles, course, cam)
    detected_ids = {d.gate_id for d in detections}
    sq_err = np.zeros(particles.n)
    for d in detections:
        corners_w = course.gates[d.gate_id].corners
        uv, front = project_batch(particles.p, particles.q, cam, corners_w)
        meas = np.array([c.as_array() for c in d.corners])
        diff = (uv - meas[None, :, :]) * scale
        per_corner = np.sum(diff * diff, axis=-1)          # (N, 4) in px^2
        ok = np.all(front, axis=1)
        gate_err = per_corner.sum(axis=1)
        # A particle that cannot even project the detected gate is scored
        # like a missing detection.
        sq_err += np.where(ok, gate_err, config.missing_penalty_px ** 2)
    missing = expected & ~np.isin(np.arange(course.n_gates), list(detected_ids))[None, :]
    sq_err += missing.sum(axis=1) * config.missing_penalty_px ** 2
    log_like = -sq_err / (2.0 * config.meas_std_px ** 2)
    log_like -= log_like.max()
    w = particles.w * np.exp(log_like)
    s = w.sum()
    diverged = False
    if s <= 0 or not np.isfinite(s):
        w = np.full(particles.n, 1.0 / particles.n)
        diverged = True
    else:
        w = w / s
    out = Particles(particles.p, particles.q, particles.v, w)
    out.diverged = diverged
    return out


def effective_sample_size(w: np.ndarray) -> float:
    return float(1.0 / np.sum(w * w))


def resample(particles: Particles, rng: np.random.Generator,
             ess_threshold: float | None = None) -> Particles:
    """Low-variance systematic resampling; no-op above the ESS threshold."""
    n = particles.n
    if ess_threshold is not None and effective_sample_size(particles.w) >= ess_threshold:
        return particles
    positions = (rng.random() + np.arange(n)) / n
    idx = np.searchsorted(np.cumsum(particles.w), positions)
    idx = np.clip(idx, 0, n - 1)
    return Particles(particles.p[idx].copy(), particles.q[idx].copy(),
                     particles.v[idx].copy(), np.full(n, 1.0 / n))


def estimate(particles: Particles):
    """Weighted mean state and 3x3 weighted position covariance."""
    w = particles.w
    p_mean = w @ particles.p
    v_mean = w @ particles.v
    ref = particles.q[int(np.argmax(w))]
    sign = np.where(particles.q @ ref >= 0, 1.0, -1.0)
    q_mean = w @ (particles.q * sign[:, None])
    q_mean = q_mean / np.linalg.norm(q_mean)
    d = particles.p - p_mean
    cov = np.einsum("n,ni,nj->ij", w, d, d)
    return RobotState(p_mean, q_mean, v_mean), cov


class ParticleFilter:
    """Stateful wrapper used by the racing loop; owns its RNG stream."""

    def __init__(self, config: FilterConfig, p0, q0, v0, rng: np.random.Generator):
        self.config = config
        self.rng = rng
        self.particles = init_particles(config, p0, q0, v0, rng)
        self.diverged = False

    def motion_update(self, imu: ImuReading, dt: float):
        self.particles = motion_update(self.particles, imu, dt, self.config, self.rng)

    def sensor_update(self, detections, course, cam):
        self.particles = sensor_update(self.particles, detections, course, cam,
                                       self.config)
        self.diverged = bool(getattr(self.particles, "diverged", False))

    def maybe_resample(self):
        thresh = self.config.ess_fraction * self.config.n_particles
        self.particles = resample(self.particles, self.rng, thresh)

    def estimate(self):
        return estimate(self.particles)
