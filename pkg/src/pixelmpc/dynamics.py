"""Quadrotor rigid-body model and explicit-Euler integration.

World frame: x forward, y left, z up; gravity along -z. Body frame FLU.
State is (p, q, v) with q a unit quaternion (w, x, y, z) rotating body
vectors into world. Controls are body angular rates plus total thrust,
with the rates passed through directly (no rate dynamics).

Scalar functions operate on a single state; the ``*_batch`` variants take
stacked arrays and are what the sampling controller uses for rollouts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GRAVITY = np.array([0.0, 0.0, -9.81])

QUAT_NORM_TOL = 1e-6


@dataclass(frozen=True)
class VehicleParams:
    mass: float = 1.0
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    drag_coeff: float = 0.1  # linear isotropic drag, f_D = -c_d * m * v
    force_noise_std: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        if self.drag_coeff < 0:
            raise ValueError("drag coefficient must be non-negative")
        object.__setattr__(self, "gravity", np.asarray(self.gravity, float))
        object.__setattr__(self, "force_noise_std", np.asarray(self.force_noise_std, float))
        if np.any(self.force_noise_std < 0):
            raise ValueError("noise std must be non-negative")

    @property
    def hover_thrust(self) -> float:
        return self.mass * float(np.linalg.norm(self.gravity))


@dataclass(frozen=True)
class RobotState:
    p: np.ndarray  # world position [m]
    q: np.ndarray  # unit quaternion (w, x, y, z), body to world
    v: np.ndarray  # world velocity [m/s]

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, float))
        object.__setattr__(self, "q", np.asarray(self.q, float))
        object.__setattr__(self, "v", np.asarray(self.v, float))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.q, self.v])


@dataclass(frozen=True)
class ControlInput:
    omega: np.ndarray  # body rates (wx, wy, wz) [rad/s]
    thrust: float      # total thrust [N]

    def __post_init__(self):
        object.__setattr__(self, "omega", np.asarray(self.omega, float))
        if self.thrust < 0:
            raise ValueError("thrust must be non-negative")

    def as_vector(self) -> np.ndarray:
        return np.array([self.omega[0], self.omega[1], self.omega[2], self.thrust])


def _check_unit_quat(q):
    n = np.linalg.norm(q)
    if abs(n - 1.0) > QUAT_NORM_TOL:
        raise ValueError(f"quaternion norm {n} outside unit tolerance")


def rotation_matrix(q: np.ndarray) -> np.ndarray:
    """Body-to-world rotation matrix of a unit quaternion (w, x, y, z)."""
    q = np.asarray(q, float)
    _check_unit_quat(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotation_matrix_batch(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for quaternions stacked as (..., 4)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - z * w)
    R[..., 0, 2] = 2 * (x * z + y * w)
    R[..., 1, 0] = 2 * (x * y + z * w)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - x * w)
    R[..., 2, 0] = 2 * (x * z - y * w)
    R[..., 2, 1] = 2 * (y * z + x * w)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_derivative(q: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """q_dot = 0.5 * M(q) * omega for body rates omega."""
    q = np.asarray(q, float)
    _check_unit_quat(q)
    w, x, y, z = q
    wx, wy, wz = omega
    return 0.5 * np.array([
        -x * wx - y * wy - z * wz,
        w * wx - z * wy + y * wz,
        z * wx + w * wy - x * wz,
        -y * wx + x * wy + w * wz,
    ])


def quat_derivative_batch(q: np.ndarray, omega: np.ndarray) -> np.ndarray:
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    wx, wy, wz = omega[..., 0], omega[..., 1], omega[..., 2]
    dq = np.empty_like(q)
    dq[..., 0] = -x * wx - y * wy - z * wz
    dq[..., 1] = w * wx - z * wy + y * wz
    dq[..., 2] = z * wx + w * wy - x * wz
    dq[..., 3] = -y * wx + x * wy + w * wz
    dq *= 0.5
    return dq


def robot_derivative(state: RobotState, u: ControlInput, params: VehicleParams,
                     noise: np.ndarray | None = None):
    """Continuous-time derivative (p_dot, q_dot, v_dot).

    v_dot = g + (R f_T + f_D + w_f) / m with thrust along body +z and
    drag f_D = -c_d * m * v. ``noise`` is the unmodeled force w_f [N].
    """
    if noise is None:
        noise = np.zeros(3)
    R = rotation_matrix(state.q)
    thrust_world = R[:, 2] * u.thrust
    drag = -params.drag_coeff * params.mass * state.v
    v_dot = params.gravity + (thrust_world + drag + np.asarray(noise, float)) / params.mass
    return state.v.copy(), quat_derivative(state.q, u.omega), v_dot


def step(state: RobotState, u: ControlInput, params: VehicleParams, dt: float,
         rng: np.random.Generator | None = None) -> RobotState:
    """One explicit-Euler step with quaternion renormalization.

    With ``rng`` given, w_f is drawn per-axis from N(0, force_noise_std);
    with ``rng=None`` the step is the nominal (noise-free) model.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    noise = None
    if rng is not None:
        noise = rng.normal(0.0, params.force_noise_std)
    p_dot, q_dot, v_dot = robot_derivative(state, u, params, noise)
    p = state.p + dt * p_dot
    q = state.q + dt * q_dot
    q /= np.linalg.norm(q)
    v = state.v + dt * v_dot
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q)) and np.all(np.isfinite(v))):
        raise FloatingPointError("non-finite state after integration step")
    return RobotState(p, q, v)


def step_batch(p, q, v, omega, thrust, params: VehicleParams, dt: float, out=None):
    """Euler-step stacked states in place of allocating dataclasses.

    p, v: (N, 3); q: (N, 4); omega: (N, 3); thrust: (N,). Returns the
    updated (p, q, v) as new arrays. Nominal model (w_f = 0).
    """
    R = rotation_matrix_batch(q)
    v_dot = params.gravity + (R[..., :, 2] * thrust[..., None]
                              - params.drag_coeff * params.mass * v) / params.mass
    p_new = p + dt * v
    v_new = v + dt * v_dot
    q_new = q + dt * quat_derivative_batch(q, omega)
    q_new /= np.linalg.norm(q_new, axis=-1, keepdims=True)
    return p_new, q_new, v_new
