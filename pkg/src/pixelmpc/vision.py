"""Pinhole camera, analytic optical-flow oracle, and geometric gate detector.

Camera frame convention: z along the optical axis (out of the lens),
x right, y down, so normalized image coordinates (u, v) live in [0, 1]^2
with the origin at the top-left corner. The camera is mounted forward
looking (body +x) with an optional fixed pitch offset.

The flow oracle returns the exact instantaneous image-plane velocity of
a static world point as the camera moves rigidly with the vehicle; it
stands in for the dense-flow ground truth of the full-scale system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ControlInput, RobotState, rotation_matrix, rotation_matrix_batch

MIN_DEPTH = 1e-9


class DegenerateProjection(ValueError):
    """Raised when a point coincides with (or sits behind) the camera origin."""


def _camera_axes_in_body(pitch_offset: float) -> np.ndarray:
    # Columns are the camera x (right), y (down), z (optical axis) axes
    # expressed in the FLU body frame; positive pitch offset tilts the
    # view upward.
    cp, sp = math.cos(pitch_offset), math.sin(pitch_offset)
    right = np.array([0.0, -1.0, 0.0])
    down = np.array([sp, 0.0, -cp])
    axis = np.array([cp, 0.0, sp])
    return np.column_stack([right, down, axis])


@dataclass(frozen=True)
class CameraModel:
    hfov: float = math.pi / 2          # horizontal field of view [rad]
    vfov: float = math.pi / 2 * 0.75   # vertical field of view [rad]
    width: int = 204                   # image size [px], used for unit conversion
    height: int = 153
    pitch_offset: float = 0.0          # fixed mount pitch [rad], positive = look up
    t_bc: np.ndarray = field(default_factory=lambda: np.zeros(3))  # camera origin in body frame

    def __post_init__(self):
        if not (0 < self.hfov < math.pi and 0 < self.vfov < math.pi):
            raise ValueError("field of view must be in (0, pi)")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "t_bc", np.asarray(self.t_bc, float))

    @property
    def R_bc(self) -> np.ndarray:
        """Camera-to-body rotation (columns = camera axes in body frame)."""
        return _camera_axes_in_body(self.pitch_offset)

    @property
    def tan_half(self) -> np.ndarray:
        return np.array([math.tan(self.hfov / 2), math.tan(self.vfov / 2)])


@dataclass(frozen=True)
class PixelState:
    u: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v])

    @property
    def in_frame(self) -> bool:
        return 0.0 <= self.u <= 1.0 and 0.0 <= self.v <= 1.0


@dataclass(frozen=True)
class FlowVector:
    l: float       # flow magnitude [normalized units / s]
    theta: float   # flow direction, atan2(v_dot, u_dot), in (-pi, pi]

    def __post_init__(self):
        if self.l < 0:
            raise ValueError("flow magnitude must be non-negative")


@dataclass(frozen=True)
class Gate:
    center: np.ndarray        # [m]
    corners: np.ndarray       # (4, 3) [m], opening corners
    normal: np.ndarray        # unit, points toward the approach side
    gate_id: int = 0
    opening: float = 2.5      # side length of the square opening [m]
    frame: float = 0.3        # frame member width and slab thickness [m]

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, float))
        object.__setattr__(self, "corners", np.asarray(self.corners, float))
        object.__setattr__(self, "normal", np.asarray(self.normal, float))


def square_gate(center, normal, gate_id=0, opening=2.5, frame=0.3) -> Gate:
    """Upright square gate centered at ``center`` facing along ``normal``."""
    center = np.asarray(center, float)
    normal = np.asarray(normal, float)
    normal = normal / np.linalg.norm(normal)
    up = np.array([0.0, 0.0, 1.0])
    side = np.cross(up, normal)
    ns = np.linalg.norm(side)
    if ns < 1e-9:  # gate lying flat; pick an arbitrary horizontal side
        side = np.array([1.0, 0.0, 0.0])
    else:
        side /= ns
    up2 = np.cross(normal, side)
    h = opening / 2
    corners = np.array([center + h * (sx * side + sz * up2)
                        for sx, sz in [(-1, -1), (1, -1), (1, 1), (-1, 1)]])
    return Gate(center, corners, normal, gate_id, opening, frame)


@dataclass(frozen=True)
class Detection:
    center: PixelState
    corners: tuple          # four PixelStates, may lie outside [0,1]^2
    gate_id: int


def camera_pose(state: RobotState, cam: CameraModel):
    """World-to-camera rotation and the camera origin in world frame."""
    R_wb = rotation_matrix(state.q)
    R_wc = R_wb @ cam.R_bc
    c_w = state.p + R_wb @ cam.t_bc
    return R_wc, c_w


def project(state: RobotState, cam: CameraModel, point) -> PixelState | None:
    """Project a world point; None if it lies behind the image plane."""
    R_wc, c_w = camera_pose(state, cam)
    p_c = R_wc.T @ (np.asarray(point, float) - c_w)
    if np.linalg.norm(p_c) < MIN_DEPTH:
        raise DegenerateProjection("point at camera origin")
    if p_c[2] <= 0:
        return None
    th = cam.tan_half
    return PixelState(0.5 + p_c[0] / (2 * p_c[2] * th[0]),
                      0.5 + p_c[1] / (2 * p_c[2] * th[1]))


def project_batch(p, q, cam: CameraModel, points):
    """Project points for stacked poses.

    p: (N, 3), q: (N, 4), points: (M, 3). Returns uv (N, M, 2) and a
    boolean front mask (N, M); uv rows with front=False are invalid.
    """
    R_wb = rotation_matrix_batch(q)
    R_wc = R_wb @ cam.R_bc
    c_w = p + np.einsum("nij,j->ni", R_wb, cam.t_bc)
    rel = points[None, :, :] - c_w[:, None, :]
    p_c = np.einsum("nji,nmj->nmi", R_wc, rel)
    z = p_c[..., 2]
    front = z > MIN_DEPTH
    zs = np.where(front, z, 1.0)
    th = cam.tan_half
    uv = np.empty(p_c.shape[:-1] + (2,))
    uv[..., 0] = 0.5 + p_c[..., 0] / (2 * zs * th[0])
    uv[..., 1] = 0.5 + p_c[..., 1] / (2 * zs * th[1])
    return uv, front


def flow_oracle(state: RobotState, u_ctrl: ControlInput, point, cam: CameraModel) -> FlowVector:
    """Exact instantaneous flow of a static world point under the camera's motion."""
    u_dot, v_dot = flow_components(state, u_ctrl, point, cam)
    l = math.hypot(u_dot, v_dot)
    theta = math.atan2(v_dot, u_dot) if l > 0 else 0.0
    return FlowVector(l, theta)


def flow_components(state: RobotState, u_ctrl: ControlInput, point, cam: CameraModel):
    """(u_dot, v_dot) of a static world point in normalized units per second."""
    R_wb = rotation_matrix(state.q)
    R_wc = R_wb @ cam.R_bc
    c_w = state.p + R_wb @ cam.t_bc
    p_c = R_wc.T @ (np.asarray(point, float) - c_w)
    if p_c[2] <= MIN_DEPTH:
        raise DegenerateProjection("point behind camera")
    omega_c = cam.R_bc.T @ u_ctrl.omega
    # Camera-origin velocity: vehicle velocity plus lever arm of body rates.
    cdot_w = state.v + R_wb @ np.cross(u_ctrl.omega, cam.t_bc)
    pdot_c = -np.cross(omega_c, p_c) - R_wc.T @ cdot_w
    x, y, z = p_c
    th = cam.tan_half
    u_dot = (pdot_c[0] / z - x * pdot_c[2] / z**2) / (2 * th[0])
    v_dot = (pdot_c[1] / z - y * pdot_c[2] / z**2) / (2 * th[1])
    return u_dot, v_dot


def flow_components_batch(p, q, v, omega, cam: CameraModel, points):
    """Batched (u_dot, v_dot) for per-row poses, velocities, and points.

    All of p (N,3), q (N,4), v (N,3), omega (N,3), points (N,3) are
    row-aligned. Returns (u_dot, v_dot, front) each of shape (N,).
    """
    R_wb = rotation_matrix_batch(q)
    R_wc = R_wb @ cam.R_bc
    c_w = p + np.einsum("nij,j->ni", R_wb, cam.t_bc)
    p_c = np.einsum("nji,nj->ni", R_wc, points - c_w)
    z = p_c[..., 2]
    front = z > MIN_DEPTH
    zs = np.where(front, z, 1.0)
    omega_c = omega @ cam.R_bc
    cdot_w = v + np.einsum("nij,nj->ni", R_wb, np.cross(omega, cam.t_bc[None, :]))
    pdot_c = -np.cross(omega_c, p_c) - np.einsum("nji,nj->ni", R_wc, cdot_w)
    th = cam.tan_half
    u_dot = (pdot_c[..., 0] / zs - p_c[..., 0] * pdot_c[..., 2] / zs**2) / (2 * th[0])
    v_dot = (pdot_c[..., 1] / zs - p_c[..., 1] * pdot_c[..., 2] / zs**2) / (2 * th[1])
    return u_dot, v_dot, front


def gate_faces_camera(state_p, gate: Gate) -> bool:
    return float(np.dot(gate.normal, state_p - gate.center)) > 0.0


def detect_gate(state: RobotState, cam: CameraModel, gate: Gate,
                noise_std: float = 0.0, rng: np.random.Generator | None = None) -> Detection | None:
    """Geometric detector oracle; None when the gate is not detectable.

    Detection requires the gate center in front of the camera, inside the
    frame, and the gate facing the camera. Seeded Gaussian pixel noise of
    ``noise_std`` (normalized units) is added to every returned coordinate.
    """
    if not gate_faces_camera(state.p, gate):
        return None
    center = project(state, cam, gate.center)
    if center is None or not center.in_frame:
        return None
    corners = [project(state, cam, c) for c in gate.corners]
    if any(c is None for c in corners):
        return None
    coords = np.array([center.as_array()] + [c.as_array() for c in corners])
    if noise_std > 0 and rng is not None:
        coords = coords + rng.normal(0.0, noise_std, coords.shape)
    return Detection(PixelState(*coords[0]),
                     tuple(PixelState(*c) for c in coords[1:]),
                     gate.gate_id)


def visibility_fraction(state: RobotState, cam: CameraModel, gate: Gate) -> float:
    """Fraction of the gate's corners in front of the camera and in-frame."""
    if not gate_faces_camera(state.p, gate):
        return 0.0
    n_in = 0
    for c in gate.corners:
        px = project(state, cam, c)
        if px is not None and px.in_frame:
            n_in += 1
    return n_in / 4.0
