"""Race course: ordered gates, start pose, corridor geometry, background points.

The desired path is the chain of straight segments from the start position
through the gate centers in order. Per-segment desired attitude is the
level-roll yaw along the segment; desired velocity is the target speed
along it. A procedural background point cloud provides extra static world
points for flow-training pixel samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .vision import Gate, square_gate


def yaw_quat(yaw: float) -> np.ndarray:
    return np.array([math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)])


@dataclass
class GateCourse:
    gates: list
    start_p: np.ndarray
    start_yaw: float = 0.0
    d_max: float = 4.0                      # corridor half-width [m]
    background: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    course_id: str = "course"

    def __post_init__(self):
        if len(self.gates) < 1:
            raise ValueError("course needs at least one gate")
        self.start_p = np.asarray(self.start_p, float)
        self.background = np.asarray(self.background, float)
        self.centers = np.array([g.center for g in self.gates])
        self.normals = np.array([g.normal for g in self.gates])
        starts = np.vstack([self.start_p[None, :], self.centers[:-1]])
        if np.any(np.linalg.norm(self.centers - starts, axis=1) < 1e-9):
            raise ValueError("consecutive gate centers must be distinct")
        self.seg_start = starts
        d = self.centers - starts
        self.seg_len = np.linalg.norm(d, axis=1)
        self.seg_dir = d / self.seg_len[:, None]
        yaws = np.arctan2(self.seg_dir[:, 1], self.seg_dir[:, 0])
        self.seg_quat = np.array([yaw_quat(y) for y in yaws])
        # In-plane gate axes for frame-hit tests.
        up = np.array([0.0, 0.0, 1.0])
        sides = np.cross(np.broadcast_to(up, self.normals.shape), self.normals)
        ns = np.linalg.norm(sides, axis=1, keepdims=True)
        sides = np.where(ns > 1e-9, sides / np.where(ns > 0, ns, 1.0),
                         np.array([1.0, 0.0, 0.0]))
        self.gate_side = sides
        self.gate_up = np.cross(self.normals, sides)
        self.half_opening = np.array([g.opening / 2 for g in self.gates])
        self.frame_w = np.array([g.frame for g in self.gates])

    @property
    def n_gates(self) -> int:
        return len(self.gates)

    def start_state_arrays(self):
        return self.start_p.copy(), yaw_quat(self.start_yaw), np.zeros(3)

    def segment_distance(self, p, seg_idx: int) -> float:
        """Perpendicular distance of p to the seg_idx-th path segment."""
        a = self.seg_start[seg_idx]
        d = self.seg_dir[seg_idx]
        rel = np.asarray(p, float) - a
        t = np.clip(rel @ d, 0.0, self.seg_len[seg_idx])
        return float(np.linalg.norm(rel - t * d))

    def in_frame_material(self, p, gate_idx: int) -> bool:
        """Whether p sits inside the gate's physical frame slab."""
        g = self.gates[gate_idx]
        rel = np.asarray(p, float) - g.center
        if abs(rel @ g.normal) > g.frame / 2:
            return False
        a = abs(rel @ self.gate_side[gate_idx])
        b = abs(rel @ self.gate_up[gate_idx])
        half, w = self.half_opening[gate_idx], self.frame_w[gate_idx]
        return max(a, b) > half and max(a, b) <= half + w


def default_course(background_seed: int = 12345, n_background: int = 400) -> GateCourse:
    """Seven-gate closed-ish course, ~150 m of segments with mixed turns."""
    layout = [
        ((22.0, 0.0, 2.5), (-1.0, 0.0, 0.0)),
        ((44.0, 8.0, 3.0), (-0.94, -0.34, 0.0)),
        ((58.0, 24.0, 2.5), (-0.66, -0.75, 0.0)),
        ((58.0, 46.0, 4.0), (0.0, -1.0, 0.0)),
        ((44.0, 62.0, 2.5), (0.66, -0.75, 0.0)),
        ((22.0, 68.0, 3.0), (0.94, -0.34, 0.0)),
        ((0.0, 60.0, 2.5), (0.9, 0.44, 0.0)),
    ]
    gates = [square_gate(c, n, gate_id=i) for i, (c, n) in enumerate(layout)]
    rng = np.random.default_rng(background_seed)
    lo = np.array([-15.0, -15.0, 0.0])
    hi = np.array([75.0, 85.0, 14.0])
    background = rng.uniform(lo, hi, (n_background, 3))
    return GateCourse(gates, np.array([0.0, 0.0, 2.0]), 0.0, 2.0, background, "desk7")


def straight_course(n_gates: int = 3, spacing: float = 40.0,
                    background_seed: int = 999, n_background: int = 200) -> GateCourse:
    """Straight-lane course used for the estimator covariance experiment."""
    gates = [square_gate((spacing * (i + 1), 0.0, 2.5), (-1.0, 0.0, 0.0), gate_id=i)
             for i in range(n_gates)]
    rng = np.random.default_rng(background_seed)
    lo = np.array([-10.0, -20.0, 0.0])
    hi = np.array([spacing * (n_gates + 1), 20.0, 12.0])
    background = rng.uniform(lo, hi, (n_background, 3))
    return GateCourse(gates, np.array([0.0, 0.0, 2.0]), 0.0, 2.0, background,
                      f"straight{n_gates}")


def save_course(course: GateCourse, path):
    """Write the flat key-value course file."""
    def vec(v):
        return " ".join(repr(float(x)) for x in v)
    lines = [f"course.id = {course.course_id}",
             f"course.d_max = {float(course.d_max)!r}",
             "start.position = " + vec(course.start_p),
             f"start.yaw = {float(course.start_yaw)!r}",
             f"gate.count = {len(course.gates)}"]
    for i, g in enumerate(course.gates):
        lines.append(f"gate.{i}.center = " + vec(g.center))
        lines.append(f"gate.{i}.normal = " + vec(g.normal))
        lines.append(f"gate.{i}.opening = {float(g.opening)!r}")
        lines.append(f"gate.{i}.frame = {float(g.frame)!r}")
    lines.append(f"background.count = {len(course.background)}")
    for j, p in enumerate(course.background):
        lines.append(f"background.{j} = " + vec(p))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_course(path) -> GateCourse:
    from .config import parse_kv_file
    kv = parse_kv_file(path)
    n = int(kv["gate.count"])
    gates = []
    for i in range(n):
        center = [float(x) for x in kv[f"gate.{i}.center"].split()]
        normal = [float(x) for x in kv[f"gate.{i}.normal"].split()]
        gates.append(square_gate(center, normal, gate_id=i,
                                 opening=float(kv.get(f"gate.{i}.opening", 2.5)),
                                 frame=float(kv.get(f"gate.{i}.frame", 0.3))))
    m = int(kv.get("background.count", 0))
    background = np.array([[float(x) for x in kv[f"background.{j}"].split()]
                           for j in range(m)]).reshape(m, 3)
    start = np.array([float(x) for x in kv["start.position"].split()])
    return GateCourse(gates, start, float(kv.get("start.yaw", 0.0)),
                      float(kv.get("course.d_max", 4.0)), background,
                      kv.get("course.id", "course"))
