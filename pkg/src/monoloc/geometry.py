"""SE(3) poses, camera intrinsics and the forward pinhole projection.

Conventions (fixed here, used everywhere else):

* World frame: fixed ENU-style frame (x east-ish, y north-ish, z up).
* Body frame: x forward, y left, z up. ``Pose6D`` is world-from-body.
* Camera frame: x right, y down, z forward (optical axis). The camera sits
  at the body origin with the fixed mount rotation ``CAM_FROM_BODY``.
* Pose increments are 6-vectors ``(dt, dtheta)``: translation in the body
  frame (meters) followed by an axis-angle rotation (radians), applied
  right-multiplicatively, ``boxplus(p, d) = p o Exp(d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Z_MIN = 0.1  # culling depth in meters; projection is singular at z = 0

# Maps body-frame vectors into the camera frame: body x (forward) -> camera z,
# body y (left) -> camera -x, body z (up) -> camera -y.
CAM_FROM_BODY = np.array([[0.0, -1.0, 0.0],
                          [0.0, 0.0, -1.0],
                          [1.0, 0.0, 0.0]])
BODY_FROM_CAM = CAM_FROM_BODY.T


class BehindCamera(Exception):
    """Point depth is at or below the culling plane; cull it, don't clamp."""


def _as_vec(x, n: int) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(-1)
    if v.shape != (n,):
        raise ValueError(f"expected length-{n} vector, got shape {np.shape(x)}")
    return v


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z)

def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_exp(theta: np.ndarray) -> np.ndarray:
    """Unit quaternion for an axis-angle vector (radians)."""
    theta = _as_vec(theta, 3)
    angle = float(np.linalg.norm(theta))
    # sin(a/2)/a via sinc keeps the a -> 0 limit exact
    half_sinc = 0.5 * np.sinc(angle / (2.0 * math.pi))
    return np.concatenate(([math.cos(0.5 * angle)], half_sinc * theta))


def quat_log(q: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a unit quaternion (shortest arc, |angle| < pi)."""
    if q[0] < 0.0:
        q = -q
    vn = float(np.linalg.norm(q[1:]))
    if vn < 1e-12:
        return 2.0 * q[1:]
    angle = 2.0 * math.atan2(vn, float(q[0]))
    return (angle / vn) * q[1:]


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotation_angle(q: np.ndarray) -> float:
    """Rotation angle in radians, in [0, pi]; atan2 form stays exact near 0."""
    return 2.0 * math.atan2(float(np.linalg.norm(q[1:])), abs(float(q[0])))


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_right_jacobian_inverse(phi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SO(3): d Log(R Exp(xi)) / d xi at xi = 0."""
    phi = _as_vec(phi, 3)
    angle = float(np.linalg.norm(phi))
    s = skew(phi)
    if angle < 1e-5:
        c = 1.0 / 12.0 + angle * angle / 720.0
    else:
        c = 1.0 / (angle * angle) - (1.0 + math.cos(angle)) / (2.0 * angle * math.sin(angle))
    return np.eye(3) + 0.5 * s + c * (s @ s)


# ---------------------------------------------------------------------------
# poses

@dataclass(frozen=True)
class Pose6D:
    """Rigid transform world-from-body: translation (m) + unit quaternion."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        t = _as_vec(self.translation, 3).copy()
        q = _as_vec(self.rotation, 4).copy()
        n = float(np.linalg.norm(q))
        if not 0.5 < n < 2.0:
            raise ValueError(f"quaternion norm {n} too far from 1 to renormalize")
        q /= n
        t.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", q)

    @staticmethod
    def identity() -> "Pose6D":
        return Pose6D()

    @staticmethod
    def from_translation(x: float, y: float, z: float) -> "Pose6D":
        return Pose6D(np.array([x, y, z]))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def compose(self, other: "Pose6D") -> "Pose6D":
        t = self.translation + self.rotation_matrix() @ other.translation
        return Pose6D(t, quat_mul(self.rotation, other.rotation))

    def inverse(self) -> "Pose6D":
        qi = quat_conj(self.rotation)
        return Pose6D(-(quat_to_matrix(qi) @ self.translation), qi)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Body -> world for one (3,) point or an (n, 3) array."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation_matrix().T + self.translation

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        """World -> body."""
        pts = np.asarray(points, dtype=float)
        return (pts - self.translation) @ self.rotation_matrix()


def compose(a: Pose6D, b: Pose6D) -> Pose6D:
    return a.compose(b)


def inverse(p: Pose6D) -> Pose6D:
    return p.inverse()


def boxplus(p: Pose6D, delta: np.ndarray) -> Pose6D:
    """Right-multiplicative manifold update p o Exp(delta)."""
    d = _as_vec(delta, 6)
    return p.compose(Pose6D(d[:3], quat_exp(d[3:])))


def boxminus(a: Pose6D, b: Pose6D) -> np.ndarray:
    """Increment d with boxplus(b, d) = a; inverse chart of boxplus."""
    rel = b.inverse().compose(a)
    return np.concatenate([rel.translation, quat_log(rel.rotation)])


# ---------------------------------------------------------------------------
# camera

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)


def project(cam: CameraIntrinsics, point_cam: np.ndarray) -> np.ndarray:
    """Pinhole projection of a camera-frame point to pixel (u, v)."""
    x, y, z = _as_vec(point_cam, 3)
    if z <= Z_MIN:
        raise BehindCamera(f"depth {z} <= {Z_MIN}")
    return np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])


def project_jacobian(cam: CameraIntrinsics, point_cam: np.ndarray) -> np.ndarray:
    """2x3 derivative of project() w.r.t. the camera-frame point."""
    x, y, z = _as_vec(point_cam, 3)
    if z <= Z_MIN:
        raise BehindCamera(f"depth {z} <= {Z_MIN}")
    iz = 1.0 / z
    return np.array([
        [cam.fx * iz, 0.0, -cam.fx * x * iz * iz],
        [0.0, cam.fy * iz, -cam.fy * y * iz * iz],
    ])


def project_points(cam: CameraIntrinsics, points_cam: np.ndarray):
    """Vectorized projection: returns (uv (n,2), valid (n,) bool).

    Invalid rows (depth <= Z_MIN) hold garbage and must be masked by callers.
    """
    pts = np.asarray(points_cam, dtype=float).reshape(-1, 3)
    z = pts[:, 2]
    valid = z > Z_MIN
    zsafe = np.where(valid, z, 1.0)
    uv = np.empty((len(pts), 2))
    uv[:, 0] = cam.fx * pts[:, 0] / zsafe + cam.cx
    uv[:, 1] = cam.fy * pts[:, 1] / zsafe + cam.cy
    return uv, valid


def world_points_to_camera(pose: Pose6D, points_world: np.ndarray) -> np.ndarray:
    """World points into the camera frame of a body pose (fixed mount)."""
    return pose.apply_inverse(points_world) @ CAM_FROM_BODY.T
