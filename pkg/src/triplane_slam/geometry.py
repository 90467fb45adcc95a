"""Rigid poses, pinhole camera model, ray generation and TUM trajectory I/O.

Conventions: quaternions are stored (w, x, y, z); poses map camera to world;
cameras follow the OpenCV frame (x right, y down, z forward) and depth is the
camera-frame z coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = float(np.linalg.norm(q))
    if not np.isfinite(n) or n < 1e-12:
        raise ValueError("degenerate rotation")
    return q / n


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_matrix_jacobian(q) -> np.ndarray:
    """d R_ij / d q_k for the homogeneous form used by :func:`quat_to_matrix`.

    Returns an array of shape (4, 3, 3).
    """
    w, x, y, z = q
    dw = 2 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    dx = 2 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dy = 2 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]])
    dz = 2 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]])
    return np.stack([dw, dx, dy, dz])


def matrix_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(q)
    return q if q[0] >= 0 else -q


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3).copy())
        self.q.setflags(write=False)
        self.t.setflags(write=False)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_vec7(cls, vec) -> "Pose":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (7,):
            raise ValueError(f"expected a 7-vector, got shape {vec.shape}")
        return cls(vec[:4], vec[4:])

    @classmethod
    def from_axis_angle(cls, axis, angle: float, t=(0.0, 0.0, 0.0)) -> "Pose":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        half = 0.5 * angle
        return cls(np.concatenate([[math.cos(half)], math.sin(half) * axis]), t)

    def to_vec7(self) -> np.ndarray:
        return np.concatenate([self.q, self.t])

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.t
        return T

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation.T + self.t

    def inverse(self) -> "Pose":
        q_inv = self.q * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(q_inv, -(quat_to_matrix(q_inv) @ self.t))

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose(quat_multiply(self.q, other.q), self.rotation @ other.t + self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def rotation_angle_to(self, other: "Pose") -> float:
        """Angle in radians of the relative rotation between two poses."""
        d = abs(float(np.dot(self.q, other.q)))
        return 2.0 * math.acos(min(1.0, d))

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        same_q = np.allclose(self.q, other.q, atol=atol) or np.allclose(self.q, -other.q, atol=atol)
        return bool(same_q and np.allclose(self.t, other.t, atol=atol))


def pose_compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def pose_inverse(a: Pose) -> Pose:
    return a.inverse()


def constant_speed_predict(prev: Pose, prev2: Pose) -> Pose:
    """Extrapolate the next pose as ``prev ∘ prev2⁻¹ ∘ prev``."""
    return prev.compose(prev2.inverse()).compose(prev)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose of an OpenCV camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)
    return Pose(matrix_to_quat(R), eye)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 5000.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def camera_dirs(self, u, v) -> np.ndarray:
        """Unnormalized camera-frame directions with unit z for pixels (u, v)."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def project(self, pts_cam) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Project camera-frame points; returns (u, v, z)."""
        pts_cam = np.asarray(pts_cam, dtype=np.float64)
        z = pts_cam[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pts_cam[..., 0] / z + self.cx
            v = self.fy * pts_cam[..., 1] / z + self.cy
        return u, v, z

    def in_bounds(self, u, v) -> np.ndarray:
        # pixel centres sit on integer coordinates
        return (u > -0.5) & (u < self.width - 0.5) & (v > -0.5) & (v < self.height - 0.5)

    def to_line(self) -> str:
        return f"{self.fx!r} {self.fy!r} {self.cx!r} {self.cy!r} {self.width} {self.height} {self.depth_scale!r}"

    @classmethod
    def from_line(cls, line: str) -> "CameraIntrinsics":
        parts = line.split()
        if len(parts) != 7:
            raise ValueError(f"intrinsics line needs 7 fields, got {len(parts)}")
        fx, fy, cx, cy = (float(x) for x in parts[:4])
        return cls(fx, fy, cx, cy, int(parts[4]), int(parts[5]), float(parts[6]))


@dataclass(frozen=True)
class Ray:
    """A single camera ray.

    ``dir`` is unit length; ``scale`` converts camera z-depth into arclength,
    so the point at depth ``d`` is ``origin + d * scale * dir``.
    """

    origin: np.ndarray
    dir: np.ndarray
    scale: float
    pixel: tuple[int, int]
    gt_color: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gt_depth: float = 0.0

    def point_at_depth(self, d: float) -> np.ndarray:
        return self.origin + d * self.scale * self.dir


def pixel_to_ray(intr: CameraIntrinsics, pose: Pose, u, v, depth: float = 0.0, color=(0.0, 0.0, 0.0)) -> Ray:
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        raise ValueError(f"pixel ({u}, {v}) outside {intr.width}x{intr.height} image")
    d_world = pose.rotation @ intr.camera_dirs(u, v)
    scale = float(np.linalg.norm(d_world))
    return Ray(
        origin=pose.t.copy(),
        dir=d_world / scale,
        scale=scale,
        pixel=(u, v),
        gt_color=np.asarray(color, dtype=np.float64),
        gt_depth=float(depth),
    )


def backproject(intr: CameraIntrinsics, pose: Pose, u, v, depth) -> np.ndarray:
    """World points for pixels (u, v) at camera z-depth ``depth``."""
    pts_cam = intr.camera_dirs(u, v) * np.asarray(depth, dtype=np.float64)[..., None]
    return pose.apply(pts_cam)


def reproject(intr: CameraIntrinsics, pose: Pose, pts_world) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pts_cam = (np.asarray(pts_world) - pose.t) @ pose.rotation
    return intr.project(pts_cam)


# -- TUM trajectory files ---------------------------------------------------

def read_trajectory(path) -> tuple[list[float], list[Pose]]:
    """Read ``timestamp tx ty tz qx qy qz qw`` lines."""
    stamps, poses = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        ts, tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts)
        stamps.append(ts)
        poses.append(Pose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz])))
    return stamps, poses


def format_trajectory(stamps: Sequence[float], poses: Iterable[Pose]) -> str:
    lines = []
    for ts, p in zip(stamps, poses):
        w, x, y, z = p.q
        vals = [ts, *p.t, x, y, z, w]
        lines.append(" ".join(f"{v:.9f}" for v in vals))
    return "\n".join(lines) + "\n"


def write_trajectory(path, stamps: Sequence[float], poses: Sequence[Pose]) -> None:
    Path(path).write_text(format_trajectory(stamps, poses))
