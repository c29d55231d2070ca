"""Rotation, rigid-pose and pinhole-camera algebra.

Quaternions are stored as ``(w, x, y, z)`` numpy arrays with the scalar
part first. Canonical quaternions have ``w >= 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .exceptions import BehindCameraError, InvalidDepthError, InvalidRotationError

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def normalize_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n <= 1e-12:
        raise InvalidRotationError(f"quaternion norm {n!r} is too small to define a rotation")
    return q / n


def canonical_quat(q) -> np.ndarray:
    """Unit quaternion with ``w >= 0``; ties at ``w == 0`` resolved on the first non-zero vector entry."""
    q = normalize_quat(q)
    if q[0] < 0:
        return -q
    if q[0] == 0:
        nz = np.flatnonzero(q[1:])
        if nz.size and q[1 + nz[0]] < 0:
            return -q
    return q


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b`` (rotation ``b`` first, then ``a``)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def _rotmat_unit(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_to_rotmat(q) -> np.ndarray:
    """3x3 rotation matrix of a (not necessarily unit) quaternion."""
    return _rotmat_unit(normalize_quat(q))


def rotmat_quat_jacobian(q) -> np.ndarray:
    """Partial derivatives ``dR/dq_k`` of the unit-quaternion formula, shape (4, 3, 3).

    The formula is evaluated as written (no renormalisation), so callers
    that normalise a raw quaternion must chain through the projection
    ``(I - q q^T) / |q_raw|`` themselves.
    """
    w, x, y, z = q
    return 2.0 * np.array([
        [[0, -z, y], [z, 0, -x], [-y, x, 0]],
        [[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]],
        [[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]],
        [[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]],
    ], dtype=float)


def raw_quat_grad(raw_q, grad_R) -> np.ndarray:
    """Backpropagate ``dL/dR`` to the raw quaternion that is normalised into ``R``."""
    raw_q = np.asarray(raw_q, dtype=float)
    norm = np.linalg.norm(raw_q)
    q = raw_q / norm
    g_unit = np.einsum("kab,ab->k", rotmat_quat_jacobian(q), grad_R)
    return (g_unit - q * (q @ g_unit)) / norm


def rotmat_to_quat(R) -> np.ndarray:
    """Canonical quaternion of a proper rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise InvalidRotationError("expected a finite 3x3 matrix")
    if np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
        raise InvalidRotationError("matrix is not orthonormal")
    if np.linalg.det(R) <= 0:
        raise InvalidRotationError("matrix has negative determinant (reflection)")
    tr = np.trace(R)
    diag = np.diag(R)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return canonical_quat(q)


def axis_angle_to_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def rotation_angle(R) -> float:
    """Geodesic angle (radians) of a rotation matrix, from its trace."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R x + t`` with the rotation held as a canonical quaternion."""

    quat: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "quat", canonical_quat(self.quat))
        t = np.asarray(self.t, dtype=float).reshape(3)
        object.__setattr__(self, "t", t)

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(rotmat_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R, t) -> "Pose":
        return cls(rotmat_to_quat(R), t)

    @property
    def R(self) -> np.ndarray:
        return _rotmat_unit(self.quat)

    @property
    def tz(self) -> float:
        return float(self.t[2])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "Pose":
        R = self.R
        return Pose(quat_conjugate(self.quat), -R.T @ self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        """``self @ other`` applies ``other`` first."""
        return Pose(quat_multiply(self.quat, other.quat), self.R @ other.t + self.t)

    def to_dict(self) -> dict:
        return {"quat": [float(v) for v in self.quat], "t": [float(v) for v in self.t]}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.asarray(d["quat"], dtype=float), np.asarray(d["t"], dtype=float))

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.quat, other.quat) and np.array_equal(self.t, other.t)

    def __hash__(self):
        return hash((self.quat.tobytes(), self.t.tobytes()))

    def __repr__(self):
        return f"Pose(quat={np.array2string(self.quat, precision=5)}, t={np.array2string(self.t, precision=5)})"


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    px: float
    py: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.px], [0.0, self.fy, self.py], [0.0, 0.0, 1.0]])

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    def window(self, origin, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics of the sub-window whose top-left pixel is ``origin`` (may lie outside the image)."""
        ox, oy = origin
        return CameraIntrinsics(self.fx, self.fy, self.px - ox, self.py - oy, width, height)

    def scaled(self, sx: float, sy: float | None = None) -> "CameraIntrinsics":
        sy = sx if sy is None else sy
        return CameraIntrinsics(self.fx * sx, self.fy * sy, self.px * sx, self.py * sy,
                                int(round(self.width * sx)), int(round(self.height * sy)))

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "px": self.px, "py": self.py,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["px"]), float(d["py"]),
                   int(d["width"]), int(d["height"]))


class CellIndex(NamedTuple):
    """Zero-based grid cell; ``row`` indexes y, ``col`` indexes x."""

    row: int
    col: int


def transform_points(pose: Pose, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    return pts @ pose.R.T + pose.t


def project_points(pts_cam, K: CameraIntrinsics) -> np.ndarray:
    pts_cam = np.asarray(pts_cam, dtype=float).reshape(-1, 3)
    z = pts_cam[:, 2]
    if np.any(~(z > 1e-9)):
        raise BehindCameraError("cannot project points with non-positive depth")
    u = K.fx * pts_cam[:, 0] / z + K.px
    v = K.fy * pts_cam[:, 1] / z + K.py
    return np.stack([u, v], axis=1)


def recover_translation(center, tz: float, K: CameraIntrinsics) -> np.ndarray:
    """Full translation from the projected object center and its depth."""
    if not tz > 0:
        raise InvalidDepthError(f"depth must be positive, got {tz}")
    cx, cy = center
    return np.array([(cx - K.px) * tz / K.fx, (cy - K.py) * tz / K.fy, float(tz)])


def object_center(pose: Pose, K: CameraIntrinsics) -> np.ndarray:
    """Pixel projection of the model-frame origin."""
    return project_points(pose.t[None], K)[0]


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-np.logaddexp(0.0, -x))


def decode_cell_center(raw, cell: CellIndex, image_size, grid_size: int) -> np.ndarray:
    """Pixel center from raw offset logits relative to a cell's top-left corner."""
    if np.isscalar(image_size):
        width = height = float(image_size)
    else:
        width, height = (float(s) for s in image_size)
    off = sigmoid(raw)
    gx = off[0] + cell.col
    gy = off[1] + cell.row
    return np.array([gx * width / grid_size, gy * height / grid_size])


def compose_refinement(pose: Pose, dq, dc, dtz: float, K: CameraIntrinsics) -> Pose:
    """Apply a residual (rotation on the left, center shift in pixels, depth step)."""
    tz_new = pose.tz + float(dtz)
    if not tz_new > 0:
        raise InvalidDepthError(f"refined depth {tz_new} is not positive")
    center = object_center(pose, K) + np.asarray(dc, dtype=float)
    t_new = recover_translation(center, tz_new, K)
    q_new = quat_multiply(normalize_quat(dq), pose.quat)
    return Pose(q_new, t_new)


def random_quat(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation on SO(3)."""
    return canonical_quat(rng.standard_normal(4))
