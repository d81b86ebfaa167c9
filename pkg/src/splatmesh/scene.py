"""Camera geometry, point-map unprojection and pose utilities.

Conventions used throughout the package:

* camera frame: +x right, +y down, +z forward;
* pixel grids are row-major, row 0 is the top image row, and the pixel at
  ``(row, col)`` samples the image plane at ``(u, v) = (col, row)``;
* poses are camera-to-world, ``x_world = R @ x_cam + t``;
* quaternions are ``(w, x, y, z)`` with ``w >= 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateInputError, InvalidInputError

# log-depth clamp applied before exponentiation
LOG_DEPTH_LIMIT = 30.0
ROTATION_TOL = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidInputError("principal point outside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def footprint(self) -> np.ndarray:
        """World size per unit depth of one pixel along x, y and the normal axis."""
        return np.array([1.0 / self.fx, 1.0 / self.fy, 1.0 / np.sqrt(self.fx * self.fy)])

    def downsampled(self, stride: int) -> "Intrinsics":
        """Intrinsics of the grid that keeps every ``stride``-th pixel."""
        return Intrinsics(
            self.fx / stride,
            self.fy / stride,
            self.cx / stride,
            self.cy / stride,
            -(-self.width // stride),
            -(-self.height // stride),
        )


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidInputError("pose contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > ROTATION_TOL or abs(np.linalg.det(R) - 1.0) > ROTATION_TOL:
            raise InvalidInputError("pose rotation is not in SO(3)")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "CameraPose":
        Rt = self.rotation.T
        return CameraPose(Rt, -Rt @ self.translation)

    def compose(self, other: "CameraPose") -> "CameraPose":
        """``self ∘ other``: apply ``other`` first."""
        return CameraPose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T


@dataclass
class PointMap:
    """Per-pixel camera-frame points with a validity mask."""

    points: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise InvalidInputError("point map must be H x W x 3")
        if self.mask is None:
            self.mask = np.ones(self.points.shape[:2], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.points.shape[:2]:
            raise InvalidInputError("mask shape does not match point map")
        z = self.points[..., 2][self.mask]
        if not np.all(z > 0):
            raise InvalidInputError("unmasked points must have positive depth")

    @property
    def shape(self):
        return self.mask.shape

    @property
    def depth(self) -> np.ndarray:
        return self.points[..., 2]


def check_image(pixels) -> np.ndarray:
    """Validate an H x W x 3 image with channels in [0, 1]."""
    img = np.asarray(pixels, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidInputError("image must be H x W x 3")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise InvalidInputError("image channels must lie in [0, 1]")
    return img


def unproject_point(raw) -> np.ndarray:
    """Map raw ``(u, v, z')`` to the camera-frame point ``exp(z') * (u, v, 1)``.

    ``z'`` is clamped to ``[-30, 30]`` so the depth is always a normal,
    strictly positive float. Works on any ``(..., 3)`` array.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != 3:
        raise InvalidInputError("raw point must have 3 components")
    if not np.all(np.isfinite(raw)):
        raise InvalidInputError("raw point has non-finite components")
    z = np.exp(np.clip(raw[..., 2], -LOG_DEPTH_LIMIT, LOG_DEPTH_LIMIT))
    out = np.empty_like(raw)
    out[..., 0] = z * raw[..., 0]
    out[..., 1] = z * raw[..., 1]
    out[..., 2] = z
    return out


def raw_from_point(points) -> np.ndarray:
    """Inverse of :func:`unproject_point` for points with positive depth."""
    p = np.asarray(points, dtype=np.float64)
    out = np.empty_like(p)
    out[..., 0] = p[..., 0] / p[..., 2]
    out[..., 1] = p[..., 1] / p[..., 2]
    out[..., 2] = np.log(p[..., 2])
    return out


def pixel_grid(height: int, width: int):
    rows, cols = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return rows, cols


def depth_to_points(depth, intr: Intrinsics, mask=None) -> PointMap:
    """Back-project a depth map through a pinhole camera."""
    depth = np.asarray(depth, dtype=np.float64)
    rows, cols = pixel_grid(*depth.shape)
    raw = np.stack([(cols - intr.cx) / intr.fx, (rows - intr.cy) / intr.fy, np.zeros_like(depth)], axis=-1)
    if mask is None:
        mask = depth > 0
    safe = np.where(mask, depth, 1.0)
    pts = raw.copy()
    pts[..., 2] = 1.0
    pts *= safe[..., None]
    return PointMap(pts, mask)


def project_to_so3(m) -> np.ndarray:
    """Closest rotation to ``m`` in the Frobenius sense via SVD."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        raise InvalidInputError("expected a finite 3x3 matrix")
    U, S, Vt = np.linalg.svd(m)
    if S[0] == 0.0 or S[1] <= 1e-12 * S[0]:
        raise DegenerateInputError("matrix has rank < 2; rotation is undetermined")
    d = np.sign(np.linalg.det(U @ Vt))
    return U @ np.diag([1.0, 1.0, d]) @ Vt


def relative_pose(a: CameraPose, b: CameraPose) -> CameraPose:
    """Pose of ``b`` expressed in the frame of ``a``."""
    Ra = a.rotation
    return CameraPose(Ra.T @ b.rotation, Ra.T @ (b.translation - a.translation))


def transform_points(pose: CameraPose, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ pose.rotation.T + pose.translation


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    R = np.asarray(R, dtype=np.float64)
    # atan2 keeps full precision near 0 and pi, unlike arccos of the trace
    s = np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arctan2(s, c))


# -- quaternions -------------------------------------------------------------

def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrices from (possibly unnormalised) ``(..., 4)`` quaternions."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_matrix_grad(q, grad_R) -> np.ndarray:
    """Backpropagate ``dL/dR`` through :func:`quat_to_matrix`, including the normalisation."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / norm
    w, x, y, z = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
    G = grad_R
    gw = 2 * (-z * G[..., 0, 1] + y * G[..., 0, 2] + z * G[..., 1, 0] - x * G[..., 1, 2] - y * G[..., 2, 0] + x * G[..., 2, 1])
    gx = 2 * (y * G[..., 0, 1] + z * G[..., 0, 2] + y * G[..., 1, 0] - 2 * x * G[..., 1, 1] - w * G[..., 1, 2]
              + z * G[..., 2, 0] + w * G[..., 2, 1] - 2 * x * G[..., 2, 2])
    gy = 2 * (-2 * y * G[..., 0, 0] + x * G[..., 0, 1] + w * G[..., 0, 2] + x * G[..., 1, 0] + z * G[..., 1, 2]
              - w * G[..., 2, 0] + z * G[..., 2, 1] - 2 * y * G[..., 2, 2])
    gz = 2 * (-2 * z * G[..., 0, 0] - w * G[..., 0, 1] + x * G[..., 0, 2] + w * G[..., 1, 0] - 2 * z * G[..., 1, 1]
              + y * G[..., 1, 2] + x * G[..., 2, 0] + y * G[..., 2, 1])
    gu = np.stack([gw, gx, gy, gz], axis=-1)
    # d(q/|q|)/dq = (I - u u^T) / |q|
    return (gu - u * np.sum(gu * u, axis=-1, keepdims=True)) / norm


def matrix_to_quat(R) -> np.ndarray:
    """Unit quaternions ``(w, x, y, z)`` with ``w >= 0`` from rotation matrices."""
    R = np.asarray(R, dtype=np.float64)
    flat = R.reshape(-1, 3, 3)
    if flat.shape[0] == 0:
        return np.zeros(R.shape[:-2] + (4,))
    xyzw = Rotation.from_matrix(flat).as_quat(canonical=True)
    q = np.concatenate([xyzw[:, 3:], xyzw[:, :3]], axis=1)
    return q.reshape(R.shape[:-2] + (4,))


def quat_multiply(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> CameraPose:
    """Camera-to-world pose at ``eye`` looking towards ``target``.

    ``up`` is the world direction that should appear upwards in the image
    (image up is camera ``-y``).
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)
    return CameraPose(project_to_so3(R), eye)
