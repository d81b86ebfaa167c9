"""Per-pixel surface normals and tangent frames derived from point maps.

The pipeline is: geometry normals from finite differences of the point map,
an orientation-aware box filter, a residual refinement combiner, blending with
teacher normals on a cosine schedule, and finally tangent frames whose
rotation orients the triangle template.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidInputError
from .scene import PointMap, matrix_to_quat

DEGENERATE_CROSS = 1e-12
PARALLEL_TOL = 1e-8


@dataclass
class NormalField:
    normals: np.ndarray
    mask: np.ndarray
    # gradient-stop marker for the optimiser; no numeric effect
    detached: bool = False

    def __post_init__(self):
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.normals.shape != self.mask.shape + (3,):
            raise InvalidInputError("normal field must be H x W x 3 with an H x W mask")

    @property
    def shape(self):
        return self.mask.shape

    def copy(self) -> "NormalField":
        return NormalField(self.normals.copy(), self.mask.copy(), self.detached)


@dataclass
class TangentFrameField:
    """Orthonormal ``[t, b, n]`` frames (columns) and their quaternions."""

    frames: np.ndarray
    quats: np.ndarray
    mask: np.ndarray

    @property
    def fallback(self) -> np.ndarray:
        """Pixels whose frame is unusable; the raw quaternion is kept there."""
        return ~self.mask


@dataclass(frozen=True)
class BootstrapSchedule:
    t_tk: int = 6000
    t_bl: int = 20000

    def __post_init__(self):
        if not 0 <= self.t_tk < self.t_bl:
            raise InvalidInputError("bootstrap schedule needs 0 <= t_tk < t_bl")


class FlaggedLoss(NamedTuple):
    value: float
    empty: bool


def _normalize(v, eps=0.0):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    ok = n[..., 0] > eps
    out = np.where(ok[..., None], v / np.where(n > 0, n, 1.0), 0.0)
    return out, ok


def _shift(a, dr, dc, fill):
    """``out[r, c] = a[r + dr, c + dc]``, ``fill`` outside the grid."""
    H, W = a.shape[:2]
    out = np.full_like(a, fill)
    r0, r1 = max(0, -dr), min(H, H - dr)
    c0, c1 = max(0, -dc), min(W, W - dc)
    if r0 < r1 and c0 < c1:
        out[r0:r1, c0:c1] = a[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
    return out


def central_differences(points):
    """Horizontal and vertical central differences with edge replication."""
    P = np.pad(points, ((1, 1), (1, 1), (0, 0)), mode="edge")
    dx = 0.5 * (P[1:-1, 2:] - P[1:-1, :-2])
    dy = 0.5 * (P[2:, 1:-1] - P[:-2, 1:-1])
    return dx, dy


def average_pool(points, mask, window):
    """Masked box average; pixels with no valid neighbour keep their value."""
    h = window // 2
    acc = np.zeros_like(points)
    cnt = np.zeros(mask.shape)
    w = mask.astype(np.float64)
    for dr in range(-h, h + 1):
        for dc in range(-h, h + 1):
            acc += _shift(points * w[..., None], dr, dc, 0.0)
            cnt += _shift(w, dr, dc, 0.0)
    return np.where(cnt[..., None] > 0, acc / np.maximum(cnt, 1.0)[..., None], points)


def _border_mask(shape):
    m = np.zeros(shape, dtype=bool)
    m[1:-1, 1:-1] = True
    return m


def geometry_normals(pm: PointMap, smooth_window: int = 1, detach: bool = False,
                     eps: float = DEGENERATE_CROSS) -> NormalField:
    """Camera-facing normals ``normalize(dx × dy)`` of a point map.

    With ``smooth_window > 1`` the points are box-averaged first. Border
    pixels, pixels next to invalid points and near-zero cross products are
    masked out.
    """
    H, W = pm.shape
    if H < 3 or W < 3:
        raise InvalidInputError("point map must be at least 3x3")
    if smooth_window < 1 or smooth_window % 2 == 0:
        raise InvalidInputError("smooth_window must be a positive odd integer")
    pts = pm.points if smooth_window == 1 else average_pool(pm.points, pm.mask, smooth_window)
    dx, dy = central_differences(pts)
    cross = np.cross(dx, dy)
    valid = pm.mask & _border_mask(pm.shape)
    for dr, dc in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        valid &= _shift(pm.mask, dr, dc, False)
    n, ok = _normalize(cross)
    valid &= np.linalg.norm(cross, axis=-1) >= eps
    facing = np.sum(n * pm.points, axis=-1) > 0
    n = np.where(facing[..., None], -n, n)
    n[~valid] = 0.0
    return NormalField(n, valid, detached=detach)


def orientation_aware_filter(nf: NormalField, window: int = 3) -> NormalField:
    """Box-average each normal over neighbours that agree with it in sign."""
    if window < 3 or window % 2 == 0:
        raise InvalidInputError("window must be an odd integer >= 3")
    h = window // 2
    acc = np.zeros_like(nf.normals)
    for dr in range(-h, h + 1):
        for dc in range(-h, h + 1):
            nj = _shift(nf.normals, dr, dc, 0.0)
            mj = _shift(nf.mask, dr, dc, False)
            agree = mj & (np.sum(nj * nf.normals, axis=-1) > 0)
            acc += np.where(agree[..., None], nj, 0.0)
    out, ok = _normalize(acc)
    mask = nf.mask & ok
    out[~mask] = 0.0
    return NormalField(out, mask, nf.detached)


def refine_normals(n_geo: NormalField, n_sm: NormalField, residual=None) -> NormalField:
    """Residual combiner ``normalize(n_sm + residual)``.

    ``residual`` stands in for a learned correction; where it is zero the
    smoothed normal passes through bit-for-bit.
    """
    if n_geo.shape != n_sm.shape:
        raise InvalidInputError("normal field shapes differ")
    mask = n_sm.mask & n_geo.mask
    if residual is None:
        out = n_sm.normals.copy()
        out[~mask] = 0.0
        return NormalField(out, mask, n_sm.detached)
    residual = np.asarray(residual, dtype=np.float64)
    if residual.shape != n_sm.normals.shape:
        raise InvalidInputError("residual shape does not match normal field")
    summed, ok = _normalize(n_sm.normals + residual, eps=1e-12)
    zero = np.all(residual == 0.0, axis=-1)
    out = np.where(zero[..., None], n_sm.normals, summed)
    mask &= zero | ok
    out[~mask] = 0.0
    return NormalField(out, mask, n_sm.detached)


def blend_coefficient(t: float, sched: BootstrapSchedule = BootstrapSchedule()) -> float:
    """Teacher weight: 1 during takeover, cosine decay, 0 after release."""
    if t < 0:
        raise InvalidInputError("step must be non-negative")
    if t <= sched.t_tk:
        return 1.0
    if t >= sched.t_bl:
        return 0.0
    frac = (t - sched.t_tk) / (sched.t_bl - sched.t_tk)
    return 0.5 * (1.0 + math.cos(math.pi * frac))


def bootstrap_blend(n_ref: NormalField, n_tch: NormalField, alpha: float) -> NormalField:
    """Blend teacher normals into the model normals where both are valid."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError("alpha must lie in [0, 1]")
    if n_ref.shape != n_tch.shape:
        raise InvalidInputError("normal field shapes differ")
    out = n_ref.normals.copy()
    joint = n_ref.mask & n_tch.mask
    if alpha == 0.0:
        return NormalField(out, n_ref.mask.copy(), n_ref.detached)
    if alpha == 1.0:
        out[joint] = n_tch.normals[joint]
        return NormalField(out, n_ref.mask.copy(), n_ref.detached)
    blended, ok = _normalize(alpha * n_tch.normals + (1.0 - alpha) * n_ref.normals, eps=1e-12)
    use = joint & ok
    out[use] = blended[use]
    return NormalField(out, n_ref.mask.copy(), n_ref.detached)


def resize_normals(nf: NormalField, height: int, width: int) -> NormalField:
    """Bilinear resize (pixel-centre aligned) followed by renormalisation.

    A resized pixel is valid only if every source pixel it draws from is.
    """
    H, W = nf.shape
    if (H, W) == (height, width):
        return nf.copy()
    ys = np.clip((np.arange(height) + 0.5) * H / height - 0.5, 0, H - 1)
    xs = np.clip((np.arange(width) + 0.5) * W / width - 0.5, 0, W - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]

    def interp(a):
        a = a if a.ndim == 3 else a[..., None]
        top = a[y0][:, x0] * (1 - wx) + a[y0][:, x1] * wx
        bot = a[y1][:, x0] * (1 - wx) + a[y1][:, x1] * wx
        return top * (1 - wy) + bot * wy

    n, ok = _normalize(interp(nf.normals), eps=1e-12)
    m = interp(nf.mask.astype(np.float64))[..., 0] > 1.0 - 1e-9
    mask = m & ok
    n[~mask] = 0.0
    return NormalField(n, mask, nf.detached)


def frames_from_normals(normals, dx, mask=None, tol: float = PARALLEL_TOL):
    """Build ``[t, b, n]`` frames from unit normals and a tangent hint ``dx``.

    Returns ``(frames, valid)``; invalid frames are set to the identity.
    """
    normals = np.asarray(normals, dtype=np.float64)
    dx = np.asarray(dx, dtype=np.float64)
    proj = dx - np.sum(dx * normals, axis=-1, keepdims=True) * normals
    pn = np.linalg.norm(proj, axis=-1)
    valid = pn > tol * np.linalg.norm(dx, axis=-1)
    if mask is not None:
        valid &= mask
    t, _ = _normalize(proj)
    b = np.cross(normals, t)
    t = np.cross(b, normals)
    frames = np.stack([t, b, normals], axis=-1)
    frames[~valid] = np.eye(3)
    return frames, valid


def tangent_frames(n_fwd: NormalField, pm: PointMap) -> TangentFrameField:
    if n_fwd.shape != pm.shape:
        raise InvalidInputError("normal field and point map shapes differ")
    dx, _ = central_differences(pm.points)
    frames, valid = frames_from_normals(n_fwd.normals, dx, n_fwd.mask)
    quats = np.zeros(pm.shape + (4,))
    quats[..., 0] = 1.0
    if valid.any():
        quats[valid] = matrix_to_quat(frames[valid])
    return TangentFrameField(frames, quats, valid)


def normal_cosine_loss(n_ref: NormalField, n_tch: NormalField) -> FlaggedLoss:
    """Mean of ``1 - n_ref · n_tch`` over jointly valid pixels."""
    if n_ref.shape != n_tch.shape:
        raise InvalidInputError("normal field shapes differ")
    joint = n_ref.mask & n_tch.mask
    if not joint.any():
        return FlaggedLoss(0.0, True)
    cos = np.sum(n_ref.normals[joint] * n_tch.normals[joint], axis=-1)
    return FlaggedLoss(float(np.mean(1.0 - cos)), False)


def normal_pipeline(pm: PointMap, teacher: NormalField | None = None, step: int = 0,
                    sched: BootstrapSchedule = BootstrapSchedule(), smooth_window: int = 3,
                    filter_window: int = 3, residual=None, detach: bool = False) -> dict:
    """Run the full chain and return every intermediate field by name.

    Keys: ``geo``, ``sm``, ``ref``, ``fwd`` (normal fields), ``frames``
    (tangent frames) and ``alpha`` (teacher weight used).
    """
    n_geo = geometry_normals(pm, 1, detach)
    n_sm = geometry_normals(pm, smooth_window, detach) if smooth_window > 1 else n_geo.copy()
    n_sm = orientation_aware_filter(n_sm, filter_window)
    n_ref = refine_normals(n_geo, n_sm, residual)
    alpha = 0.0
    n_fwd = n_ref
    if teacher is not None:
        if teacher.shape != pm.shape:
            teacher = resize_normals(teacher, *pm.shape)
        alpha = blend_coefficient(step, sched)
        n_fwd = bootstrap_blend(n_ref, teacher, alpha)
    return {"geo": n_geo, "sm": n_sm, "ref": n_ref, "fwd": n_fwd,
            "frames": tangent_frames(n_fwd, pm), "alpha": alpha}
