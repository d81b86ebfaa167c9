"""Oriented triangle primitives and the soft-to-crisp schedules.

A :class:`TriangleSet` keeps the raw, optimisable attributes of every
primitive. :func:`evaluate_primitives` turns them into render-ready
quantities (world vertices, opacity, colour, blur) for a given
:class:`ScheduleState`.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.special import expit

from .errors import InvalidInputError
from .normals import TangentFrameField, blend_coefficient, BootstrapSchedule
from .scene import CameraPose, Intrinsics, PointMap, matrix_to_quat, quat_to_matrix, transform_points

SH_C0 = 0.28209479177387814
TEMPLATE_BASE = np.array([[0.0, 0.577, 0.0], [-0.5, -0.289, 0.0], [0.5, -0.289, 0.0]])
TEMPLATE_PRESCALE = 4.0
STAGE1_SCALE_RANGE = (0.5, 18.0)
STAGE2_SCALE_RANGE = (1.2, 15.0)


def canonical_template(prescale: float = TEMPLATE_PRESCALE) -> np.ndarray:
    """The equilateral template, one vertex per row."""
    return prescale * TEMPLATE_BASE


TEMPLATE = canonical_template()


@dataclass(frozen=True)
class ScheduleConfig:
    e_init: float = 1.0
    e_final: float = 2.0
    e_steps: int = 16000
    tau_init: float = 1.0
    tau_final: float = 5.0
    tau_steps: int = 16000
    beta_init: float = 1.0
    beta_final: float = 0.5
    beta_steps: int = 16000
    t_tk: int = 6000
    t_bl: int = 20000
    # alpha floor is active while the opacity exponent warms up
    floor_steps: int | None = None

    @property
    def bootstrap(self) -> BootstrapSchedule:
        return BootstrapSchedule(self.t_tk, self.t_bl)

    def rescaled(self, factor: float) -> "ScheduleConfig":
        """Shrink or stretch every ramp length by ``factor``."""
        def s(n):
            return None if n is None else max(1, int(round(n * factor)))
        t_tk = int(round(self.t_tk * factor))
        return replace(self, e_steps=s(self.e_steps), tau_steps=s(self.tau_steps), beta_steps=s(self.beta_steps),
                       t_tk=t_tk, t_bl=max(t_tk + 1, int(round(self.t_bl * factor))),
                       floor_steps=s(self.floor_steps))


@dataclass(frozen=True)
class ScheduleState:
    t: float
    e: float
    tau: float
    beta: float
    alpha: float
    floor_active: bool = True

    @classmethod
    def final(cls, cfg: ScheduleConfig = ScheduleConfig()) -> "ScheduleState":
        return cls(float("inf"), cfg.e_final, cfg.tau_final, cfg.beta_final, 0.0, False)


@dataclass(frozen=True)
class TriangleConfig:
    scale_range: tuple = STAGE1_SCALE_RANGE
    coverage_threshold: float = 0.20
    coverage_gain: float = 1.0
    coverage_boost: bool = True
    blur_eps: float = 1e-4
    alpha_floor: float = 0.02
    degenerate_area: float = 1e-12
    prescale: float = TEMPLATE_PRESCALE

    @property
    def template(self) -> np.ndarray:
        return canonical_template(self.prescale)


def _ramp(t, start, end, length):
    if length <= 0 or t >= length:
        return end
    return start + (end - start) * (t / length)


def schedule_state(t: float, cfg: ScheduleConfig = ScheduleConfig()) -> ScheduleState:
    if t < 0:
        raise InvalidInputError("step must be non-negative")
    floor_steps = cfg.e_steps if cfg.floor_steps is None else cfg.floor_steps
    return ScheduleState(
        t=t,
        e=_ramp(t, cfg.e_init, cfg.e_final, cfg.e_steps),
        tau=_ramp(t, cfg.tau_init, cfg.tau_final, cfg.tau_steps),
        beta=_ramp(t, cfg.beta_init, cfg.beta_final, cfg.beta_steps),
        alpha=blend_coefficient(t, cfg.bootstrap),
        floor_active=t < floor_steps,
    )


# -- scalar maps (all vectorised) ---------------------------------------------

def opacity_map(p, e):
    """``0.5 * (1 - (1 - p)^e + p^e)``; exact at 0 and 1 for every ``e``."""
    p = np.asarray(p, dtype=np.float64)
    if np.any((p < 0.0) | (p > 1.0)) or np.any(np.isnan(p)):
        raise InvalidInputError("density must lie in [0, 1]")
    out = 0.5 * (1.0 - (1.0 - p) ** e + p ** e)
    return out if out.ndim else float(out)


def opacity_map_grad(p, e):
    p = np.asarray(p, dtype=np.float64)
    return 0.5 * e * ((1.0 - p) ** (e - 1.0) + p ** (e - 1.0))


def temperature_sharpen(o, tau):
    """``sigmoid(tau * logit(o))``; 0 and 1 pass through unchanged."""
    o = np.asarray(o, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = expit(tau * (np.log(o) - np.log1p(-o)))
    out = np.where((o <= 0.0) | (o >= 1.0), o, out)
    return out if out.ndim else float(out)


def temperature_sharpen_grad(o, tau):
    o = np.asarray(o, dtype=np.float64)
    s = np.asarray(temperature_sharpen(o, tau))
    inner = (o > 0.0) & (o < 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = tau * s * (1.0 - s) / (o * (1.0 - o))
    return np.where(inner, g, 0.0)


def alpha_floor(o, active: bool = True, floor: float = 0.02):
    if not active:
        return o
    out = np.maximum(o, floor)
    return out if np.ndim(out) else float(out)


def blur_value(blur_raw, beta, eps=1e-4):
    out = expit(np.asarray(blur_raw, dtype=np.float64)) * beta + eps
    return out if out.ndim else float(out)


def map_scales(scale_logits, depth, intr, scale_range=STAGE1_SCALE_RANGE):
    """World-space sizes from bounded scale logits.

    ``intr`` is an :class:`Intrinsics` or a per-axis footprint array
    (world size per unit depth).
    """
    s_min, s_max = scale_range
    if not s_min < s_max:
        raise InvalidInputError("scale range must satisfy s_min < s_max")
    fp = intr.footprint() if isinstance(intr, Intrinsics) else np.asarray(intr, dtype=np.float64)
    logits = np.asarray(scale_logits, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    return (s_min + expit(logits) * (s_max - s_min)) * depth[..., None] * fp


def coverage_boost_factor(opacity, threshold=0.20, gain=1.0):
    o = np.asarray(opacity, dtype=np.float64)
    return np.where(o < threshold, 1.0 + gain * (threshold - o) / threshold, 1.0)


def coverage_boost(scales, opacity, threshold=0.20, gain=1.0):
    """Enlarge primitives whose opacity is below ``threshold``."""
    return np.asarray(scales, dtype=np.float64) * coverage_boost_factor(opacity, threshold, gain)[..., None]


def sh0_to_color(sh0):
    return np.clip(np.asarray(sh0, dtype=np.float64) * SH_C0 + 0.5, 0.0, 1.0)


def color_to_sh0(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def triangle_area(verts):
    v = np.asarray(verts, dtype=np.float64)
    return 0.5 * np.linalg.norm(np.cross(v[..., 1, :] - v[..., 0, :], v[..., 2, :] - v[..., 0, :]), axis=-1)


def build_vertices(center, scales, quat, pose: CameraPose | None = None, template=TEMPLATE,
                   degenerate_area: float = 1e-12):
    """World vertices ``R_c R_n (T_k * s) + c`` and a degenerate flag.

    Accepts single primitives or batches (leading dimensions broadcast).
    ``pose`` supplies ``R_c``; ``None`` means identity.
    """
    center = np.asarray(center, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    R = quat_to_matrix(quat)
    if pose is not None:
        R = pose.rotation @ R
    local = np.asarray(template)[..., :, :] * scales[..., None, :]
    verts = np.einsum("...ij,...kj->...ki", R, local) + center[..., None, :]
    return verts, triangle_area(verts) < degenerate_area


# -- primitive container --------------------------------------------------------

@dataclass
class TriangleSet:
    """Structure-of-arrays primitive store, one row per primitive.

    ``quat`` is the camera-frame tangent rotation and ``cam_quat`` the
    camera-to-world rotation of the source view; the world orientation is
    their product. ``depth`` and ``footprint`` convert scale logits to world
    sizes. ``source`` holds ``(view, row, col)``.
    """

    center: np.ndarray
    scale_logits: np.ndarray
    quat: np.ndarray
    cam_quat: np.ndarray
    sh0: np.ndarray
    density_logit: np.ndarray
    blur_raw: np.ndarray
    depth: np.ndarray
    footprint: np.ndarray
    source: np.ndarray
    fallback: np.ndarray = None

    def __post_init__(self):
        n = len(np.asarray(self.center).reshape(-1, 3))
        shapes = {"center": (3,), "scale_logits": (3,), "quat": (4,), "cam_quat": (4,), "sh0": (3,),
                  "density_logit": (), "blur_raw": (), "depth": (), "footprint": (3,)}
        for name, tail in shapes.items():
            a = np.asarray(getattr(self, name), dtype=np.float64).reshape((n,) + tail)
            if not np.all(np.isfinite(a)):
                raise InvalidInputError(f"non-finite values in {name}")
            setattr(self, name, a)
        self.source = np.asarray(self.source, dtype=np.int64).reshape(n, 3)
        if self.fallback is None:
            self.fallback = np.zeros(n, dtype=bool)
        self.fallback = np.asarray(self.fallback, dtype=bool).reshape(n)
        for name in ("quat", "cam_quat"):
            q = getattr(self, name)
            norm = np.linalg.norm(q, axis=1, keepdims=True)
            if n and np.any(norm == 0):
                raise InvalidInputError(f"zero quaternion in {name}")
            if n and np.abs(norm - 1.0).max() > 1e-6:
                setattr(self, name, q / norm)

    def __len__(self):
        return len(self.center)

    @classmethod
    def empty(cls) -> "TriangleSet":
        z = np.zeros
        return cls(z((0, 3)), z((0, 3)), z((0, 4)), z((0, 4)), z((0, 3)), z(0), z(0), z(0), z((0, 3)),
                   z((0, 3), dtype=np.int64), z(0, dtype=bool))

    def copy(self) -> "TriangleSet":
        return TriangleSet(**{f.name: np.array(getattr(self, f.name), copy=True) for f in fields(self)})

    def subset(self, index) -> "TriangleSet":
        return TriangleSet(**{f.name: np.asarray(getattr(self, f.name))[index] for f in fields(self)})

    @classmethod
    def concatenate(cls, sets) -> "TriangleSet":
        sets = list(sets)
        if not sets:
            return cls.empty()
        return cls(**{f.name: np.concatenate([getattr(s, f.name) for s in sets]) for f in fields(cls)})

    def world_rotations(self) -> np.ndarray:
        return quat_to_matrix(self.cam_quat) @ quat_to_matrix(self.quat)


@dataclass
class PrimitiveState:
    """Render-ready quantities of a :class:`TriangleSet` at one schedule state.

    Intermediates needed by the backward pass are kept alongside.
    """

    density: np.ndarray        # sigmoid(density_logit)
    mapped: np.ndarray         # opacity_map output, read by coverage boost
    sharpened: np.ndarray      # temperature_sharpen output
    opacity: np.ndarray        # after the alpha floor
    base_scales: np.ndarray
    boost: np.ndarray
    scales: np.ndarray
    rotation: np.ndarray       # world orientation R_c R_n
    vertices: np.ndarray       # (N, 3, 3)
    degenerate: np.ndarray
    blur: np.ndarray
    color: np.ndarray
    normal: np.ndarray         # world face normal (third frame axis)


def evaluate_primitives(tris: TriangleSet, sched: ScheduleState, cfg: TriangleConfig = TriangleConfig()) -> PrimitiveState:
    density = expit(tris.density_logit)
    mapped = np.asarray(opacity_map(density, sched.e), dtype=np.float64).reshape(-1)
    sharpened = np.asarray(temperature_sharpen(mapped, sched.tau), dtype=np.float64).reshape(-1)
    opacity = np.asarray(alpha_floor(sharpened, sched.floor_active, cfg.alpha_floor), dtype=np.float64).reshape(-1)
    base = map_scales(tris.scale_logits, tris.depth, tris.footprint, cfg.scale_range)
    if cfg.coverage_boost:
        boost = coverage_boost_factor(mapped, cfg.coverage_threshold, cfg.coverage_gain)
    else:
        boost = np.ones(len(tris))
    scales = base * boost[:, None]
    R = tris.world_rotations()
    local = cfg.template[None, :, :] * scales[:, None, :]
    verts = np.einsum("nij,nkj->nki", R, local) + tris.center[:, None, :]
    degenerate = triangle_area(verts) < cfg.degenerate_area
    return PrimitiveState(
        density=density, mapped=mapped, sharpened=sharpened, opacity=opacity,
        base_scales=base, boost=boost, scales=scales, rotation=R, vertices=verts,
        degenerate=degenerate,
        blur=np.asarray(blur_value(tris.blur_raw, sched.beta, cfg.blur_eps), dtype=np.float64).reshape(-1),
        color=sh0_to_color(tris.sh0), normal=R[:, :, 2],
    )


# -- assembly -------------------------------------------------------------------

@dataclass
class RawAttributes:
    """Per-pixel raw primitive attributes for one view (H x W grids)."""

    scale_logits: np.ndarray
    quat: np.ndarray
    sh0: np.ndarray
    density_logit: np.ndarray
    blur_raw: np.ndarray

    @classmethod
    def default(cls, shape, scale_logit=0.0, density_logit=0.0, blur_raw=0.0) -> "RawAttributes":
        H, W = shape
        q = np.zeros((H, W, 4))
        q[..., 0] = 1.0
        return cls(np.full((H, W, 3), scale_logit), q, np.zeros((H, W, 3)),
                   np.full((H, W), density_logit), np.full((H, W), blur_raw))

    @property
    def shape(self):
        return np.asarray(self.density_logit).shape


def assemble_scene(pm: PointMap, frames: TangentFrameField, raw: RawAttributes, pose: CameraPose,
                   intr: Intrinsics, view: int = 0) -> TriangleSet:
    """One primitive per unmasked pixel, in row-major source order.

    Frame quaternions override the raw ones wherever the frame is valid.
    """
    shape = pm.shape
    grids = [frames.mask, raw.density_logit, np.asarray(raw.scale_logits)[..., 0], np.asarray(raw.quat)[..., 0],
             np.asarray(raw.sh0)[..., 0], raw.blur_raw]
    if any(np.asarray(g).shape != shape for g in grids):
        raise InvalidInputError("all per-pixel grids must match the point-map shape")
    rows, cols = np.nonzero(pm.mask)
    n = len(rows)
    use_frame = frames.mask[rows, cols]
    quat = np.where(use_frame[:, None], frames.quats[rows, cols], np.asarray(raw.quat, dtype=np.float64)[rows, cols])
    cam_quat = np.tile(matrix_to_quat(pose.rotation), (n, 1))
    return TriangleSet(
        center=transform_points(pose, pm.points[rows, cols]),
        scale_logits=np.asarray(raw.scale_logits, dtype=np.float64)[rows, cols],
        quat=quat,
        cam_quat=cam_quat,
        sh0=np.asarray(raw.sh0, dtype=np.float64)[rows, cols],
        density_logit=np.asarray(raw.density_logit, dtype=np.float64)[rows, cols],
        blur_raw=np.asarray(raw.blur_raw, dtype=np.float64)[rows, cols],
        depth=pm.points[rows, cols, 2],
        footprint=np.tile(intr.footprint(), (n, 1)),
        source=np.stack([np.full(n, view), rows, cols], axis=1),
        fallback=~use_frame,
    )
