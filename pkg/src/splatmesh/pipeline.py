"""Glue from per-view point maps and images to a fitted, exportable scene."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.special import logit

from .errors import InvalidInputError
from .fit import FitConfig, FitResult, LossWeights, View, fit_scene
from .mesh import Mesh, export_mesh, reference_normals
from .normals import NormalField, normal_pipeline
from .scene import CameraPose, Intrinsics, PointMap
from .triangles import (STAGE1_SCALE_RANGE, RawAttributes, ScheduleConfig, TriangleConfig, TriangleSet,
                        assemble_scene, color_to_sh0)


@dataclass(frozen=True)
class InitConfig:
    """How primitives are seeded from a view.

    ``stride`` subsamples the point map; ``scale`` is the initial mapped
    scale in grid pixels (template side is ``prescale * scale``).
    """

    stride: int = 1
    scale: float = 0.75
    density_logit: float = 2.0
    blur_raw: float = 0.0
    smooth_window: int = 3
    filter_window: int = 3
    scale_range: tuple = STAGE1_SCALE_RANGE

    @property
    def scale_logit(self) -> float:
        lo, hi = self.scale_range
        if not lo < self.scale < hi:
            raise InvalidInputError(f"initial scale must lie inside {self.scale_range}")
        return float(logit((self.scale - lo) / (hi - lo)))


@dataclass
class SourceView:
    """One input view: target image, camera, point map and optional teacher."""

    image: np.ndarray
    pose: CameraPose
    intr: Intrinsics
    points: PointMap
    teacher: NormalField | None = None
    name: str = ""

    def as_target(self) -> View:
        return View(self.image, self.pose, self.intr, self.name)


def _fill_nearest(values, valid):
    """Replace invalid entries by their nearest valid neighbour."""
    if valid.all() or not valid.any():
        return values
    _, (ri, ci) = ndimage.distance_transform_edt(~valid, return_indices=True)
    return values[ri, ci]


def grid_view(view: SourceView, stride: int):
    """Point map, colours and intrinsics on the stride-subsampled grid."""
    if stride < 1:
        raise InvalidInputError("stride must be at least 1")
    pm = view.points
    if pm.shape != view.image.shape[:2]:
        raise InvalidInputError("point map and image must share a resolution")
    sub = PointMap(pm.points[::stride, ::stride], pm.mask[::stride, ::stride])
    return sub, view.image[::stride, ::stride], view.intr.downsampled(stride)


def grid_teacher(view: SourceView, stride: int):
    t = view.teacher
    if t is None or t.shape != view.image.shape[:2]:
        return t
    return NormalField(t.normals[::stride, ::stride], t.mask[::stride, ::stride])


def init_view(view: SourceView, index: int, init: InitConfig = InitConfig(), step: int = 0,
              schedule: ScheduleConfig = ScheduleConfig()):
    """Seed one primitive per valid grid pixel of a view.

    Returns ``(TriangleSet, normal pipeline fields)``. Where no tangent frame
    exists (borders, holes) the nearest valid frame's quaternion is used.
    """
    pm, colors, intr = grid_view(view, init.stride)
    res = normal_pipeline(pm, grid_teacher(view, init.stride), step, schedule.bootstrap, init.smooth_window,
                          init.filter_window)
    frames = res["frames"]
    raw = RawAttributes.default(pm.shape, init.scale_logit, init.density_logit, init.blur_raw)
    raw.sh0 = color_to_sh0(colors)
    raw.quat = _fill_nearest(frames.quats, frames.mask)
    return assemble_scene(pm, frames, raw, view.pose, intr, index), res


@dataclass
class SceneBuild:
    scene: TriangleSet
    fields: list            # n_fwd NormalField per view, on the grid
    result: FitResult | None = None
    targets: list = field(default_factory=list)


def build_scene(views, init: InitConfig = InitConfig(), schedule: ScheduleConfig = ScheduleConfig()) -> SceneBuild:
    parts, fields_ = [], []
    for i, v in enumerate(views):
        tris, res = init_view(v, i, init, 0, schedule)
        parts.append(tris)
        fields_.append(res["fwd"])
    return SceneBuild(TriangleSet.concatenate(parts), fields_, None, [v.as_target() for v in views])


def fit_views(views, init: InitConfig = InitConfig(), cfg: FitConfig = FitConfig(),
              w: LossWeights = LossWeights(), callback=None) -> SceneBuild:
    """Seed primitives from every view and fit them to all target images."""
    build = build_scene(views, init, cfg.schedule)
    teachers = None
    if any(v.teacher is not None for v in views):
        teachers = []
        for v, f in zip(views, build.fields):
            t = grid_teacher(v, init.stride)
            teachers.append(None if t is None else _teacher_on_grid(t, f.shape))
    build.result = fit_scene(build.scene, build.targets, teachers, cfg, w, callback)
    build.scene = build.result.scene
    return build


def _teacher_on_grid(teacher: NormalField, shape):
    from .normals import resize_normals
    return teacher if teacher.shape == shape else resize_normals(teacher, *shape)


def export_build(build: SceneBuild, schedule: ScheduleConfig = ScheduleConfig(),
                 cfg: TriangleConfig = TriangleConfig()) -> Mesh:
    """Export with reference normals looked up at each source pixel."""
    refs = reference_normals(build.scene, build.fields)
    return export_mesh(build.scene, refs, schedule=schedule, cfg=cfg)
