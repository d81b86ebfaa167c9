"""Soft triangle primitives fitted to posed images and exported as meshes.

Primitives are seeded from per-view point maps, oriented by tangent frames
derived from surface normals, rendered by a tile-binned soft rasteriser
with analytic gradients and, once sharpened, written out directly as a
coloured triangle mesh.
"""
from .errors import DegenerateInputError, FitDivergedError, InvalidInputError, ParseError
from .evaluation import EvalReport, KDTree, chamfer_report
from .fit import FitConfig, LossWeights, fit_scene
from .mesh import Mesh, export_mesh, read_mesh, write_mesh
from .normals import NormalField, normal_pipeline
from .rasterizer import RenderConfig, render, render_backward
from .scene import CameraPose, Intrinsics, PointMap
from .triangles import ScheduleConfig, ScheduleState, TriangleSet, schedule_state

__version__ = "0.1.0"

__all__ = ["CameraPose", "DegenerateInputError", "EvalReport", "FitConfig", "FitDivergedError", "Intrinsics",
           "InvalidInputError", "KDTree", "LossWeights", "Mesh", "NormalField", "ParseError", "PointMap",
           "RenderConfig", "ScheduleConfig", "ScheduleState", "TriangleSet", "chamfer_report", "export_mesh",
           "fit_scene", "normal_pipeline", "read_mesh", "render", "render_backward", "schedule_state",
           "write_mesh"]
