"""Bundled synthetic scenes with known answers.

``gradcheck_scene`` is the small random soft scene used by the gradient
harness, ``sharpened_scene`` a crisp layered scene for export fidelity and
``two_plane_scene`` a textured floor-and-wall setup with analytic geometry
for end-to-end fits.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation
from scipy.special import logit

from .normals import NormalField
from .pipeline import SourceView
from .scene import CameraPose, Intrinsics, PointMap, look_at, matrix_to_quat, pixel_grid
from .triangles import ScheduleState, TriangleSet, color_to_sh0


def gradcheck_scene(seed: int = 0, n: int = 200, size: int = 64):
    """200 random soft triangles in front of an identity camera.

    Returns ``(tris, pose, intr, sched)``. The schedule sits mid-ramp so
    every opacity stage has a non-trivial derivative.
    """
    rng = np.random.default_rng(seed)
    intr = Intrinsics(size, size, size / 2, size / 2, size, size)
    c = np.stack([rng.uniform(-1, 1, n), rng.uniform(-1, 1, n), rng.uniform(2.5, 4.0, n)], axis=1)
    q = matrix_to_quat(Rotation.random(n, random_state=seed + 1).as_matrix())
    tris = TriangleSet(center=c, scale_logits=rng.normal(-3, 0.5, (n, 3)), quat=q,
                       cam_quat=np.tile([1.0, 0, 0, 0], (n, 1)), sh0=rng.normal(0, 1, (n, 3)),
                       density_logit=rng.normal(0, 1, n), blur_raw=rng.normal(0, 1, n), depth=c[:, 2],
                       footprint=np.tile(intr.footprint(), (n, 1)), source=np.zeros((n, 3)))
    sched = ScheduleState(0, 1.3, 1.5, 1.0, 1.0, True)
    return tris, CameraPose.identity(), intr, sched


def sharpened_scene(seed: int = 0, size: int = 128, band_px: float = 0.05, layers=(2.0, 3.0, 4.0),
                    grid: int = 4, kappa: float = 3.0, beta: float = 0.5, eps: float = 1e-4):
    """Fronto-parallel layers of non-overlapping crisp triangles.

    Each layer is a jittered ``grid x grid`` arrangement with random in-plane
    rotations; a third of the primitives carry a strongly negative density
    logit and vanish after sharpening. Blur is set so the coverage band is
    ``band_px`` pixels wide. Returns ``(tris, pose, intr)``.
    """
    rng = np.random.default_rng(seed)
    intr = Intrinsics(size, size, (size - 1) / 2, (size - 1) / 2, size, size)
    cell = size / grid
    rows = []
    for li, z in enumerate(layers):
        for gy in range(grid):
            for gx in range(grid):
                u = (gx + 0.5) * cell + rng.uniform(-0.1, 0.1) * cell + li * cell / 3
                v = (gy + 0.5) * cell + rng.uniform(-0.1, 0.1) * cell + li * cell / 5
                rows.append((u % size, v % size, z))
    n = len(rows)
    uvz = np.array(rows)
    x = (uvz[:, 0] - intr.cx) / intr.fx * uvz[:, 2]
    y = (uvz[:, 1] - intr.cy) / intr.fy * uvz[:, 2]
    center = np.stack([x, y, uvz[:, 2]], axis=1)
    # template circumradius is 4 * 0.577 * s pixels; keep it inside a cell
    s = rng.uniform(0.12, 0.18, n) * cell
    lo, hi = 0.5, 18.0
    scale_logits = np.repeat(logit((s - lo) / (hi - lo))[:, None], 3, axis=1)
    ang = rng.uniform(0, 2 * np.pi, n)
    quat = np.stack([np.cos(ang / 2), np.zeros(n), np.zeros(n), np.sin(ang / 2)], axis=1)
    density = np.where(rng.random(n) < 1 / 3, -12.0, 12.0)
    blur = band_px / kappa
    blur_raw = np.full(n, float(logit((blur - eps) / beta)))
    tris = TriangleSet(center=center, scale_logits=scale_logits, quat=quat, cam_quat=np.tile([1.0, 0, 0, 0], (n, 1)),
                       sh0=color_to_sh0(rng.uniform(0.05, 0.95, (n, 3))), density_logit=density, blur_raw=blur_raw,
                       depth=center[:, 2], footprint=np.tile(intr.footprint(), (n, 1)),
                       source=np.stack([np.zeros(n), np.arange(n), np.zeros(n)], axis=1))
    return tris, CameraPose.identity(), intr


# -- textured floor and wall ------------------------------------------------------

WALL_Z = 0.6


def _texture(a, b, phase):
    r = 0.5 + 0.25 * np.sin(2 * np.pi * (0.8 * a + 0.3 * b) + 0.3 + phase)
    g = 0.5 + 0.25 * np.sin(2 * np.pi * (0.4 * a - 0.9 * b) + 1.1 + 2 * phase)
    bl = 0.5 + 0.2 * np.cos(2 * np.pi * (0.6 * a + 0.6 * b) + 3 * phase)
    return np.stack([r, g, bl], axis=-1)


def surface_color(points, on_wall):
    """Texture colour of world points on the floor (y = 0) or wall (z = WALL_Z)."""
    p = np.asarray(points, dtype=np.float64)
    floor = _texture(p[..., 0], p[..., 2], 0.0)
    wall = _texture(p[..., 0], p[..., 1], 1.7)
    return np.where(np.asarray(on_wall)[..., None], wall, floor)


def cast_rays(pose: CameraPose, intr: Intrinsics):
    """Analytic ray cast against the floor and wall.

    Returns camera-frame points, world points, a wall flag and world normals
    for every pixel (every ray of the bundled cameras hits a plane).
    """
    rows, cols = pixel_grid(intr.height, intr.width)
    d_cam = np.stack([(cols - intr.cx) / intr.fx, (rows - intr.cy) / intr.fy, np.ones_like(rows)], axis=-1)
    d = d_cam @ pose.rotation.T
    o = pose.translation
    with np.errstate(divide="ignore", invalid="ignore"):
        t_floor = np.where(d[..., 1] > 0, (0.0 - o[1]) / d[..., 1], np.inf)
        t_wall = np.where(d[..., 2] > 0, (WALL_Z - o[2]) / d[..., 2], np.inf)
    # the floor ends at the wall and the wall ends at the floor
    pf = o + t_floor[..., None] * d
    pw = o + t_wall[..., None] * d
    t_floor = np.where(pf[..., 2] <= WALL_Z, t_floor, np.inf)
    t_wall = np.where(pw[..., 1] <= 0.0, t_wall, np.inf)
    on_wall = t_wall < t_floor
    t = np.minimum(t_floor, t_wall)
    if not np.all(np.isfinite(t)):
        raise ValueError("camera sees past the floor and wall")
    world = o + t[..., None] * d
    cam = d_cam * t[..., None]
    normal = np.where(on_wall[..., None], np.array([0.0, 0.0, -1.0]), np.array([0.0, -1.0, 0.0]))
    return cam, world, on_wall, normal


@dataclass
class TwoPlaneScene:
    train: list             # SourceView with noised point maps
    held_out: SourceView    # noise-free, for evaluation only
    gt_points: np.ndarray   # noise-free surface points of the training views
    extent: float
    sigma: float


def two_plane_cameras(n_views: int = 6, radius: float = 1.5, elevation_deg: float = 35.0,
                      spread_deg: float = 20.0):
    """Training camera poses on an arc plus the held-out centre pose."""
    target = np.array([0.0, -0.3, 0.3])
    el = np.radians(elevation_deg)

    def pose_at(az):
        az = np.radians(az)
        eye = target + radius * np.array([np.sin(az) * np.cos(el), -np.sin(el), -np.cos(az) * np.cos(el)])
        return look_at(eye, target)

    az = np.linspace(-spread_deg, spread_deg, n_views)
    return [pose_at(a) for a in az], pose_at(0.5 * (az[n_views // 2 - 1] + az[n_views // 2]) if n_views > 1 else 0.0)


def render_two_plane(pose: CameraPose, intr: Intrinsics):
    """Ground-truth image, point map and normal field for one camera."""
    cam, world, on_wall, normal = cast_rays(pose, intr)
    image = surface_color(world, on_wall)
    mask = np.ones(cam.shape[:2], dtype=bool)
    n_cam = normal @ pose.rotation
    return image, PointMap(cam, mask), NormalField(n_cam, mask), world


def two_plane_scene(n_views: int = 6, size: int = 128, noise_frac: float = 0.01, seed: int = 0,
                    focal: float = 200.0) -> TwoPlaneScene:
    """Six noisy training views and a noise-free held-out view.

    Position noise is isotropic Gaussian with standard deviation
    ``noise_frac`` times the scene extent (bounding-box diagonal of the
    visible surface).
    """
    intr = Intrinsics(focal, focal, (size - 1) / 2, (size - 1) / 2, size, size)
    poses, held = two_plane_cameras(n_views)
    clean = [render_two_plane(p, intr) for p in poses]
    gt = np.concatenate([c[3].reshape(-1, 3) for c in clean])
    extent = float(np.linalg.norm(gt.max(axis=0) - gt.min(axis=0)))
    sigma = noise_frac * extent
    rng = np.random.default_rng(seed)
    train = []
    for i, (p, (img, pm, _, _)) in enumerate(zip(poses, clean)):
        noisy = pm.points + rng.normal(0.0, sigma, pm.points.shape)
        noisy[..., 2] = np.maximum(noisy[..., 2], 1e-3)
        train.append(SourceView(img, p, intr, PointMap(noisy, pm.mask), None, f"train{i}"))
    img, pm, nf, _ = render_two_plane(held, intr)
    return TwoPlaneScene(train, SourceView(img, held, intr, pm, nf, "held_out"), gt, extent, sigma)


# -- end-to-end desk fit ----------------------------------------------------------

DESK_CENTER_LR = 1e-4


@dataclass
class DeskFitResult:
    psnr: float
    report: object          # EvalReport of the exported mesh
    seconds: float
    faces: int
    primitives: int
    history: list


def desk_fit_config(steps: int = 2000, threads: int = 1):
    """Initialisation and fit settings of the two-plane desk run.

    Schedules are compressed so that every ramp keeps its proportion of a
    20,000-step run; centres use a reduced learning rate (see
    ``DESK_CENTER_LR``) because smooth textures constrain depth only weakly.
    """
    from .fit import DEFAULT_LR, FitConfig
    from .pipeline import InitConfig
    from .rasterizer import RenderConfig
    from .triangles import ScheduleConfig

    lr = dict(DEFAULT_LR)
    lr["center"] = DESK_CENTER_LR
    schedule = ScheduleConfig().rescaled(steps / 20000)
    return InitConfig(stride=4), FitConfig(steps=steps, lr=lr, schedule=schedule, render=RenderConfig(threads=threads))


def run_desk_fit(steps: int = 2000, seed: int = 0, threads: int = 1, callback=None) -> DeskFitResult:
    """Fit the two-plane scene and score the held-out view and the mesh."""
    import time

    from .evaluation import chamfer_report, psnr
    from .pipeline import export_build, fit_views
    from .rasterizer import render

    t0 = time.perf_counter()
    scene = two_plane_scene(seed=seed)
    init, cfg = desk_fit_config(steps, threads)
    build = fit_views(scene.train, init, cfg, callback=callback)
    h = scene.held_out
    out, _ = render(build.scene, h.pose, h.intr, ScheduleState.final(cfg.schedule), cfg.render, record=False)
    mesh = export_build(build, cfg.schedule)
    report = chamfer_report(mesh, scene.gt_points, seed=seed)
    return DeskFitResult(psnr(out.rgb, h.image), report, time.perf_counter() - t0, len(mesh.faces),
                         len(build.scene), build.result.history)


# -- primitive to mesh fidelity -----------------------------------------------------

@dataclass
class FidelityResult:
    psnr: float
    max_interior_diff: float   # largest |soft - hard| farther than 1 px from any edge
    differing: int             # pixels with any channel differing by more than tol
    faces: int
    seconds: float


def fidelity_check(seed: int = 0, size: int = 128, tol: float = 1e-6, margin: float = 1.0) -> FidelityResult:
    """Soft render of a fully sharpened scene against a hard render of its mesh."""
    import time

    from .evaluation import psnr
    from .mesh import export_mesh
    from .rasterizer import boundary_distance, rasterize_mesh_hard, render

    t0 = time.perf_counter()
    tris, pose, intr = sharpened_scene(seed, size)
    soft, _ = render(tris, pose, intr, ScheduleState.final(), record=False)
    mesh = export_mesh(tris)
    hard, _, _ = rasterize_mesh_hard(mesh.vertices, mesh.faces, mesh.colors, pose, intr)
    diff = np.abs(soft.rgb - hard).max(axis=-1)
    near_edge = boundary_distance(mesh.vertices, mesh.faces, pose, intr) <= margin
    interior = diff[~near_edge]
    return FidelityResult(psnr(soft.rgb, hard), float(interior.max()) if interior.size else 0.0,
                          int((diff > tol).sum()), len(mesh.faces), time.perf_counter() - t0)
