"""Per-scene optimisation of triangle attributes against target views."""
from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FitDivergedError, InvalidInputError
from .normals import FlaggedLoss, NormalField, normal_pipeline
from .rasterizer import GradientSet, RecordBuffers, RenderConfig, render, render_backward, worker_count
from .scene import (CameraPose, Intrinsics, PointMap, quat_to_matrix, quat_to_matrix_grad, raw_from_point,
                    relative_pose, rotation_angle, unproject_point, matrix_to_quat)
from .triangles import ScheduleConfig, TriangleSet, evaluate_primitives, schedule_state

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    lambda_photo: float = 1.0
    lambda_mse: float = 1.0
    lambda_normal: float = 0.1
    lambda_cam: float = 0.0
    omega_t: float = 1.0
    omega_r: float = 1.0
    huber_delta: float = 0.1

    def __post_init__(self):
        vals = [self.lambda_photo, self.lambda_mse, self.lambda_normal, self.lambda_cam, self.omega_t, self.omega_r]
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise InvalidInputError("loss weights must be finite and non-negative")
        if not self.huber_delta > 0:
            raise InvalidInputError("huber_delta must be positive")


DEFAULT_LR = {"center": 1e-3, "scale_logits": 5e-3, "sh0": 1e-2, "density_logit": 1e-2, "blur_raw": 1e-2,
              "quat": 1e-3}


@dataclass(frozen=True)
class FitConfig:
    steps: int = 2000
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    filter_total: float = 0.2
    filter_mse: float = 0.06
    filter_pose: float = 1.0
    # None: 10% of ``steps``
    filter_start: int | None = None
    filter_scale: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    optimize_rotations: bool = False
    # re-derive tangent frames once some centre has moved this far; None disables
    reframe_displacement: float | None = None
    smooth_window: int = 3
    filter_window: int = 3
    log_every: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise InvalidInputError("steps must be non-negative")
        if any(v <= 0 for v in self.lr.values()):
            raise InvalidInputError("learning rates must be positive")

    @property
    def filter_activation(self) -> int:
        return int(0.1 * self.steps) if self.filter_start is None else self.filter_start


@dataclass
class View:
    image: np.ndarray
    pose: CameraPose
    intr: Intrinsics
    name: str = ""


# -- losses -------------------------------------------------------------------

def photometric_loss(rendered, target) -> float:
    """Mean squared error over all pixels and channels."""
    a = np.asarray(rendered, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError("image shapes differ")
    return float(np.mean((a - b) ** 2))


def huber(x, delta):
    x = np.abs(np.asarray(x, dtype=np.float64))
    return np.where(x <= delta, 0.5 * x * x, delta * (x - 0.5 * delta))


def camera_pair_loss(pred, gt, w: LossWeights = LossWeights()) -> FlaggedLoss:
    """Huber translation + geodesic rotation error summed over ordered pairs."""
    pred, gt = list(pred), list(gt)
    if len(pred) != len(gt):
        raise InvalidInputError("pose sequences differ in length")
    if len(pred) < 2:
        return FlaggedLoss(0.0, True)
    total = 0.0
    for i, j in itertools.permutations(range(len(pred)), 2):
        rp = relative_pose(pred[i], pred[j])
        rg = relative_pose(gt[i], gt[j])
        dt = np.linalg.norm(rp.translation - rg.translation)
        total += w.omega_t * float(huber(dt, w.huber_delta)) + w.omega_r * rotation_angle(rp.rotation.T @ rg.rotation)
    return FlaggedLoss(total, False)


def total_loss(photo: float, cam: float, normal: float, w: LossWeights = LossWeights()) -> float:
    parts = (photo, cam, normal)
    if not all(np.isfinite(p) for p in parts):
        raise InvalidInputError("loss parts must be finite")
    return w.lambda_photo * photo + w.lambda_cam * cam + w.lambda_normal * normal


def large_loss_filter(total: float, mse: float, pose: float, t: int, cfg: FitConfig = FitConfig()) -> float:
    """Scale factor applied to the step's loss once the warm-up is over."""
    if t < cfg.filter_activation:
        return 1.0
    if total > cfg.filter_total or mse > cfg.filter_mse or pose > cfg.filter_pose:
        return cfg.filter_scale
    return 1.0


def primitive_normal_loss(tris: TriangleSet, teachers, with_grad: bool = False):
    """Cosine loss between each primitive's normal and the teacher at its source pixel.

    Normals are compared in the source camera frame. Returns
    ``(FlaggedLoss, grad_quat)``; the gradient is ``None`` unless requested.
    """
    n = len(tris)
    cos = np.zeros(n)
    valid = np.zeros(n, dtype=bool)
    R = quat_to_matrix(tris.quat)
    normals = R[:, :, 2]
    tch = np.zeros((n, 3))
    if teachers is not None:
        for v, nf in enumerate(teachers):
            if nf is None:
                continue
            sel = np.nonzero(tris.source[:, 0] == v)[0]
            r, c = tris.source[sel, 1], tris.source[sel, 2]
            H, W = nf.shape
            inb = (r >= 0) & (r < H) & (c >= 0) & (c < W)
            sel, r, c = sel[inb], r[inb], c[inb]
            ok = nf.mask[r, c]
            sel, r, c = sel[ok], r[ok], c[ok]
            tch[sel] = nf.normals[r, c]
            valid[sel] = True
    if not valid.any():
        return FlaggedLoss(0.0, True), (np.zeros((n, 4)) if with_grad else None)
    cos = np.sum(normals * tch, axis=1)
    value = float(np.mean(1.0 - cos[valid]))
    grad = None
    if with_grad:
        gR = np.zeros((n, 3, 3))
        gR[valid, :, 2] = -tch[valid] / valid.sum()
        grad = quat_to_matrix_grad(tris.quat, gR)
    return FlaggedLoss(value, False), grad


# -- optimiser ----------------------------------------------------------------

class Adam:
    """Adaptive moment estimation over a dict of parameter arrays."""

    def __init__(self, lr: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr[k] * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


# -- centre parameterisation ---------------------------------------------------

class _Centers:
    """Centres as log-depth camera-frame offsets of their source view.

    Falls back to raw world coordinates when a primitive's source view is
    not among the fitted views.
    """

    def __init__(self, tris: TriangleSet, views):
        self.view = tris.source[:, 0]
        nv = len(views)
        self.log_depth = bool(len(tris)) and np.all((self.view >= 0) & (self.view < nv))
        if self.log_depth:
            self.R = np.stack([views[v].pose.rotation for v in range(nv)])[self.view]
            self.t = np.stack([views[v].pose.translation for v in range(nv)])[self.view]
            cam = np.einsum("nji,nj->ni", self.R, tris.center - self.t)
            self.initial = raw_from_point(cam)
        else:
            self.initial = tris.center.copy()

    def apply(self, raw, tris: TriangleSet):
        if self.log_depth:
            p = unproject_point(raw)
            tris.center = np.einsum("nij,nj->ni", self.R, p) + self.t
            tris.depth = p[:, 2]
        else:
            tris.center = raw.copy()

    def grad(self, raw, g: GradientSet):
        if not self.log_depth:
            return g.center
        p = unproject_point(raw)
        z = p[:, 2]
        g_p = np.einsum("nij,ni->nj", self.R, g.center)
        return np.stack([z * g_p[:, 0], z * g_p[:, 1], np.sum(p * g_p, axis=1) + z * g.depth], axis=1)


@dataclass
class FitResult:
    scene: TriangleSet
    history: list           # dicts: step, total, mse, normal, cam, filter_scale
    reframes: int = 0


def _refresh_frames(tris: TriangleSet, views, teachers, t, cfg: FitConfig):
    """Rebuild per-view point maps from current centres and re-derive frames."""
    for v, view in enumerate(views):
        sel = np.nonzero(tris.source[:, 0] == v)[0]
        if len(sel) == 0:
            continue
        r, c = tris.source[sel, 1], tris.source[sel, 2]
        H, W = r.max() + 1, c.max() + 1
        if H < 3 or W < 3:
            continue
        pts = np.zeros((H, W, 3))
        pts[..., 2] = 1.0
        mask = np.zeros((H, W), dtype=bool)
        cam = (tris.center[sel] - view.pose.translation) @ view.pose.rotation
        good = cam[:, 2] > 0
        pts[r[good], c[good]] = cam[good]
        mask[r[good], c[good]] = True
        teacher = teachers[v] if teachers is not None and v < len(teachers) else None
        if teacher is not None and teacher.shape != (H, W):
            teacher = None
        res = normal_pipeline(PointMap(pts, mask), teacher, t, cfg.schedule.bootstrap, cfg.smooth_window,
                              cfg.filter_window)
        fr = res["frames"]
        ok = fr.mask[r, c]
        tris.quat[sel[ok]] = fr.quats[r[ok], c[ok]]
        tris.fallback[sel] = ~ok


class SceneObjective:
    """The per-step fitting objective over a parameter dict.

    ``evaluate`` writes the parameters into the working TriangleSet, renders
    every view in order and returns the loss parts together with gradients
    for each optimised group (before the large-loss filter).
    """

    def __init__(self, tris: TriangleSet, views, teachers=None, cfg: FitConfig = FitConfig(),
                 w: LossWeights = LossWeights()):
        self.tris = tris
        self.views = views
        self.teachers = teachers
        self.cfg = cfg
        self.w = w
        self.centers = _Centers(tris, views)
        # one record store per view, reused every step
        self.buffers = [RecordBuffers() for _ in views]

    def initial_params(self) -> dict:
        p = {"center": self.centers.initial.copy(), "scale_logits": self.tris.scale_logits.copy(),
             "sh0": self.tris.sh0.copy(), "density_logit": self.tris.density_logit.copy(),
             "blur_raw": self.tris.blur_raw.copy()}
        if self.cfg.optimize_rotations:
            p["quat"] = self.tris.quat.copy()
        return p

    def apply(self, params: dict):
        tris = self.tris
        self.centers.apply(params["center"], tris)
        tris.scale_logits = params["scale_logits"]
        tris.sh0 = params["sh0"]
        tris.density_logit = params["density_logit"]
        tris.blur_raw = params["blur_raw"]
        if "quat" in params:
            tris.quat = params["quat"]

    def evaluate(self, params: dict, t: int, with_grad: bool = True):
        cfg, w, tris = self.cfg, self.w, self.tris
        self.apply(params)
        sched = schedule_state(t, cfg.schedule)
        rot = "quat" in params
        grads = GradientSet.zeros(len(tris))
        V = len(self.views)
        mse_sum = 0.0
        state = evaluate_primitives(tris, sched, cfg.render.triangle)

        def one_view(v, rcfg):
            view = self.views[v]
            out, ctx = render(tris, view.pose, view.intr, sched, rcfg, state, record=with_grad,
                              buffers=self.buffers[v])
            diff = out.rgb - view.image
            g = None
            if with_grad:
                scale = w.lambda_photo * w.lambda_mse * 2.0 / (V * diff.size)
                g = render_backward(ctx, diff * scale, with_quat=rot)
            return float(np.mean(diff * diff)), g

        if cfg.render.threads > 1 and V > 1:
            # one view per worker; results are reduced below in view order
            rcfg = replace(cfg.render, threads=1)
            workers = min(worker_count(cfg.render.threads), V)
            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    results = list(pool.map(lambda v: one_view(v, rcfg), range(V)))
            else:
                results = [one_view(v, rcfg) for v in range(V)]
        else:
            results = [one_view(v, cfg.render) for v in range(V)]
        for m, g in results:
            mse_sum += m
            if g is not None:
                grads += g
        mse = mse_sum / V
        nl, g_quat = primitive_normal_loss(tris, self.teachers, with_grad=rot and with_grad)
        parts = {"mse": mse, "photo": w.lambda_mse * mse, "normal": nl.value, "cam": 0.0}
        if not all(np.isfinite(v) for v in parts.values()):
            return parts, None
        parts["total"] = total_loss(parts["photo"], parts["cam"], parts["normal"], w)
        if not with_grad:
            return parts, None
        g = {"center": self.centers.grad(params["center"], grads), "scale_logits": grads.scale_logits,
             "sh0": grads.sh0, "density_logit": grads.density_logit, "blur_raw": grads.blur_raw}
        if rot:
            g["quat"] = grads.quat + w.lambda_normal * g_quat
        return parts, g


def fit_scene(scene: TriangleSet, views, teachers=None, cfg: FitConfig = FitConfig(),
              w: LossWeights = LossWeights(), callback=None) -> FitResult:
    """Optimise a TriangleSet against target views with Adam.

    Every step renders all views, accumulates their gradients in view order
    and applies one update. Rotations stay at their geometric values unless
    ``cfg.optimize_rotations`` is set.
    """
    if len(views) == 0:
        raise InvalidInputError("at least one target view is required")
    tris = scene.copy()
    history = []
    if cfg.steps == 0 or len(tris) == 0:
        return FitResult(tris, history)
    obj = SceneObjective(tris, views, teachers, cfg, w)
    params = obj.initial_params()
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    anchor = tris.center.copy()
    reframes = 0
    for t in range(cfg.steps):
        last_good = tris.copy()
        parts, g = obj.evaluate(params, t)
        if g is None:
            raise FitDivergedError(f"non-finite loss at step {t}", {"step": t, **parts, "scene": last_good})
        factor = large_loss_filter(parts["total"], parts["mse"], parts["cam"], t, cfg)
        history.append({"step": t, "total": parts["total"] * factor, "mse": parts["mse"],
                        "normal": parts["normal"], "cam": parts["cam"], "filter_scale": factor})
        if cfg.log_every and t % cfg.log_every == 0:
            log.info("step %d total %.6f mse %.6f scale %g", t, parts["total"], parts["mse"], factor)
        opt.step(params, {k: v * factor for k, v in g.items()})
        if "quat" in params:
            params["quat"] /= np.linalg.norm(params["quat"], axis=1, keepdims=True)
        obj.apply(params)
        if cfg.reframe_displacement is not None and "quat" not in params:
            if np.max(np.linalg.norm(tris.center - anchor, axis=1)) > cfg.reframe_displacement:
                _refresh_frames(tris, views, teachers, t, cfg)
                anchor = tris.center.copy()
                reframes += 1
        if callback is not None:
            callback(t, tris, history[-1])
    return FitResult(tris.copy(), history, reframes)
