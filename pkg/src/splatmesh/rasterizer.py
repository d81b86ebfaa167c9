"""Tile-binned soft triangle rasteriser with an analytic backward pass.

Each projected triangle contributes ``alpha = opacity * w(d)`` at a pixel,
where ``d`` is the signed distance (pixels, positive inside) from the pixel
centre to the projected triangle and ``w`` is a smoothstep window of
half-width ``band = kappa * blur``. Triangles are composited front to back
in order of mean vertex depth (ties by primitive id).
"""
from __future__ import annotations

import os

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import _kernels
from .errors import InvalidInputError
from .scene import CameraPose, Intrinsics, quat_to_matrix, quat_to_matrix_grad
from .triangles import (SH_C0, PrimitiveState, ScheduleState, TriangleConfig, TriangleSet, evaluate_primitives,
                        opacity_map_grad, temperature_sharpen_grad)


@dataclass(frozen=True)
class RenderConfig:
    tile: int = 16
    kappa: float = 3.0
    t_min: float = 1e-4
    near: float = 1e-4
    background: tuple = (0.0, 0.0, 0.0)
    threads: int = 1
    triangle: TriangleConfig = field(default_factory=TriangleConfig)


@dataclass
class ScreenTriangles:
    """Projected, visible primitives (structure of arrays)."""

    xy: np.ndarray          # (M, 3, 2) pixel coordinates
    vert_depth: np.ndarray  # (M, 3) camera depth per vertex
    color: np.ndarray
    opacity: np.ndarray
    band: np.ndarray        # pixels
    normal: np.ndarray      # world face normal
    ids: np.ndarray         # primitive index in the source TriangleSet
    width: int = 0
    height: int = 0
    # forward intermediates kept for the chain rule
    cam: np.ndarray = None  # (M, 3, 3) camera-frame vertices
    state: PrimitiveState = None
    pose: CameraPose = None
    intr: Intrinsics = None
    sched: ScheduleState = None
    kappa: float = 3.0

    def __len__(self):
        return len(self.ids)

    @cached_property
    def zkey(self) -> np.ndarray:
        return self.vert_depth.mean(axis=1)

    @cached_property
    def orient(self) -> np.ndarray:
        e1 = self.xy[:, 1] - self.xy[:, 0]
        e2 = self.xy[:, 2] - self.xy[:, 0]
        return np.sign(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @cached_property
    def bounds(self) -> np.ndarray:
        return self.bbox()

    def bbox(self) -> np.ndarray:
        """Band-expanded bounding boxes ``(xmin, xmax, ymin, ymax)``.

        Coverage is exactly zero outside the band, so no further margin is
        needed.
        """
        pad = self.band
        x, y = self.xy[:, :, 0], self.xy[:, :, 1]
        out = np.empty((len(pad), 4))
        out[:, 0] = np.minimum(np.minimum(x[:, 0], x[:, 1]), x[:, 2]) - pad
        out[:, 1] = np.maximum(np.maximum(x[:, 0], x[:, 1]), x[:, 2]) + pad
        out[:, 2] = np.minimum(np.minimum(y[:, 0], y[:, 1]), y[:, 2]) - pad
        out[:, 3] = np.maximum(np.maximum(y[:, 0], y[:, 1]), y[:, 2]) + pad
        return out


@dataclass
class TileBins:
    tile: int
    ntx: int
    nty: int
    offsets: np.ndarray     # (ntiles + 1,)
    indices: np.ndarray     # screen-triangle indices, sorted per tile

    def tile_list(self, t: int) -> np.ndarray:
        return self.indices[self.offsets[t]:self.offsets[t + 1]]


@dataclass
class RenderOutput:
    rgb: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    alpha: np.ndarray


@dataclass
class ScreenGradients:
    color: np.ndarray
    opacity: np.ndarray
    band: np.ndarray
    xy: np.ndarray


@dataclass
class GradientSet:
    """Gradients with respect to the raw attributes of a TriangleSet."""

    center: np.ndarray
    scale_logits: np.ndarray
    sh0: np.ndarray
    density_logit: np.ndarray
    blur_raw: np.ndarray
    depth: np.ndarray
    quat: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradientSet":
        z = np.zeros
        return cls(z((n, 3)), z((n, 3)), z((n, 3)), z(n), z(n), z(n), z((n, 4)))

    def __iadd__(self, other: "GradientSet"):
        for name in ("center", "scale_logits", "sh0", "density_logit", "blur_raw", "depth", "quat"):
            getattr(self, name).__iadd__(getattr(other, name))
        return self

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet(*(getattr(self, n) * factor for n in
                             ("center", "scale_logits", "sh0", "density_logit", "blur_raw", "depth", "quat")))


def project_triangles(tris: TriangleSet, pose: CameraPose, intr: Intrinsics, sched: ScheduleState,
                      cfg: RenderConfig = RenderConfig(), state: PrimitiveState | None = None) -> ScreenTriangles:
    """World vertices to pixel coordinates; cull near-plane crossers and degenerates.

    A triangle is dropped if any vertex lies in front of the near plane,
    if it is degenerate in 3D, or if its projection has zero area.
    """
    st = evaluate_primitives(tris, sched, cfg.triangle) if state is None else state
    R, t = pose.rotation, pose.translation
    cam = (st.vertices - t) @ R
    z = cam[..., 2]
    keep = np.all(z > cfg.near, axis=1) & ~st.degenerate
    safe_z = np.where(keep[:, None], z, 1.0)
    xy = np.stack([intr.fx * cam[..., 0] / safe_z + intr.cx, intr.fy * cam[..., 1] / safe_z + intr.cy], axis=-1)
    e1 = xy[:, 1] - xy[:, 0]
    e2 = xy[:, 2] - xy[:, 0]
    area2 = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    keep &= np.abs(area2) > 1e-12
    ids = np.nonzero(keep)[0]
    return ScreenTriangles(
        xy=np.ascontiguousarray(xy[ids]), vert_depth=z[ids], color=np.ascontiguousarray(st.color[ids]),
        opacity=np.ascontiguousarray(st.opacity[ids]), band=cfg.kappa * st.blur[ids],
        normal=np.ascontiguousarray(st.normal[ids]), ids=ids, width=intr.width, height=intr.height,
        cam=cam[ids], state=st, pose=pose, intr=intr, sched=sched, kappa=cfg.kappa,
    )


def bin_tiles(screen: ScreenTriangles, tile: int = 16) -> TileBins:
    """Assign triangles to every tile their band-expanded box touches."""
    if tile < 4:
        raise InvalidInputError("tile size must be at least 4")
    W, H = screen.width, screen.height
    ntx, nty = -(-W // tile), -(-H // tile)
    ntiles = ntx * nty
    if len(screen) == 0:
        return TileBins(tile, ntx, nty, np.zeros(ntiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64))
    bb = screen.bounds
    c0 = np.maximum(np.ceil(bb[:, 0]), 0)
    c1 = np.minimum(np.floor(bb[:, 1]), W - 1)
    r0 = np.maximum(np.ceil(bb[:, 2]), 0)
    r1 = np.minimum(np.floor(bb[:, 3]), H - 1)
    hit = (c0 <= c1) & (r0 <= r1)
    tx0 = np.where(hit, c0 // tile, 0).astype(np.int64)
    tx1 = np.where(hit, c1 // tile, -1).astype(np.int64)
    ty0 = np.where(hit, r0 // tile, 0).astype(np.int64)
    ty1 = np.where(hit, r1 // tile, -1).astype(np.int64)
    # depth order with ties broken by primitive id, then a stable pass by tile
    order = np.lexsort((screen.ids, screen.zkey))
    offsets, indices = _kernels.bin_entries(order, tx0, tx1, ty0, ty1, ntx, ntiles)
    return TileBins(tile, ntx, nty, offsets, indices)


def _kernel_args(bins: TileBins, screen: ScreenTriangles):
    return (bins.offsets, bins.indices, screen.xy, screen.orient.astype(np.float64), screen.bounds,
            screen.opacity, screen.band, screen.color)


def worker_count(threads: int) -> int:
    """Workers actually started for a ``threads`` cap: never more than the
    cores this process may run on (results do not depend on it)."""
    try:
        cores = len(os.sched_getaffinity(0))
    except AttributeError:
        cores = os.cpu_count() or 1
    return max(1, min(threads, cores))


def _run_tiles(fn, bins: TileBins, threads: int):
    ntiles = bins.ntx * bins.nty
    # heaviest tiles first, dealt round-robin into one chunk per requested thread
    work = np.argsort(-np.diff(bins.offsets), kind="stable")
    if threads <= 1 or ntiles < 2:
        fn(np.ascontiguousarray(np.sort(work)))
        return
    chunks = [np.ascontiguousarray(np.sort(work[i::threads])) for i in range(threads)]
    workers = worker_count(threads)
    if workers == 1:
        for c in chunks:
            fn(c)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(fn, chunks))


@dataclass
class ContributionRecords:
    """Per-tile log of (pixel, list entry, transmittance) from a forward pass.

    ``geometry`` keeps the coverage terms of each record (distance, segment
    parameter, boundary direction, window and its slope) and ``edge`` the
    closest edge, so the backward pass does not recompute them.
    """

    offsets: np.ndarray     # (ntiles + 1,) start of each tile's slice
    pixel: np.ndarray
    entry: np.ndarray
    transmittance: np.ndarray
    count: np.ndarray       # (ntiles,) records written per tile
    geometry: np.ndarray    # (total, 6): d, t, ux, uy, w, slope
    edge: np.ndarray
    buffers: "RecordBuffers | None" = None


class RecordBuffers:
    """Reusable storage for contribution records and per-entry gradients.

    Faulting in fresh pages for every render is a measurable cost, so a
    caller rendering the same view repeatedly can pass one instance to every
    :func:`render`. Records held in the buffers are only valid until the next
    render that uses them.
    """

    def __init__(self):
        self._rec = None
        self._grad = np.zeros((0, _kernels.N_GRAD))

    def records(self, total: int):
        if self._rec is None or len(self._rec[0]) < total:
            n = total + total // 4 + 1
            self._rec = (np.empty(n, dtype=np.int32), np.empty(n, dtype=np.int64), np.empty(n),
                         np.empty((n, 6)), np.empty(n, dtype=np.int8))
        return tuple(a[:total] for a in self._rec)

    def entries(self, n: int) -> np.ndarray:
        if len(self._grad) < n:
            self._grad = np.empty((n + n // 4 + 1, _kernels.N_GRAD))
        out = self._grad[:n]
        out.fill(0.0)
        return out


def _empty_records():
    return (np.zeros(1, dtype=np.int64), np.zeros(0, dtype=np.int32), np.zeros(0, dtype=np.int64),
            np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros((0, 6)), np.zeros(0, dtype=np.int8))


def composite_forward(bins: TileBins, screen: ScreenTriangles, background=(0.0, 0.0, 0.0),
                      t_min: float = 1e-4, threads: int = 1, record: bool = False,
                      buffers: RecordBuffers | None = None):
    """Front-to-back compositing of every pixel.

    Returns a :class:`RenderOutput`, or ``(RenderOutput, ContributionRecords)``
    when ``record`` is set. Records are written into ``buffers`` when given.
    """
    H, W = screen.height, screen.width
    rgb = np.empty((H, W, 3))
    depth = np.empty((H, W))
    nrm = np.empty((H, W, 3))
    alpha = np.empty((H, W))
    bg = np.asarray(background, dtype=np.float64)
    offsets, indices, xy, orient, bbox, opacity, band, color = _kernel_args(bins, screen)
    zkey = np.ascontiguousarray(screen.zkey)
    if record:
        rec_off = _kernels.record_bounds(offsets, indices, bbox, H, W, bins.tile, bins.ntx)
        total = int(rec_off[-1])
        if buffers is None:
            store = (np.empty(total, dtype=np.int32), np.empty(total, dtype=np.int64), np.empty(total),
                     np.empty((total, 6)), np.empty(total, dtype=np.int8))
        else:
            store = buffers.records(total)
        pixel, entry, trans, geo, edge = store
        rec = (rec_off, pixel, entry, trans, np.zeros(bins.ntx * bins.nty, dtype=np.int64), geo, edge)
    else:
        rec = _empty_records()

    def run(tiles):
        _kernels.forward_tiles(tiles, offsets, indices, xy, orient, bbox, opacity, band, color, zkey,
                               screen.normal, H, W, bins.tile, bins.ntx, bg, t_min, rgb, depth, nrm, alpha,
                               record, *rec)

    _run_tiles(run, bins, threads)
    out = RenderOutput(rgb, depth, nrm, alpha)
    return (out, ContributionRecords(*rec, buffers)) if record else out


def composite_backward(bins: TileBins, screen: ScreenTriangles, grad_rgb, grad_alpha=None,
                       background=(0.0, 0.0, 0.0), t_min: float = 1e-4, threads: int = 1,
                       records: ContributionRecords | None = None) -> ScreenGradients:
    """Adjoint of :func:`composite_forward` for upstream rgb/alpha gradients.

    Reuses the forward pass's contribution records when given, otherwise
    re-runs it. Per-tile partial gradients land in per-entry slots and are
    summed per triangle in fixed list order.
    """
    H, W = screen.height, screen.width
    if records is None:
        _, records = composite_forward(bins, screen, background, t_min, threads, record=True)
    g_rgb = np.ascontiguousarray(grad_rgb, dtype=np.float64)
    g_alpha = np.zeros((H, W)) if grad_alpha is None else np.ascontiguousarray(grad_alpha, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    offsets, indices, xy, orient, bbox, opacity, band, color = _kernel_args(bins, screen)
    if records.buffers is None:
        entries = np.zeros((len(indices), _kernels.N_GRAD))
    else:
        entries = records.buffers.entries(len(indices))
    rec = (records.offsets, records.pixel, records.entry, records.transmittance, records.count, records.geometry,
           records.edge)

    def run(tiles):
        _kernels.backward_tiles(tiles, indices, opacity, band, color, H, W, bins.tile, bins.ntx, bg,
                                g_rgb, g_alpha, *rec, entries)

    _run_tiles(run, bins, threads)
    M = len(screen)
    if M == 0:
        return ScreenGradients(np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros((0, 3, 2)))
    per = _kernels.reduce_entries(indices, entries, M)
    return ScreenGradients(per[:, 0:3], per[:, 3], per[:, 4], per[:, 5:11].reshape(M, 3, 2))


def backprop_to_primitives(screen: ScreenTriangles, sg: ScreenGradients, n: int, tris: TriangleSet,
                           cfg: RenderConfig = RenderConfig(), with_quat: bool = False) -> GradientSet:
    """Chain screen-space gradients back to the raw primitive attributes."""
    out = GradientSet.zeros(n)
    if len(screen) == 0:
        return out
    st, ids, intr = screen.state, screen.ids, screen.intr
    tcfg = cfg.triangle
    sched = screen.sched
    mapped = st.mapped[ids]
    d_sharp = temperature_sharpen_grad(mapped, sched.tau)
    d_map = opacity_map_grad(st.density[ids], sched.e)
    s_min, s_max = tcfg.scale_range
    g_v = np.empty((len(ids), 3, 3))
    _kernels.backprop_chain(
        ids, np.ascontiguousarray(sg.color), np.ascontiguousarray(sg.band), np.ascontiguousarray(sg.xy),
        np.ascontiguousarray(sg.opacity), np.ascontiguousarray(screen.cam), np.ascontiguousarray(screen.pose.rotation),
        float(intr.fx), float(intr.fy), st.rotation, np.ascontiguousarray(tcfg.template), st.boost, st.base_scales,
        tris.scale_logits, tris.depth, tris.footprint, st.mapped, st.sharpened, st.density, tris.sh0, tris.blur_raw,
        d_sharp, d_map, SH_C0, float(screen.kappa), float(sched.beta), bool(sched.floor_active),
        float(tcfg.alpha_floor), bool(tcfg.coverage_boost), float(tcfg.coverage_threshold),
        float(tcfg.coverage_gain), float(s_min), float(s_max),
        out.center, out.scale_logits, out.depth, out.density_logit, out.sh0, out.blur_raw, g_v)
    if with_quat:
        local = tcfg.template[None] * st.scales[ids][:, None, :]
        g_M = np.einsum("nki,nkj->nij", g_v, local)
        Rc = quat_to_matrix(tris.cam_quat[ids])
        g_Rn = np.einsum("nji,njk->nik", Rc, g_M)
        out.quat[ids] = quat_to_matrix_grad(tris.quat[ids], g_Rn)
    return out


@dataclass
class RenderContext:
    screen: ScreenTriangles
    bins: TileBins
    tris: TriangleSet
    cfg: RenderConfig
    records: ContributionRecords | None = None


def render(tris: TriangleSet, pose: CameraPose, intr: Intrinsics, sched: ScheduleState,
           cfg: RenderConfig = RenderConfig(), state: PrimitiveState | None = None, record: bool = True,
           buffers: RecordBuffers | None = None):
    """Project, bin and composite; returns ``(RenderOutput, RenderContext)``.

    ``state`` may carry a precomputed :func:`evaluate_primitives` result for
    the same primitives and schedule (it is view-independent). ``record``
    keeps the forward contributions for a later :func:`render_backward`,
    stored in ``buffers`` when given (see :class:`RecordBuffers`).
    """
    screen = project_triangles(tris, pose, intr, sched, cfg, state)
    bins = bin_tiles(screen, cfg.tile)
    res = composite_forward(bins, screen, cfg.background, cfg.t_min, cfg.threads, record, buffers)
    out, records = res if record else (res, None)
    return out, RenderContext(screen, bins, tris, cfg, records)


def render_backward(ctx: RenderContext, grad_rgb, grad_alpha=None, with_quat: bool = False) -> GradientSet:
    cfg = ctx.cfg
    sg = composite_backward(ctx.bins, ctx.screen, grad_rgb, grad_alpha, cfg.background, cfg.t_min, cfg.threads,
                            ctx.records)
    return backprop_to_primitives(ctx.screen, sg, len(ctx.tris), ctx.tris, cfg, with_quat)


# -- reference hard rasteriser ------------------------------------------------

def rasterize_mesh_hard(vertices, faces, face_colors, pose: CameraPose, intr: Intrinsics,
                        background=(0.0, 0.0, 0.0), near: float = 1e-4):
    """Z-buffered hard rasterisation of an indexed mesh with flat face colours.

    Samples pixel centres, treats edges inclusively and interpolates depth
    perspective-correctly. Faces crossing the near plane are skipped.
    Returns ``(rgb, depth, coverage)``.
    """
    H, W = intr.height, intr.width
    rgb = np.tile(np.asarray(background, dtype=np.float64), (H, W, 1))
    zbuf = np.full((H, W), np.inf)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return rgb, np.zeros((H, W)), np.zeros((H, W), dtype=bool)
    cam = (np.asarray(vertices, dtype=np.float64) - pose.translation) @ pose.rotation
    colors = np.asarray(face_colors, dtype=np.float64)
    for f, (i, j, k) in enumerate(faces):
        P = cam[[i, j, k]]
        if np.any(P[:, 2] <= near):
            continue
        u = intr.fx * P[:, 0] / P[:, 2] + intr.cx
        v = intr.fy * P[:, 1] / P[:, 2] + intr.cy
        area = (u[1] - u[0]) * (v[2] - v[0]) - (v[1] - v[0]) * (u[2] - u[0])
        if area == 0.0:
            continue
        c0, c1 = max(0, int(np.ceil(u.min()))), min(W - 1, int(np.floor(u.max())))
        r0, r1 = max(0, int(np.ceil(v.min()))), min(H - 1, int(np.floor(v.max())))
        if c0 > c1 or r0 > r1:
            continue
        rr, cc = np.meshgrid(np.arange(r0, r1 + 1, dtype=np.float64), np.arange(c0, c1 + 1, dtype=np.float64),
                             indexing="ij")
        w0 = ((u[1] - cc) * (v[2] - rr) - (v[1] - rr) * (u[2] - cc)) / area
        w1 = ((u[2] - cc) * (v[0] - rr) - (v[2] - rr) * (u[0] - cc)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        inv_z = w0 / P[0, 2] + w1 / P[1, 2] + w2 / P[2, 2]
        zz = np.where(inside, 1.0 / np.where(inside, inv_z, 1.0), np.inf)
        sub = zbuf[r0:r1 + 1, c0:c1 + 1]
        closer = zz < sub
        sub[closer] = zz[closer]
        rgb[r0:r1 + 1, c0:c1 + 1][closer] = colors[f]
    cover = np.isfinite(zbuf)
    return rgb, np.where(cover, zbuf, 0.0), cover


def boundary_distance(vertices, faces, pose: CameraPose, intr: Intrinsics, near: float = 1e-4) -> np.ndarray:
    """Per-pixel distance (pixels) to the nearest projected mesh edge."""
    H, W = intr.height, intr.width
    rows, cols = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    best = np.full((H, W), np.inf)
    cam = (np.asarray(vertices, dtype=np.float64) - pose.translation) @ pose.rotation
    for tri in np.asarray(faces, dtype=np.int64).reshape(-1, 3):
        P = cam[tri]
        if np.any(P[:, 2] <= near):
            continue
        uv = np.stack([intr.fx * P[:, 0] / P[:, 2] + intr.cx, intr.fy * P[:, 1] / P[:, 2] + intr.cy], axis=1)
        for e in range(3):
            a, b = uv[e], uv[(e + 1) % 3]
            ab = b - a
            denom = ab @ ab
            t = np.clip(((cols - a[0]) * ab[0] + (rows - a[1]) * ab[1]) / denom, 0, 1) if denom > 0 else 0.0
            dx = cols - (a[0] + t * ab[0])
            dy = rows - (a[1] + t * ab[1])
            best = np.minimum(best, np.sqrt(dx * dx + dy * dy))
    return best
