"""Surface scoring: Chamfer distance and precision/recall/F1 at a threshold.

Nearest-neighbour queries go through :class:`KDTree`, an exact k-d tree
with axis-median splits. Also hosts the image, depth and normal metrics
used by the ``compare`` command.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from numba import njit

from .errors import DegenerateInputError, InvalidInputError
from .mesh import Mesh

LEAF_SIZE = 16


@njit(cache=True, nogil=True)
def _query(points, perm, lo, hi, left, right, axis, split, queries, out_d2, out_idx):
    stack = np.empty(128, dtype=np.int64)
    bound = np.empty(128)
    for qi in range(queries.shape[0]):
        qx = queries[qi, 0]
        qy = queries[qi, 1]
        qz = queries[qi, 2]
        best = np.inf
        best_i = -1
        sp = 0
        stack[sp] = 0
        bound[sp] = 0.0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if bound[sp] > best:
                continue
            if left[node] < 0:
                for k in range(lo[node], hi[node]):
                    i = perm[k]
                    dx = points[i, 0] - qx
                    dy = points[i, 1] - qy
                    dz = points[i, 2] - qz
                    d2 = dx * dx + dy * dy + dz * dz
                    if d2 < best or (d2 == best and i < best_i):
                        best = d2
                        best_i = i
                continue
            ax = axis[node]
            diff = queries[qi, ax] - split[node]
            if diff < 0.0:
                near = left[node]
                far = right[node]
            else:
                near = right[node]
                far = left[node]
            # far side goes first on the stack so the near side is searched
            # first; its bound is re-checked when popped
            if diff * diff <= best:
                stack[sp] = far
                bound[sp] = diff * diff
                sp += 1
            stack[sp] = near
            bound[sp] = 0.0
            sp += 1
        out_d2[qi] = best
        out_idx[qi] = best_i


class KDTree:
    """Exact nearest-neighbour index over 3D points.

    Each internal node splits its points at the median along the axis of
    largest extent. Leaves hold at most ``leaf_size`` points.
    """

    def __init__(self, points, leaf_size: int = LEAF_SIZE):
        pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise InvalidInputError("cannot index an empty point set")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("non-finite points")
        self.points = pts
        self.leaf_size = leaf_size
        perm = np.arange(len(pts))
        lo, hi, left, right, axis, split = [], [], [], [], [], []
        todo = [(0, len(pts), -1, False)]
        while todo:
            a, b, parent, is_right = todo.pop()
            node = len(lo)
            lo.append(a)
            hi.append(b)
            left.append(-1)
            right.append(-1)
            axis.append(0)
            split.append(0.0)
            if parent >= 0:
                (right if is_right else left)[parent] = node
            if b - a <= leaf_size:
                continue
            sub = pts[perm[a:b]]
            ax = int(np.argmax(sub.max(axis=0) - sub.min(axis=0)))
            mid = (b - a) // 2
            part = np.argpartition(sub[:, ax], mid)
            perm[a:b] = perm[a:b][part]
            axis[node] = ax
            split[node] = pts[perm[a + mid], ax]
            # left holds values <= split, right values >= split
            todo.append((a + mid, b, node, True))
            todo.append((a, a + mid, node, False))
        self.perm = perm
        self.lo = np.array(lo, dtype=np.int64)
        self.hi = np.array(hi, dtype=np.int64)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.axis = np.array(axis, dtype=np.int64)
        self.split = np.array(split, dtype=np.float64)

    def __len__(self):
        return len(self.points)

    def query(self, queries):
        """Distances and indices of the nearest indexed point.

        Ties resolve to the smallest point index, matching ``argmin`` over a
        brute-force distance row.
        """
        q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        d2 = np.empty(len(q))
        idx = np.empty(len(q), dtype=np.int64)
        _query(self.points, self.perm, self.lo, self.hi, self.left, self.right, self.axis, self.split, q, d2, idx)
        return np.sqrt(d2), idx


def brute_force_nearest(points, queries):
    """O(n*m) oracle with the same distance arithmetic as the tree."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    d = np.empty(len(q))
    idx = np.empty(len(q), dtype=np.int64)
    for i, x in enumerate(q):
        diff = p - x
        d2 = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        j = int(np.argmin(d2))
        idx[i] = j
        d[i] = math.sqrt(d2[j])
    return d, idx


def sample_mesh(mesh: Mesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    if n <= 0:
        raise InvalidInputError("sample count must be positive")
    if mesh.empty:
        raise InvalidInputError("cannot sample an empty mesh")
    area = mesh.area()
    total = area.sum()
    if not total > 0:
        raise DegenerateInputError("mesh has zero total area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(area), size=n, p=area / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    fv = mesh.face_vertices()[face]
    return ((1 - r1)[:, None] * fv[:, 0] + (r1 * (1 - r2))[:, None] * fv[:, 1] + (r1 * r2)[:, None] * fv[:, 2])


def voxel_downsample(points, voxel: float = 0.02) -> np.ndarray:
    """Centroid of each occupied voxel, ordered by voxel key."""
    if not voxel > 0:
        raise InvalidInputError("voxel size must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return pts.copy()
    keys = np.floor(pts / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    for k in range(3):
        sums[:, k] = np.bincount(inverse, weights=pts[:, k], minlength=len(counts))
    return sums / counts[:, None]


def one_sided_distance(a, b, index: KDTree | None = None):
    """Mean nearest distance from ``a`` to ``b`` and the per-point distances."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or (index is None and len(np.asarray(b).reshape(-1, 3)) == 0):
        raise InvalidInputError("point sets must be non-empty")
    index = index or KDTree(b)
    d, _ = index.query(a)
    return float(np.mean(d)), d


@dataclass
class EvalReport:
    cd: float
    precision: float
    recall: float
    f1: float
    counts: dict
    delta: float = 0.05

    def to_text(self) -> str:
        lines = [f"chamfer_distance: {self.cd:.6f}", f"precision: {self.precision:.6f}",
                 f"recall: {self.recall:.6f}", f"f1: {self.f1:.6f}", f"delta: {self.delta:g}"]
        lines += [f"{k}: {v}" for k, v in self.counts.items()]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def f1_score(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


def _as_points(x, n, seed):
    if isinstance(x, Mesh):
        if x.empty:
            if len(x.vertices) == 0:
                raise InvalidInputError("empty point set")
            return x.vertices.copy()
        return sample_mesh(x, n, seed)
    pts = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise InvalidInputError("empty point set")
    return pts


def chamfer_report(pred, gt, n: int = 100_000, delta: float = 0.05, voxel: float = 0.02, seed: int = 0) -> EvalReport:
    """CD, precision, recall and F1 between two meshes or point sets.

    Meshes are sampled with ``n`` points (the same seed on both sides, so
    identical meshes score exactly zero), point sets pass through; both
    sides are voxel-downsampled before scoring.
    """
    p_raw = _as_points(pred, n, seed)
    g_raw = _as_points(gt, n, seed)
    P = voxel_downsample(p_raw, voxel)
    G = voxel_downsample(g_raw, voxel)
    d_pg_mean, d_pg = one_sided_distance(P, G)
    d_gp_mean, d_gp = one_sided_distance(G, P)
    precision = float(np.mean(d_pg <= delta))
    recall = float(np.mean(d_gp <= delta))
    counts = {"pred_samples": len(p_raw), "gt_samples": len(g_raw), "pred_points": len(P), "gt_points": len(G)}
    return EvalReport(d_pg_mean + d_gp_mean, precision, recall, f1_score(precision, recall), counts, delta)


# -- image metrics --------------------------------------------------------------

def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; infinite when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError("image shapes differ")
    mse = float(np.mean((a - b) ** 2))
    return float("inf") if mse == 0 else 10.0 * math.log10(1.0 / mse)


def depth_errors(pred, gt, mask=None) -> dict:
    """AbsRel and AbsDiff over pixels with positive ground-truth depth."""
    pred = np.asarray(pred, dtype=np.float64).reshape(np.shape(gt)[:2])
    gt = np.asarray(gt, dtype=np.float64).reshape(pred.shape)
    valid = gt > 0 if mask is None else (np.asarray(mask, dtype=bool) & (gt > 0))
    if not valid.any():
        raise InvalidInputError("no valid depth pixels")
    diff = np.abs(pred[valid] - gt[valid])
    return {"abs_rel": float(np.mean(diff / gt[valid])), "abs_diff": float(np.mean(diff))}


def normal_errors(pred, gt, mask=None) -> dict:
    """Mean angular error in degrees and the share of pixels within 30 degrees."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    pn = np.linalg.norm(pred, axis=-1)
    gn = np.linalg.norm(gt, axis=-1)
    valid = (pn > 0) & (gn > 0)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not valid.any():
        raise InvalidInputError("no valid normal pixels")
    cos = np.sum(pred[valid] * gt[valid], axis=-1) / (pn[valid] * gn[valid])
    ang = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    return {"mean_angle_deg": float(np.mean(ang)), "within_30deg": float(np.mean(ang < 30.0))}
