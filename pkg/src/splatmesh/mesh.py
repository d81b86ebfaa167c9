"""Direct conversion of primitives into an indexed, coloured triangle mesh."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import DegenerateInputError, InvalidInputError, ParseError
from .triangles import (ScheduleConfig, ScheduleState, TriangleConfig, TriangleSet, evaluate_primitives,
                        opacity_map, sh0_to_color, temperature_sharpen)

__all__ = ["Mesh", "prune_triangles", "fix_winding", "dedup_vertices", "sh0_to_color", "export_mesh",
           "reference_normals", "write_mesh", "read_mesh"]

PRUNE_THRESHOLD = 0.10
PRUNE_TAU = 5.0
DEDUP_PRECISION = 1e-5


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray          # per face
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.colors) != len(self.faces):
            raise InvalidInputError("one colour per face is required")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise InvalidInputError("face index out of range")

    @property
    def empty(self) -> bool:
        return len(self.faces) == 0

    def face_vertices(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_normals(self) -> np.ndarray:
        fv = self.face_vertices()
        return np.cross(fv[:, 1] - fv[:, 0], fv[:, 2] - fv[:, 0])

    def area(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)


def prune_mask(tris: TriangleSet, threshold: float = PRUNE_THRESHOLD, tau: float = PRUNE_TAU, e: float = 2.0,
               cfg: TriangleConfig = TriangleConfig()) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise InvalidInputError("threshold must lie in (0, 1)")
    if len(tris) == 0:
        return np.zeros(0, dtype=bool)
    mapped = np.asarray(opacity_map(expit(tris.density_logit), e)).reshape(-1)
    sharp = np.asarray(temperature_sharpen(mapped, tau)).reshape(-1)
    sched = ScheduleState(float("inf"), e, tau, 0.5, 0.0, False)
    state = evaluate_primitives(tris, sched, cfg)
    return (sharp >= threshold) & ~state.degenerate


def prune_triangles(tris: TriangleSet, threshold: float = PRUNE_THRESHOLD, tau: float = PRUNE_TAU,
                    e: float = 2.0, cfg: TriangleConfig = TriangleConfig()) -> TriangleSet:
    """Keep primitives with sharpened opacity at or above ``threshold``.

    ``e`` is the opacity exponent used before sharpening (its final value by
    default). Degenerate primitives are always dropped.
    """
    return tris.subset(np.nonzero(prune_mask(tris, threshold, tau, e, cfg))[0])


def fix_winding(face, reference) -> np.ndarray:
    """Swap the last two vertices if the face normal opposes ``reference``."""
    v = np.array(face, dtype=np.float64).reshape(3, 3)
    n = np.cross(v[1] - v[0], v[2] - v[0])
    if not np.linalg.norm(n) > 0.0:
        raise DegenerateInputError("zero-area face")
    if np.dot(n, np.asarray(reference, dtype=np.float64)) < 0.0:
        v[[1, 2]] = v[[2, 1]]
    return v


def _fix_winding_batch(fv, ref):
    n = np.cross(fv[:, 1] - fv[:, 0], fv[:, 2] - fv[:, 0])
    flip = np.einsum("ij,ij->i", n, ref) < 0.0
    out = fv.copy()
    out[flip, 1], out[flip, 2] = fv[flip, 2], fv[flip, 1]
    return out


def _octant(n):
    # bit per axis, non-negative components counted as positive
    return (n[:, 0] < 0).astype(np.int64) + 2 * (n[:, 1] < 0) + 4 * (n[:, 2] < 0)


def dedup_vertices(face_vertices, colors=None, precision: float = DEDUP_PRECISION) -> Mesh:
    """Merge vertices sharing a quantised position and face-normal octant.

    The first occurrence (face order, then corner order) supplies the merged
    position. Faces left with a repeated index are dropped.
    """
    if not precision > 0:
        raise InvalidInputError("precision must be positive")
    fv = np.asarray(face_vertices, dtype=np.float64).reshape(-1, 3, 3)
    F = len(fv)
    colors = np.full((F, 3), 0.5) if colors is None else np.asarray(colors, dtype=np.float64).reshape(F, 3)
    if F == 0:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))
    normals = np.cross(fv[:, 1] - fv[:, 0], fv[:, 2] - fv[:, 0])
    pts = fv.reshape(-1, 3)
    keys = np.empty((3 * F, 4), dtype=np.int64)
    keys[:, :3] = np.round(pts / precision).astype(np.int64)
    keys[:, 3] = np.repeat(_octant(normals), 3)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    # renumber unique keys by first occurrence
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    faces = rank[inverse].reshape(F, 3)
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces, colors = faces[keep], colors[keep]
    used = np.zeros(len(order), dtype=bool)
    used[faces.reshape(-1)] = True
    remap = np.cumsum(used) - 1
    return Mesh(pts[first[order]][used], remap[faces], colors)


def reference_normals(tris: TriangleSet, fields=None) -> np.ndarray:
    """World reference normal per primitive from per-view camera-frame fields.

    ``fields[v]`` is a NormalField for view ``v`` on the source grid. Where
    no valid field value exists the primitive's own frame normal is used.
    """
    own = tris.world_rotations()[:, :, 2] if len(tris) else np.zeros((0, 3))
    out = own.copy()
    if fields is None:
        return out
    from .scene import quat_to_matrix
    Rc = quat_to_matrix(tris.cam_quat)
    for v, nf in enumerate(fields):
        if nf is None:
            continue
        sel = np.nonzero(tris.source[:, 0] == v)[0]
        r, c = tris.source[sel, 1], tris.source[sel, 2]
        H, W = nf.shape
        inb = (r >= 0) & (r < H) & (c >= 0) & (c < W)
        sel, r, c = sel[inb], r[inb], c[inb]
        ok = nf.mask[r, c]
        sel, r, c = sel[ok], r[ok], c[ok]
        out[sel] = np.einsum("nij,nj->ni", Rc[sel], nf.normals[r, c])
    return out


def export_mesh(tris: TriangleSet, ref_normals=None, threshold: float = PRUNE_THRESHOLD, tau: float = PRUNE_TAU,
                schedule: ScheduleConfig = ScheduleConfig(), cfg: TriangleConfig = TriangleConfig(),
                precision: float = DEDUP_PRECISION) -> Mesh:
    """Prune, build vertices, fix winding, deduplicate and colour.

    Vertices are built at the final schedule state. ``ref_normals`` defaults
    to each primitive's own frame normal.
    """
    if ref_normals is None:
        ref_normals = reference_normals(tris)
    ref_normals = np.asarray(ref_normals, dtype=np.float64).reshape(len(tris), 3)
    keep = np.nonzero(prune_mask(tris, threshold, tau, schedule.e_final, cfg))[0]
    if len(keep) == 0:
        mesh = dedup_vertices(np.zeros((0, 3, 3)), precision=precision)
        mesh.warnings.append("no primitive survived pruning")
        return mesh
    kept = tris.subset(keep)
    state = evaluate_primitives(kept, ScheduleState.final(schedule), cfg)
    fv = _fix_winding_batch(state.vertices, ref_normals[keep])
    return dedup_vertices(fv, state.color, precision)


# -- file formats -----------------------------------------------------------------

def _split_by_color(mesh: Mesh):
    """Duplicate vertices shared by faces of different colour.

    Returns (vertices, faces, vertex_colors); a mesh whose shared vertices
    already agree in colour keeps its vertex count.
    """
    if mesh.empty:
        return mesh.vertices, mesh.faces, np.zeros((len(mesh.vertices), 3))
    F = len(mesh.faces)
    corner_v = mesh.faces.reshape(-1)
    corner_c = np.repeat(mesh.colors, 3, axis=0)
    table = np.column_stack([corner_v.astype(np.float64), corner_c])
    uniq, first, inverse = np.unique(table, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    new_idx = rank[inverse.reshape(-1)]
    src = corner_v[first[order]]
    verts = mesh.vertices[src]
    vcol = corner_c[first[order]]
    return verts, new_idx.reshape(F, 3), vcol


def _to_u8(c):
    return np.clip(np.round(np.asarray(c) * 255.0), 0, 255).astype(np.uint8)


def write_mesh(mesh: Mesh, path, fmt: str | None = None) -> None:
    """Write OBJ (ascii, ``v x y z r g b``) or binary little-endian PLY."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    verts, faces, vcol = _split_by_color(mesh)
    if fmt == "obj":
        lines = [f"v {x:.9g} {y:.9g} {z:.9g} {r:.6g} {g:.6g} {b:.6g}" for (x, y, z), (r, g, b) in zip(verts, vcol)]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces]
        path.write_text("".join(line + "\n" for line in lines))
    elif fmt == "ply":
        header = ("ply\nformat binary_little_endian 1.0\n"
                  f"element vertex {len(verts)}\n"
                  "property float x\nproperty float y\nproperty float z\n"
                  "property uchar red\nproperty uchar green\nproperty uchar blue\n"
                  f"element face {len(faces)}\n"
                  "property list uchar int vertex_indices\nend_header\n")
        vdt = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("r", "u1"), ("g", "u1"), ("b", "u1")])
        vrec = np.empty(len(verts), dtype=vdt)
        vrec["x"], vrec["y"], vrec["z"] = verts[:, 0], verts[:, 1], verts[:, 2]
        c8 = _to_u8(vcol)
        vrec["r"], vrec["g"], vrec["b"] = c8[:, 0], c8[:, 1], c8[:, 2]
        fdt = np.dtype([("n", "u1"), ("i", "<i4", (3,))])
        frec = np.empty(len(faces), dtype=fdt)
        frec["n"] = 3
        frec["i"] = faces
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(vrec.tobytes())
            fh.write(frec.tobytes())
    else:
        raise InvalidInputError(f"unknown mesh format {fmt!r}")


def _read_obj(path):
    verts, cols, faces = [], [], []
    for i, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                vals = [float(x) for x in parts[1:]]
                verts.append(vals[:3])
                cols.append(vals[3:6] if len(vals) >= 6 else [0.5, 0.5, 0.5])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0] - 1, idx[k] - 1, idx[k + 1] - 1])
        except (ValueError, IndexError) as exc:
            raise ParseError(f"malformed OBJ record: {exc}", line=i) from None
    return np.array(verts).reshape(-1, 3), np.array(cols).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


_PLY_TYPES = {"char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1", "short": "<i2", "int16": "<i2",
              "ushort": "<u2", "uint16": "<u2", "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
              "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8"}


def _read_ply(path):
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError("not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    body = data[end + len("end_header\n"):]
    if "format binary_little_endian 1.0" not in header:
        raise ParseError("only binary little-endian PLY is supported")
    elements = []
    for line in header:
        p = line.split()
        if p and p[0] == "element":
            elements.append([p[1], int(p[2]), []])
        elif p and p[0] == "property":
            elements[-1][2].append(p[1:])
    verts = np.zeros((0, 3))
    cols = None
    faces = np.zeros((0, 3), dtype=np.int64)
    off = 0
    for name, count, props in elements:
        if all(pr[0] != "list" for pr in props):
            dt = np.dtype([(pr[1], _PLY_TYPES[pr[0]]) for pr in props])
            rec = np.frombuffer(body, dtype=dt, count=count, offset=off)
            off += dt.itemsize * count
            if name == "vertex":
                verts = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(np.float64)
                if {"red", "green", "blue"} <= set(dt.names):
                    cols = np.column_stack([rec["red"], rec["green"], rec["blue"]]).astype(np.float64) / 255.0
        else:
            _, ct, it, _ = props[0]
            cdt, idt = np.dtype(_PLY_TYPES[ct]), np.dtype(_PLY_TYPES[it])
            rows = []
            for _ in range(count):
                k = int(np.frombuffer(body, cdt, 1, off)[0])
                off += cdt.itemsize
                idx = np.frombuffer(body, idt, k, off)
                off += idt.itemsize * k
                for j in range(1, k - 1):
                    rows.append([idx[0], idx[j], idx[j + 1]])
            if name == "face":
                faces = np.array(rows, dtype=np.int64).reshape(-1, 3)
    if cols is None:
        cols = np.full((len(verts), 3), 0.5)
    return verts, cols, faces


def read_mesh(path) -> Mesh:
    """Read OBJ or PLY. A face takes the colour of its first vertex.

    Point clouds (no faces) load as a mesh with zero faces; the points are
    in ``vertices``.
    """
    path = Path(path)
    fmt = path.suffix.lstrip(".").lower()
    if fmt == "obj":
        v, c, f = _read_obj(path)
    elif fmt == "ply":
        v, c, f = _read_ply(path)
    else:
        raise InvalidInputError(f"unknown mesh format {fmt!r}")
    if len(f) and (f.min() < 0 or f.max() >= len(v)):
        raise ParseError("face index out of range")
    return Mesh(v, f, c[f[:, 0]] if len(f) else np.zeros((0, 3)))


def write_points_ply(points, path) -> None:
    """Binary little-endian PLY point cloud (vertex x/y/z only)."""
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {len(pts)}\n"
              "property float x\nproperty float y\nproperty float z\nend_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(pts.tobytes())
