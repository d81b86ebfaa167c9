"""File formats: TSPG grids, TSPT primitive sets, PPM images and manifests."""
from __future__ import annotations

import csv
import logging
import re
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, ParseError
from .scene import CameraPose, Intrinsics, project_to_so3
from .triangles import ScheduleConfig, TriangleSet

log = logging.getLogger(__name__)

TSPG_MAGIC = b"TSPG"
TSPG_VERSION = 1
TSPG_DTYPE = b"f32\0"
_TSPG_HEADER = struct.Struct("<4sHIIH4s")

TSPT_MAGIC = b"TSPT"
TSPT_VERSION = 1
_TSPT_HEADER = struct.Struct("<4sHIH")
# field name, width; float64 fields first, then u32 fields
TSPT_FLOAT_FIELDS = (("center", 3), ("scale_logits", 3), ("quat", 4), ("cam_quat", 4), ("sh0", 3),
                     ("density_logit", 1), ("blur_raw", 1), ("depth", 1), ("footprint", 3))
TSPT_RECORD = np.dtype([(name, "<f8", (w,)) for name, w in TSPT_FLOAT_FIELDS]
                       + [("view", "<u4"), ("row", "<u4"), ("col", "<u4"), ("flags", "<u4")])


# -- TSPG ---------------------------------------------------------------------------

def write_tspg(path, grid) -> None:
    """Write an (H, W) or (H, W, C) grid as little-endian float32."""
    a = np.asarray(grid)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise InvalidInputError("grid must be 2D or 3D")
    H, W, C = a.shape
    with open(path, "wb") as fh:
        fh.write(_TSPG_HEADER.pack(TSPG_MAGIC, TSPG_VERSION, H, W, C, TSPG_DTYPE))
        fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_tspg(path) -> np.ndarray:
    """Read a TSPG grid as an (H, W, C) float32 array."""
    data = Path(path).read_bytes()
    if len(data) < _TSPG_HEADER.size:
        raise ParseError(f"{path}: truncated TSPG header")
    magic, version, H, W, C, tag = _TSPG_HEADER.unpack_from(data)
    if magic != TSPG_MAGIC or tag != TSPG_DTYPE:
        raise ParseError(f"{path}: not a float32 TSPG grid")
    if version != TSPG_VERSION:
        raise ParseError(f"{path}: unsupported TSPG version {version}")
    payload = data[_TSPG_HEADER.size:]
    if len(payload) != H * W * C * 4:
        raise ParseError(f"{path}: payload length {len(payload)} != {H * W * C * 4}")
    return np.frombuffer(payload, dtype="<f4").reshape(H, W, C).astype(np.float32)


# -- TSPT ---------------------------------------------------------------------------

def write_tspt(path, tris: TriangleSet) -> None:
    rec = np.zeros(len(tris), dtype=TSPT_RECORD)
    for name, w in TSPT_FLOAT_FIELDS:
        rec[name] = np.asarray(getattr(tris, name)).reshape(len(tris), w)
    rec["view"], rec["row"], rec["col"] = tris.source[:, 0], tris.source[:, 1], tris.source[:, 2]
    rec["flags"] = tris.fallback.astype(np.uint32)
    with open(path, "wb") as fh:
        fh.write(_TSPT_HEADER.pack(TSPT_MAGIC, TSPT_VERSION, len(tris), TSPT_RECORD.itemsize))
        fh.write(rec.tobytes())


def read_tspt(path) -> TriangleSet:
    data = Path(path).read_bytes()
    if len(data) < _TSPT_HEADER.size:
        raise ParseError(f"{path}: truncated TSPT header")
    magic, version, count, size = _TSPT_HEADER.unpack_from(data)
    if magic != TSPT_MAGIC or version != TSPT_VERSION or size != TSPT_RECORD.itemsize:
        raise ParseError(f"{path}: not a TSPT v{TSPT_VERSION} file")
    body = data[_TSPT_HEADER.size:]
    if len(body) != count * size:
        raise ParseError(f"{path}: expected {count} records")
    rec = np.frombuffer(body, dtype=TSPT_RECORD, count=count)
    kw = {name: np.array(rec[name]).reshape(count, w) if w > 1 else np.array(rec[name]).reshape(count)
          for name, w in TSPT_FLOAT_FIELDS}
    kw["source"] = np.stack([rec["view"], rec["row"], rec["col"]], axis=1).astype(np.int64)
    kw["fallback"] = (rec["flags"] & 1).astype(bool)
    return TriangleSet(**kw)


# -- images -------------------------------------------------------------------------

def write_ppm(path, rgb) -> None:
    """8-bit binary PPM from a float image in [0, 1]."""
    a = np.asarray(rgb, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3:
        raise InvalidInputError("PPM needs an (H, W, 3) image")
    H, W, _ = a.shape
    u8 = np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(u8.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    # header: magic, width, height, maxval separated by whitespace and comments
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(data, pos)
        if m is None:
            raise ParseError(f"{path}: truncated PPM header")
        tokens.append(m.group(2))
        pos = m.end()
    pos += 1
    if tokens[0] != b"P6":
        raise ParseError(f"{path}: only binary P6 PPM is supported")
    try:
        W, H, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError(f"{path}: malformed PPM header") from None
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    if len(data) - pos < H * W * 3 * np.dtype(dtype).itemsize:
        raise ParseError(f"{path}: truncated PPM payload")
    px = np.frombuffer(data, dtype=dtype, count=H * W * 3, offset=pos)
    return px.reshape(H, W, 3).astype(np.float64) / maxval


def read_image(path) -> np.ndarray:
    """PPM always; PNG when Pillow is importable."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError:
            raise InvalidInputError("PNG input needs Pillow; convert to PPM") from None
        return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    if path.suffix.lower() == ".tspg":
        return read_tspg(path).astype(np.float64)
    return read_ppm(path)


def write_loss_csv(path, history) -> None:
    cols = ["step", "total", "mse", "normal", "cam", "filter_scale"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in history:
            w.writerow([row["step"]] + [repr(float(row[c])) for c in cols[1:]])


# -- manifest -----------------------------------------------------------------------

VIEW_REQUIRED = ("image", "points", "pose", "fx", "fy", "cx", "cy")
VIEW_OPTIONAL = ("mask", "teacher", "teacher_mask", "width", "height", "name")
SNAP_WARN = 1e-3


@dataclass
class ViewSpec:
    image: Path
    points: Path
    pose: CameraPose
    fx: float
    fy: float
    cx: float
    cy: float
    mask: Path | None = None
    teacher: Path | None = None
    teacher_mask: Path | None = None
    width: int | None = None
    height: int | None = None
    name: str = ""

    def intrinsics(self, width: int, height: int) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx, self.cy, self.width or width, self.height or height)


@dataclass
class SceneManifest:
    views: list
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loss: dict = field(default_factory=dict)
    fit: dict = field(default_factory=dict)
    init: dict = field(default_factory=dict)
    base_dir: Path = Path(".")
    warnings: list = field(default_factory=list)


_SECTION = re.compile(r"^\[\s*([A-Za-z_][\w.]*)\s*\]$")
_KV = re.compile(r"^([A-Za-z_][\w]*)\s*=\s*(.*)$")
_GLOBAL = {
    "schedule": {f.name for f in fields(ScheduleConfig)},
    "loss": {"lambda_photo", "lambda_mse", "lambda_normal", "lambda_cam", "omega_t", "omega_r", "huber_delta"},
    "fit": {"steps", "seed", "optimize_rotations", "filter_start", "filter_scale", "filter_total", "filter_mse",
            "filter_pose", "reframe_displacement", "lr_center", "lr_scale_logits", "lr_sh0", "lr_density_logit",
            "lr_blur_raw", "lr_quat", "threads", "tile", "schedule_scale"},
    "init": {"stride", "scale", "density_logit", "blur_raw", "smooth_window", "filter_window"},
}


def _number(text, line):
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"expected a number, got {text!r}", line=line) from None
    return int(v) if re.fullmatch(r"[+-]?\d+", text.strip()) else v


def _parse_value(key, text, line):
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    if text.lower() in ("none", ""):
        return None
    return _number(text, line)


def parse_config(path) -> SceneManifest:
    """Read a ``key = value`` manifest with ``[schedule]``, ``[loss]``,
    ``[fit]``, ``[init]`` and one ``[view.NAME]`` section per view.

    Relative paths resolve against the manifest's directory. Unknown keys
    warn; every missing required key is reported in one error.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InvalidInputError(f"cannot read manifest: {exc}") from None
    base = path.parent
    sections: dict = {}
    order = []
    current = None
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION.match(line)
        if m:
            current = m.group(1)
            if current in sections:
                raise ParseError(f"duplicate section [{current}]", line=i)
            sections[current] = {}
            order.append(current)
            continue
        m = _KV.match(line)
        if m is None:
            raise ParseError(f"malformed line {raw.strip()!r}", line=i)
        if current is None:
            raise ParseError("key outside of any section", line=i)
        sections[current][m.group(1)] = (m.group(2).strip(), i)

    warnings = []
    missing = []
    glob = {k: {} for k in _GLOBAL}
    views = []
    for name in order:
        entries = sections[name]
        if name in _GLOBAL:
            for key, (val, line) in entries.items():
                if key not in _GLOBAL[name]:
                    warnings.append(f"line {line}: unknown key {key!r} in [{name}]")
                    continue
                glob[name][key] = _parse_value(key, val, line)
        elif name.startswith("view"):
            spec = {}
            for key, (val, line) in entries.items():
                if key not in VIEW_REQUIRED + VIEW_OPTIONAL:
                    warnings.append(f"line {line}: unknown key {key!r} in [{name}]")
                    continue
                spec[key] = (val, line)
            absent = [k for k in VIEW_REQUIRED if k not in spec]
            missing += [f"[{name}] {k}" for k in absent]
            if absent:
                continue
            views.append(_build_view(name, spec, base, missing, warnings))
        else:
            warnings.append(f"unknown section [{name}]")
    if not views and not missing:
        missing.append("at least one [view.*] section")
    if missing:
        raise InvalidInputError("manifest is missing required keys: " + ", ".join(missing))
    for w in warnings:
        log.warning(w)
    sched_kw = {k: v for k, v in glob["schedule"].items() if v is not None or k == "floor_steps"}
    try:
        schedule = replace(ScheduleConfig(), **sched_kw)
    except TypeError as exc:
        raise InvalidInputError(str(exc)) from None
    return SceneManifest([v for v in views if v is not None], schedule, glob["loss"], glob["fit"], glob["init"],
                         base, warnings)


def _build_view(name, spec, base, missing, warnings):
    def path_of(key):
        if key not in spec:
            return None
        p = Path(spec[key][0])
        p = p if p.is_absolute() else base / p
        if not p.exists():
            missing.append(f"[{name}] {key} file {p} does not exist")
        return p

    nums = {}
    for key in ("fx", "fy", "cx", "cy", "width", "height"):
        if key in spec:
            nums[key] = _number(*spec[key])
    val, line = spec["pose"]
    try:
        vals = [float(x) for x in val.replace(",", " ").split()]
    except ValueError:
        raise ParseError("pose must be 12 numbers", line=line) from None
    if len(vals) != 12:
        raise ParseError(f"pose must be 12 numbers, got {len(vals)}", line=line)
    R = np.array(vals[:9]).reshape(3, 3)
    snapped = project_to_so3(R)
    corr = float(np.abs(snapped - R).max())
    if corr > SNAP_WARN:
        warnings.append(f"[{name}] pose rotation snapped to SO(3), max correction {corr:.3g}")
    pose = CameraPose(snapped, np.array(vals[9:]))
    return ViewSpec(image=path_of("image"), points=path_of("points"), pose=pose, fx=nums["fx"], fy=nums["fy"],
                    cx=nums["cx"], cy=nums["cy"], mask=path_of("mask"), teacher=path_of("teacher"),
                    teacher_mask=path_of("teacher_mask"), width=nums.get("width"), height=nums.get("height"),
                    name=spec.get("name", (name.split(".", 1)[-1], 0))[0])


def format_pose(pose: CameraPose) -> str:
    return " ".join(repr(float(x)) for x in np.concatenate([pose.rotation.reshape(-1), pose.translation]))
