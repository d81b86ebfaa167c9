"""``splatmesh`` command line.

Every command writes into ``--out-dir`` (default ``$SPLATMESH_OUT_DIR`` or
the working directory) and caps workers at ``--threads`` (default
``$SPLATMESH_THREADS`` or 1). Exit status is 0 on success, 1 on a domain
error and 2 on a usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import zlib
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, FitDivergedError, InvalidInputError, ParseError
from .evaluation import chamfer_report, depth_errors, normal_errors, psnr
from .fit import DEFAULT_LR, FitConfig, LossWeights
from .gradcheck import finite_difference_check
from .io import (SceneManifest, parse_config, read_image, read_tspg, read_tspt, write_loss_csv, write_ppm,
                 write_tspg, write_tspt)
from .mesh import PRUNE_THRESHOLD, PRUNE_TAU, export_mesh, read_mesh, reference_normals, write_mesh
from .normals import NormalField, normal_pipeline
from .pipeline import InitConfig, SourceView, fit_views, grid_teacher, grid_view
from .rasterizer import RenderConfig, render
from .scene import PointMap
from .synthetic import gradcheck_scene
from .triangles import ScheduleConfig, ScheduleState, schedule_state

log = logging.getLogger("splatmesh")

COMMANDS = ("fit", "render", "export-mesh", "eval-mesh", "normals", "gradcheck", "schedule-dump", "compare")
DOMAIN_ERRORS = (InvalidInputError, DegenerateInputError, ParseError, FitDivergedError, OSError)


class UsageError(Exception):
    pass


def derive_seed(seed: int, name: str) -> int:
    """Independent, reproducible stream for the consumer called ``name``."""
    ss = np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1)[0])


# -- loading ------------------------------------------------------------------

def _grid_mask(path, shape):
    if path is None:
        return np.ones(shape, dtype=bool)
    m = read_tspg(path)[..., 0]
    if m.shape != shape:
        raise InvalidInputError(f"{path}: mask is {m.shape}, expected {shape}")
    return m > 0


def load_point_map(path, mask_path=None) -> PointMap:
    pts = read_tspg(path).astype(np.float64)
    if pts.shape[2] != 3:
        raise InvalidInputError(f"{path}: point map needs 3 channels")
    mask = _grid_mask(mask_path, pts.shape[:2]) & np.all(np.isfinite(pts), axis=-1) & (pts[..., 2] > 0)
    return PointMap(np.where(mask[..., None], pts, 0.0), mask)


def load_normals(path, mask_path=None) -> NormalField:
    n = read_tspg(path).astype(np.float64)
    if n.shape[2] != 3:
        raise InvalidInputError(f"{path}: normal grid needs 3 channels")
    norm = np.linalg.norm(n, axis=-1)
    mask = _grid_mask(mask_path, n.shape[:2]) & np.isfinite(norm) & (norm > 0)
    safe = np.where(mask, norm, 1.0)[..., None]
    return NormalField(np.where(mask[..., None], n / safe, 0.0), mask)


def load_views(manifest: SceneManifest) -> list:
    views = []
    for spec in manifest.views:
        image = read_image(spec.image)
        H, W = image.shape[:2]
        pm = load_point_map(spec.points, spec.mask)
        teacher = load_normals(spec.teacher, spec.teacher_mask) if spec.teacher is not None else None
        views.append(SourceView(image, spec.pose, spec.intrinsics(W, H), pm, teacher, spec.name))
    return views


def fit_settings(manifest: SceneManifest, args):
    """``InitConfig``, ``FitConfig`` and ``LossWeights`` from a manifest plus flags."""
    f = dict(manifest.fit)
    schedule = manifest.schedule
    if f.get("schedule_scale") is not None:
        schedule = schedule.rescaled(float(f["schedule_scale"]))
    lr = dict(DEFAULT_LR)
    for k in DEFAULT_LR:
        if f.get(f"lr_{k}") is not None:
            lr[k] = float(f[f"lr_{k}"])
    render_cfg = RenderConfig(tile=int(f.get("tile") or 16), threads=args.threads)
    kw = {k: f[k] for k in ("optimize_rotations", "filter_start", "filter_scale", "filter_total", "filter_mse",
                            "filter_pose", "reframe_displacement") if k in f}
    steps = args.steps if getattr(args, "steps", None) is not None else int(f.get("steps") or 2000)
    cfg = FitConfig(steps=steps, lr=lr, schedule=schedule, render=render_cfg, **kw)
    init = replace(InitConfig(), **{k: v for k, v in manifest.init.items() if v is not None})
    w = LossWeights(**{k: v for k, v in manifest.loss.items() if v is not None})
    return init, cfg, w


def view_fields(views, init: InitConfig, step: int, schedule: ScheduleConfig) -> list:
    """Forward normals of every view on the primitive grid at ``step``."""
    out = []
    for v in views:
        pm, _, _ = grid_view(v, init.stride)
        res = normal_pipeline(pm, grid_teacher(v, init.stride), step, schedule.bootstrap, init.smooth_window,
                              init.filter_window)
        out.append(res["fwd"])
    return out


def _state(args, schedule: ScheduleConfig) -> ScheduleState:
    return ScheduleState.final(schedule) if args.step is None else schedule_state(args.step, schedule)


# -- commands -------------------------------------------------------------------

def cmd_fit(args, out: Path) -> int:
    manifest = parse_config(args.config)
    init, cfg, w = fit_settings(manifest, args)
    views = load_views(manifest)

    def progress(t, tris, row):
        if args.log_every and t % args.log_every == 0:
            log.info("step %d total %.6g mse %.6g", t, row["total"], row["mse"])

    build = fit_views(views, init, cfg, w, progress)
    write_tspt(out / "scene.tspt", build.scene)
    write_loss_csv(out / "loss.csv", build.result.history)
    print(f"fitted {len(build.scene)} primitives over {cfg.steps} steps -> {out / 'scene.tspt'}")
    return 0


def cmd_render(args, out: Path) -> int:
    manifest = parse_config(args.config)
    _, cfg, _ = fit_settings(manifest, args)
    tris = read_tspt(args.scene)
    sched = _state(args, cfg.schedule)
    for i, spec in enumerate(manifest.views):
        H, W = read_image(spec.image).shape[:2]
        res, _ = render(tris, spec.pose, spec.intrinsics(W, H), sched, cfg.render, record=False)
        name = spec.name or f"view{i}"
        if args.format in ("ppm", "both"):
            write_ppm(out / f"{name}_rgb.ppm", res.rgb)
        if args.format in ("tspg", "both"):
            write_tspg(out / f"{name}_rgb.tspg", res.rgb)
            write_tspg(out / f"{name}_depth.tspg", res.depth)
            write_tspg(out / f"{name}_normal.tspg", res.normal)
            write_tspg(out / f"{name}_alpha.tspg", res.alpha)
    print(f"rendered {len(manifest.views)} views -> {out}")
    return 0


def cmd_export(args, out: Path) -> int:
    tris = read_tspt(args.scene)
    schedule = ScheduleConfig()
    refs = None
    if args.config is not None:
        manifest = parse_config(args.config)
        init, cfg, _ = fit_settings(manifest, args)
        schedule = cfg.schedule
        refs = reference_normals(tris, view_fields(load_views(manifest), init, cfg.steps, schedule))
    mesh = export_mesh(tris, refs, args.threshold, args.tau, schedule)
    for msg in mesh.warnings:
        log.warning(msg)
    path = Path(args.output) if args.output else out / f"mesh.{args.format}"
    write_mesh(mesh, path, args.format if not args.output else None)
    print(f"{len(mesh.vertices)} vertices, {len(mesh.faces)} faces -> {path}")
    return 0


def cmd_eval(args, out: Path) -> int:
    report = chamfer_report(read_mesh(args.pred), read_mesh(args.gt), args.samples, args.delta, args.voxel,
                            derive_seed(args.seed, "eval-mesh.sampling"))
    (out / "eval.txt").write_text(report.to_text())
    (out / "eval.json").write_text(report.to_json() + "\n")
    sys.stdout.write(report.to_text())
    return 0


def cmd_normals(args, out: Path) -> int:
    pm = load_point_map(args.points, args.mask)
    teacher = load_normals(args.teacher) if args.teacher else None
    res = normal_pipeline(pm, teacher, args.step, ScheduleConfig().bootstrap, args.smooth_window,
                          args.filter_window)
    for key in ("geo", "sm", "fwd"):
        nf = res[key]
        write_tspg(out / f"n_{key}.tspg", np.where(nf.mask[..., None], nf.normals, 0.0))
    print(f"wrote n_geo, n_sm, n_fwd -> {out}")
    return 0


def cmd_gradcheck(args, out: Path) -> int:
    tris, pose, intr, sched = gradcheck_scene(derive_seed(args.seed, "gradcheck.scene") % 2**31, args.count,
                                              args.size)
    report = finite_difference_check(tris, pose, intr, sched, RenderConfig(threads=args.threads),
                                     per_param=args.samples, seed=derive_seed(args.seed, "gradcheck.probe"))
    (out / "gradcheck.txt").write_text(report.to_text())
    print(f"excluded {report.excluded} of {len(report.samples)} samples; pass fraction "
          f"{report.pass_fraction:.4f}; colour max rel {report.color_max_rel:.3e}")
    print("PASS" if report.passed else "FAIL")
    return 0 if report.passed else 1


def cmd_schedule(args, out: Path) -> int:
    schedule = parse_config(args.config).schedule if args.config else ScheduleConfig()
    if args.every <= 0 or args.t_max < 0:
        raise UsageError("--every must be positive and --t-max non-negative")
    ts = list(range(0, args.t_max, args.every)) + [args.t_max]
    path = Path(args.output) if args.output else out / "schedule.csv"
    with open(path, "w") as fh:
        fh.write("t,e,tau,beta,alpha\n")
        for t in ts:
            s = schedule_state(t, schedule)
            fh.write(f"{t},{s.e!r},{s.tau!r},{s.beta!r},{s.alpha!r}\n")
    print(f"{len(ts)} rows -> {path}")
    return 0


def cmd_compare(args, out: Path) -> int:
    if not (args.image or args.depth or args.normal):
        raise UsageError("compare needs at least one of --image, --depth, --normal")
    mask = read_tspg(args.mask)[..., 0] > 0 if args.mask else None
    stats = {}
    if args.image:
        stats["psnr"] = psnr(read_image(args.image[0]), read_image(args.image[1]))
    if args.depth:
        a, b = (read_tspg(p)[..., 0] for p in args.depth)
        stats.update(depth_errors(a, b, mask))
    if args.normal:
        a, b = (read_tspg(p) for p in args.normal)
        stats.update(normal_errors(a, b, mask))
    for k, v in stats.items():
        print(f"{k}: {v:.6f}")
    (out / "compare.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return 0


# -- argument parsing ---------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _env_int(name, default):
    v = os.environ.get(name)
    try:
        return int(v) if v else default
    except ValueError:
        raise UsageError(f"{name} must be an integer") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out-dir", default=os.environ.get("SPLATMESH_OUT_DIR", "."),
                        help="output directory (env SPLATMESH_OUT_DIR)")
    common.add_argument("--threads", type=int, default=None, help="worker cap (env SPLATMESH_THREADS)")
    common.add_argument("--seed", type=int, default=0, help="root of every random stream")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="splatmesh", description="Fit soft triangles to posed views and export meshes.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    s = sub.add_parser("fit", parents=[common], help="fit primitives to the views of a manifest")
    s.add_argument("config")
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--log-every", type=int, default=0)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("render", parents=[common], help="render a fitted scene into every manifest view")
    s.add_argument("scene", help="TSPT file")
    s.add_argument("config")
    s.add_argument("--step", type=int, default=None, help="schedule step (default: end of every ramp)")
    s.add_argument("--format", choices=("ppm", "tspg", "both"), default="both")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("export-mesh", parents=[common], help="prune and export a fitted scene as a mesh")
    s.add_argument("scene", help="TSPT file")
    s.add_argument("--config", default=None, help="manifest; enables per-pixel reference normals")
    s.add_argument("--format", choices=("obj", "ply"), default="ply")
    s.add_argument("--output", default=None, help="explicit output path (format from its suffix)")
    s.add_argument("--threshold", type=float, default=PRUNE_THRESHOLD)
    s.add_argument("--tau", type=float, default=PRUNE_TAU)
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("eval-mesh", parents=[common], help="Chamfer distance and F1 between two meshes")
    s.add_argument("pred")
    s.add_argument("gt")
    s.add_argument("--samples", type=int, default=100_000)
    s.add_argument("--delta", type=float, default=0.05)
    s.add_argument("--voxel", type=float, default=0.02)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("normals", parents=[common], help="dump the normal fields of a point map")
    s.add_argument("points", help="TSPG point map (H, W, 3)")
    s.add_argument("--mask", default=None)
    s.add_argument("--teacher", default=None, help="TSPG teacher normals")
    s.add_argument("--step", type=int, default=0)
    s.add_argument("--smooth-window", type=int, default=3)
    s.add_argument("--filter-window", type=int, default=3)
    s.set_defaults(func=cmd_normals)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the rasteriser")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--count", type=int, default=200)
    s.add_argument("--samples", type=int, default=50, help="samples per parameter group")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("schedule-dump", parents=[common], help="CSV of e, tau, beta and alpha against step")
    s.add_argument("--config", default=None)
    s.add_argument("--t-max", type=int, default=16000)
    s.add_argument("--every", type=int, default=100)
    s.add_argument("--output", default=None)
    s.set_defaults(func=cmd_schedule)

    s = sub.add_parser("compare", parents=[common], help="image, depth and normal error statistics")
    s.add_argument("--image", nargs=2, metavar=("A", "B"))
    s.add_argument("--depth", nargs=2, metavar=("PRED", "GT"))
    s.add_argument("--normal", nargs=2, metavar=("PRED", "GT"))
    s.add_argument("--mask", default=None)
    s.set_defaults(func=cmd_compare)
    return p


def run_command(argv=None) -> int:
    """Run one command and return its exit status."""
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 2
        if args.threads is None:
            args.threads = _env_int("SPLATMESH_THREADS", 1)
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s: %(message)s")
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return args.func(args, out)
    except UsageError as exc:
        print(f"splatmesh: usage error: {exc}", file=sys.stderr)
        return 2
    except DOMAIN_ERRORS as exc:
        print(f"splatmesh: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command())
