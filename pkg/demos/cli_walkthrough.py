"""Command-line walkthrough
========================

Writes the synthetic two-plane scene to disk as PPM images, TSPG point maps
and a manifest, then drives the ``splatmesh`` command line through a short
fit, a render, a mesh export and a surface evaluation.

Run: ``python demos/cli_walkthrough.py [workdir] [steps]``
"""
import sys
from pathlib import Path

from splatmesh.cli import run_command
from splatmesh.io import format_pose, write_ppm, write_tspg
from splatmesh.mesh import write_points_ply
from splatmesh.synthetic import two_plane_scene

work = Path(sys.argv[1] if len(sys.argv) > 1 else "walkthrough")
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 200
work.mkdir(parents=True, exist_ok=True)

scene = two_plane_scene()
lines = ["[fit]", f"steps = {steps}", f"schedule_scale = {steps / 20000}", "lr_center = 1e-4", "", "[init]",
         "stride = 4", ""]
for v in scene.train:
    write_ppm(work / f"{v.name}.ppm", v.image)
    write_tspg(work / f"{v.name}_points.tspg", v.points.points)
    i = v.intr
    lines += [f"[view.{v.name}]", f"image = {v.name}.ppm", f"points = {v.name}_points.tspg",
              f"pose = {format_pose(v.pose)}", f"fx = {i.fx}", f"fy = {i.fy}", f"cx = {i.cx}", f"cy = {i.cy}", ""]
(work / "scene.cfg").write_text("\n".join(lines))
write_points_ply(scene.gt_points, work / "gt.ply")

out = work / "out"
for argv in (["fit", work / "scene.cfg", "--log-every", 50, "-v"],
             ["render", out / "scene.tspt", work / "scene.cfg", "--format", "ppm"],
             ["export-mesh", out / "scene.tspt", "--config", work / "scene.cfg"],
             ["eval-mesh", out / "mesh.ply", work / "gt.ply", "--samples", 50000]):
    print("$ splatmesh", " ".join(str(a) for a in argv))
    status = run_command([str(a) for a in argv] + ["--out-dir", str(out)])
    if status:
        sys.exit(status)
