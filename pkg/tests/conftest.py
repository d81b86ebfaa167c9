import numpy as np
import pytest
from hypothesis import settings

from splatmesh.scene import Intrinsics, PointMap, pixel_grid

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def plane_point_map(h=9, w=9, delta=0.1, depth=1.0):
    """``p(u, v) = (u * delta, v * delta, depth)`` on an h x w grid."""
    rows, cols = pixel_grid(h, w)
    pts = np.stack([cols * delta, rows * delta, np.full_like(rows, depth)], axis=-1)
    return PointMap(pts, np.ones((h, w), dtype=bool))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def plane_pm():
    return plane_point_map()


@pytest.fixture
def intr64():
    return Intrinsics(64.0, 64.0, 32.0, 32.0, 64, 64)


@pytest.fixture
def tiny_manifest(tmp_path):
    """One 16x16 view of a textured fronto-parallel plane, written to disk."""
    from splatmesh.io import write_ppm, write_tspg

    h = w = 16
    rows, cols = np.mgrid[0:h, 0:w].astype(float)
    img = np.stack([0.5 + 0.3 * np.sin(cols / 3), 0.5 + 0.3 * np.cos(rows / 4), np.full((h, w), 0.4)], -1)
    z = np.full((h, w), 2.0)
    pts = np.stack([(cols - 7.5) / 16 * z, (rows - 7.5) / 16 * z, z], -1)
    write_ppm(tmp_path / "img.ppm", img)
    write_tspg(tmp_path / "pts.tspg", pts)
    (tmp_path / "scene.cfg").write_text(
        "[fit]\nsteps = 4\nschedule_scale = 0.001\n\n[init]\nstride = 2\n\n"
        "[view.a]\nimage = img.ppm\npoints = pts.tspg\npose = 1 0 0 0 1 0 0 0 1 0 0 0\n"
        "fx = 16\nfy = 16\ncx = 7.5\ncy = 7.5\n")
    return tmp_path / "scene.cfg"


# -- acceptance summary --------------------------------------------------------

def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Call with ``(number, title, checks, seconds, budget)`` where ``checks``
    maps a label to a bool; the line is printed immediately and again in
    the terminal summary.
    """
    def record(number, title, checks, seconds, budget):
        checks = dict(checks)
        checks[f"runtime {seconds:.2f}s < {budget:g}s"] = seconds < budget
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {title} ({seconds:.2f}s)"
        if failed:
            line += " failed: " + "; ".join(failed)
        print(line)
        request.config.acceptance_lines.append(line)
        return ok, failed
    return record
