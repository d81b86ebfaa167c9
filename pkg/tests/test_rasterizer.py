import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from shapely.geometry import Point, Polygon

from splatmesh import _kernels
from splatmesh.errors import InvalidInputError
from splatmesh.gradcheck import finite_difference_check
from splatmesh.rasterizer import (RecordBuffers, RenderConfig, ScreenTriangles, bin_tiles, composite_backward,
                                  composite_forward, project_triangles, render, render_backward)
from splatmesh.scene import CameraPose, Intrinsics
from splatmesh.synthetic import gradcheck_scene
from splatmesh.triangles import TEMPLATE, ScheduleState, TriangleSet

BIG = [[-1000.0, -1000.0], [3000.0, -1000.0], [-1000.0, 3000.0]]
FINAL = ScheduleState(16000, 2.0, 5.0, 0.5, 0.0, False)


def screen(xy, depth=None, color=None, opacity=None, band=None, size=16):
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 3, 2)
    n = len(xy)
    depth = np.ones(n) if depth is None else np.asarray(depth, float)
    color = np.full((n, 3), 0.5) if color is None else np.asarray(color, float).reshape(n, 3)
    opacity = np.ones(n) if opacity is None else np.asarray(opacity, float)
    band = np.full(n, 0.01) if band is None else np.asarray(band, float)
    return ScreenTriangles(xy=xy, vert_depth=np.repeat(depth[:, None], 3, 1), color=color, opacity=opacity,
                           band=band, normal=np.tile([0, 0, -1.0], (n, 1)), ids=np.arange(n), width=size,
                           height=size)


def forward(sc, bg=(0.0, 0.0, 0.0), tile=16):
    return composite_forward(bin_tiles(sc, tile), sc, bg)


def one_triangle(center=(0.0, 0.0, 1.0), scale_logit=-2.0, density=4.0, blur=-2.0, quat=(1.0, 0, 0, 0)):
    return TriangleSet(center=[center], scale_logits=[[scale_logit] * 3], quat=[quat], cam_quat=[[1.0, 0, 0, 0]],
                       sh0=[[0.3, -0.2, 0.1]], density_logit=[density], blur_raw=[blur], depth=[center[2]],
                       footprint=[[0.01, 0.01, 0.01]], source=[[0, 0, 0]])


class TestSignedDistance:
    @given(st.integers(0, 2**31 - 1))
    def test_against_polygon_oracle(self, seed):
        rng = np.random.default_rng(seed)
        xy = rng.uniform(0, 20, (1, 3, 2))
        e1, e2 = xy[0, 1] - xy[0, 0], xy[0, 2] - xy[0, 0]
        orient = float(np.sign(e1[0] * e2[1] - e1[1] * e2[0]))
        poly = Polygon(xy[0])
        for px, py in rng.uniform(-5, 25, (20, 2)):
            d = _kernels._signed_distance(px, py, xy, 0, orient)[0]
            ref = poly.exterior.distance(Point(px, py))
            ref = ref if poly.contains(Point(px, py)) else -ref
            assert d == pytest.approx(ref, abs=1e-9)

    def test_window(self):
        assert _kernels._window(-1.0, 1.0)[0] == 0.0
        assert _kernels._window(0.0, 1.0)[0] == 0.5
        assert _kernels._window(1.0, 1.0)[0] == 1.0


class TestProjection:
    def test_pinhole(self):
        tris = one_triangle()
        intr = Intrinsics(100.0, 100.0, 64.0, 64.0, 128, 128)
        sc = project_triangles(tris, CameraPose.identity(), intr, FINAL)
        cam = sc.cam[0]
        np.testing.assert_allclose(sc.xy[0], np.stack([100 * cam[:, 0] / cam[:, 2] + 64,
                                                       100 * cam[:, 1] / cam[:, 2] + 64], 1))
        # fronto-parallel: vertex mean projects to centre plus the template offset
        s = sc.state.scales[0]
        np.testing.assert_allclose(sc.xy[0].mean(0), [64.0, 64.0 + 100 * TEMPLATE.mean(0)[1] * s[1]], atol=1e-12)

    def test_behind_culled(self):
        intr = Intrinsics(100.0, 100.0, 64.0, 64.0, 128, 128)
        assert len(project_triangles(one_triangle(center=(0, 0, -1.0)), CameraPose.identity(), intr, FINAL)) == 0

    def test_camera_translation_shift(self):
        intr = Intrinsics(100.0, 100.0, 64.0, 64.0, 128, 128)
        tris = one_triangle(center=(0.0, 0.0, 2.0))
        a = project_triangles(tris, CameraPose.identity(), intr, FINAL).xy[0]
        b = project_triangles(tris, CameraPose(np.eye(3), [0.1, 0, 0]), intr, FINAL).xy[0]
        np.testing.assert_allclose(b[:, 0] - a[:, 0], -100 * 0.1 / 2.0, atol=1e-12)
        np.testing.assert_allclose(b[:, 1], a[:, 1], atol=1e-12)


class TestBinning:
    def test_full_image(self):
        bins = bin_tiles(screen(BIG, size=32), 8)
        assert np.all(np.diff(bins.offsets) == 1)

    def test_single_tile(self):
        bins = bin_tiles(screen([[9, 9], [13, 9], [9, 13]], size=32), 8)
        counts = np.diff(bins.offsets)
        assert counts.sum() == 1 and counts[1 * 4 + 1] == 1

    def test_tie_by_id(self):
        sc = screen([BIG, BIG], depth=[2.0, 2.0], size=32)
        bins = bin_tiles(sc, 8)
        for t in range(16):
            assert list(bins.tile_list(t)) == [0, 1]

    def test_depth_order(self):
        sc = screen([BIG, BIG], depth=[3.0, 2.0], size=16)
        assert list(bin_tiles(sc, 8).tile_list(0)) == [1, 0]

    def test_tile_too_small(self):
        with pytest.raises(InvalidInputError):
            bin_tiles(screen(BIG), 2)


class TestCompositeForward:
    def test_empty(self):
        out = forward(screen(np.zeros((0, 3, 2))), bg=(0.1, 0.2, 0.3))
        np.testing.assert_array_equal(out.rgb, np.broadcast_to([0.1, 0.2, 0.3], (16, 16, 3)))
        assert not out.alpha.any()

    def test_single_opaque(self):
        out = forward(screen(BIG, depth=[2.5], color=[0.2, 0.4, 0.6]))
        np.testing.assert_array_equal(out.rgb[5, 5], [0.2, 0.4, 0.6])
        assert out.alpha[5, 5] == 1.0 and out.depth[5, 5] == 2.5

    def test_two_half(self):
        c1, c2, bg = np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0])
        out = forward(screen([BIG, BIG], depth=[1.0, 2.0], color=[c1, c2], opacity=[0.5, 0.5]), bg=bg)
        np.testing.assert_allclose(out.rgb[3, 7], 0.5 * c1 + 0.25 * c2 + 0.25 * bg, atol=1e-15)
        assert out.alpha[3, 7] == pytest.approx(0.75)
        assert out.depth[3, 7] == pytest.approx((0.5 * 1 + 0.25 * 2) / 0.75)

    def test_transmittance_cutoff(self):
        out = forward(screen([BIG] * 3, depth=[1.0, 2.0, 3.0], color=[[1, 0, 0], [0, 1, 0], [0, 0, 1]],
                             opacity=[1.0, 0.5, 0.5]))
        np.testing.assert_array_equal(out.rgb[0, 0], [1, 0, 0])

    @given(st.integers(0, 2**31 - 1))
    def test_alpha_range_and_background(self, seed):
        rng = np.random.default_rng(seed)
        n = 12
        sc = screen(rng.uniform(-4, 20, (n, 3, 2)), depth=rng.uniform(1, 3, n), color=rng.random((n, 3)),
                    opacity=rng.random(n), band=rng.uniform(0.1, 3, n))
        bg = np.array([0.3, 0.6, 0.9])
        out = forward(sc, bg=bg)
        assert out.alpha.min() >= 0 and out.alpha.max() <= 1
        assert out.rgb.min() >= 0 and out.rgb.max() <= 1
        np.testing.assert_array_equal(out.rgb[out.alpha == 0], np.broadcast_to(bg, (int((out.alpha == 0).sum()), 3)))

    @given(st.integers(0, 2**31 - 1))
    def test_alpha_monotone_in_primitives(self, seed):
        rng = np.random.default_rng(seed)
        n = 8
        xy, d = rng.uniform(-4, 20, (n, 3, 2)), rng.uniform(1, 3, n)
        op, band = rng.random(n), rng.uniform(0.1, 3, n)
        order = np.argsort(d)
        prev = np.zeros((16, 16))
        for k in range(1, n + 1):
            keep = order[:k]
            a = forward(screen(xy[keep], depth=d[keep], opacity=op[keep], band=band[keep])).alpha
            assert np.all(a >= prev - 1e-15)
            prev = a


class TestCompositeBackward:
    def test_zero_upstream(self):
        sc = screen([BIG, BIG], depth=[1.0, 2.0], opacity=[0.5, 0.5])
        g = composite_backward(bin_tiles(sc), sc, np.zeros((16, 16, 3)))
        assert not g.color.any() and not g.opacity.any() and not g.xy.any()

    def test_single_red(self):
        sc = screen(BIG, opacity=[0.7])
        up = np.zeros((16, 16, 3))
        up[4, 4, 0] = 1.0
        g = composite_backward(bin_tiles(sc), sc, up)
        assert g.color[0, 0] == pytest.approx(0.7)

    def test_occluded(self):
        sc = screen([BIG, BIG], depth=[1.0, 2.0], opacity=[1.0, 0.5])
        g = composite_backward(bin_tiles(sc), sc, np.ones((16, 16, 3)), np.ones((16, 16)))
        assert not g.color[1].any() and g.opacity[1] == 0.0

    def test_opacity_hand_derivative(self):
        c1, c2, bg = np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0])
        sc = screen([BIG, BIG], depth=[1.0, 2.0], color=[c1, c2], opacity=[0.5, 0.5])
        up = np.zeros((16, 16, 3))
        up[2, 3] = [1.0, 2.0, 3.0]
        g = composite_backward(bin_tiles(sc), sc, up, background=bg)
        # rgb = a1 c1 + (1 - a1) a2 c2 + (1 - a1)(1 - a2) bg
        assert g.opacity[0] == pytest.approx(up[2, 3] @ (c1 - 0.5 * c2 - 0.5 * bg))
        assert g.opacity[1] == pytest.approx(up[2, 3] @ (0.5 * c2 - 0.5 * bg))

    def test_records_match_recompute(self):
        tris, pose, intr, sched = gradcheck_scene(3, 60, 32)
        out, ctx = render(tris, pose, intr, sched)
        G = np.random.default_rng(0).normal(size=(32, 32, 3))
        a = composite_backward(ctx.bins, ctx.screen, G, records=ctx.records)
        b = composite_backward(ctx.bins, ctx.screen, G)
        np.testing.assert_array_equal(a.xy, b.xy)

    def test_offscreen_zero(self):
        tris = TriangleSet.concatenate([one_triangle(), one_triangle(center=(50.0, 0, 1.0))])
        intr = Intrinsics(100.0, 100.0, 32.0, 32.0, 64, 64)
        _, ctx = render(tris, CameraPose.identity(), intr, FINAL)
        g = render_backward(ctx, np.ones((64, 64, 3)), np.ones((64, 64)), with_quat=True)
        for name in ("center", "scale_logits", "sh0", "density_logit", "blur_raw", "quat"):
            assert not getattr(g, name)[1].any()
            assert np.all(np.isfinite(getattr(g, name)))
        assert g.center[0].any()


def reference_composite(sc, t_min=1e-4):
    """Plain numpy compositor: every pixel against every triangle, no culling."""
    H, W = sc.height, sc.width
    py, px = np.mgrid[0:H, 0:W].astype(float)
    T = np.ones((H, W))
    rgb = np.zeros((H, W, 3))
    for m in np.lexsort((sc.ids, sc.zkey)):
        v = sc.xy[m]
        best = np.full((H, W), np.inf)
        inside = np.ones((H, W), dtype=bool)
        for e in range(3):
            a, b = v[e], v[(e + 1) % 3]
            ev = b - a
            rx, ry = px - a[0], py - a[1]
            inside &= (ev[0] * ry - ev[1] * rx) * sc.orient[m] >= 0
            t = np.clip((rx * ev[0] + ry * ev[1]) / (ev @ ev), 0.0, 1.0)
            best = np.minimum(best, np.hypot(rx - t * ev[0], ry - t * ev[1]))
        d = np.where(inside, best, -best)
        x = np.clip((d + sc.band[m]) / (2 * sc.band[m]), 0.0, 1.0)
        a = sc.opacity[m] * x * x * (3 - 2 * x) * (T >= t_min)
        rgb += (a * T)[..., None] * sc.color[m]
        T *= 1 - a
    return rgb, 1 - T


class TestForwardOracle:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_reference(self, seed):
        tris, pose, intr, sched = gradcheck_scene(seed, 40, 24)
        sc = project_triangles(tris, pose, intr, sched)
        out = composite_forward(bin_tiles(sc, 8), sc)
        rgb, alpha = reference_composite(sc)
        np.testing.assert_allclose(out.rgb, rgb, rtol=0, atol=1e-12)
        np.testing.assert_allclose(out.alpha, alpha, rtol=0, atol=1e-12)


class TestRecordBuffers:
    def test_reuse_matches_fresh(self):
        buf = RecordBuffers()
        G = np.random.default_rng(3).normal(size=(48, 48, 3))
        # large, small, large again: shrinking views and regrowth must not leak
        for seed, n in ((4, 200), (5, 20), (6, 240)):
            tris, pose, intr, sched = gradcheck_scene(seed, n, 48)
            out_a, ctx_a = render(tris, pose, intr, sched)
            out_b, ctx_b = render(tris, pose, intr, sched, buffers=buf)
            assert out_a.rgb.tobytes() == out_b.rgb.tobytes()
            ga = render_backward(ctx_a, G, with_quat=True)
            gb = render_backward(ctx_b, G, with_quat=True)
            for name in ("center", "scale_logits", "sh0", "density_logit", "blur_raw", "quat"):
                assert getattr(ga, name).tobytes() == getattr(gb, name).tobytes()


class TestDeterminism:
    def test_tiles_and_threads(self):
        tris, pose, intr, sched = gradcheck_scene(1, 120, 48)
        ref = None
        for tile in (8, 16, 32):
            for threads in (1, 4):
                out, _ = render(tris, pose, intr, sched, RenderConfig(tile=tile, threads=threads), record=False)
                arr = np.concatenate([out.rgb.ravel(), out.depth.ravel(), out.normal.ravel(), out.alpha.ravel()])
                if ref is None:
                    ref = arr
                assert arr.tobytes() == ref.tobytes()

    def test_backward_threads(self):
        tris, pose, intr, sched = gradcheck_scene(2, 120, 48)
        G = np.random.default_rng(1).normal(size=(48, 48, 3))
        for tile in (8, 16, 32):
            res = []
            for threads in (1, 2, 4):
                _, ctx = render(tris, pose, intr, sched, RenderConfig(tile=tile, threads=threads))
                res.append(render_backward(ctx, G, with_quat=True))
            for r in res[1:]:
                assert r.center.tobytes() == res[0].center.tobytes()
                assert r.quat.tobytes() == res[0].quat.tobytes()
            if tile == 8:
                first = res[0]
            else:
                # per-tile partials regroup across tile sizes: equal up to summation order
                np.testing.assert_allclose(res[0].center, first.center, rtol=1e-12, atol=1e-15)


class TestSoftToHard:
    def test_single_triangle_converges(self):
        from splatmesh.mesh import export_mesh
        from splatmesh.rasterizer import boundary_distance, rasterize_mesh_hard
        intr = Intrinsics(64.0, 64.0, 31.5, 31.5, 64, 64)
        tris = one_triangle(center=(0.05, -0.02, 1.0), scale_logit=-1.0, density=12.0, blur=-12.0,
                            quat=(np.cos(0.4), 0, 0, np.sin(0.4)))
        soft, _ = render(tris, CameraPose.identity(), intr, FINAL, record=False)
        mesh = export_mesh(tris)
        hard, _, _ = rasterize_mesh_hard(mesh.vertices, mesh.faces, mesh.colors, CameraPose.identity(), intr)
        near = boundary_distance(mesh.vertices, mesh.faces, CameraPose.identity(), intr) <= 1.0
        diff = np.abs(soft.rgb - hard).max(axis=-1) > 1e-6
        assert not (diff & ~near).any()


class TestGradcheck:
    def test_harness_passes(self):
        rep = finite_difference_check(*gradcheck_scene(5, 80, 32), per_param=10)
        assert rep.passed
        assert rep.color_max_rel < 1e-8

    def test_report_text(self):
        rep = finite_difference_check(*gradcheck_scene(6, 40, 32), per_param=3)
        txt = rep.to_text()
        assert "pass_fraction" in txt and "p95_rel" in txt and "max_rel" in txt
