import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from splatmesh.errors import FitDivergedError, InvalidInputError
from splatmesh.fit import (Adam, FitConfig, LossWeights, SceneObjective, View, camera_pair_loss, fit_scene, huber,
                           large_loss_filter, photometric_loss, total_loss)
from splatmesh.rasterizer import RenderConfig, render
from splatmesh.scene import CameraPose, Intrinsics
from splatmesh.triangles import ScheduleConfig, TriangleSet, schedule_state

seeds = st.integers(0, 2**31 - 1)
INTR = Intrinsics(16.0, 16.0, 7.5, 7.5, 16, 16)


def random_pose(seed):
    return CameraPose(Rotation.random(random_state=seed).as_matrix(), np.random.default_rng(seed).normal(size=3))


def cover_triangle(sh0=(0.0, 0.0, 0.0)):
    """One primitive facing the camera and covering the whole 16x16 view."""
    return TriangleSet(center=[[0.0, 0.0, 1.0]], scale_logits=[[4.0, 4.0, 4.0]], quat=[[1.0, 0, 0, 0]],
                       cam_quat=[[1.0, 0, 0, 0]], sh0=[sh0], density_logit=[12.0], blur_raw=[-3.0], depth=[1.0],
                       footprint=[INTR.footprint()], source=[[0, 7, 7]])


@pytest.fixture
def small_scene():
    rng = np.random.default_rng(7)
    n = 30
    c = np.stack([rng.uniform(-0.4, 0.4, n), rng.uniform(-0.4, 0.4, n), rng.uniform(1.5, 2.5, n)], axis=1)
    q = Rotation.random(n, random_state=3).as_quat()[:, [3, 0, 1, 2]]
    q[q[:, 0] < 0] *= -1
    tris = TriangleSet(center=c, scale_logits=rng.normal(-1.5, 0.3, (n, 3)), quat=q,
                       cam_quat=np.tile([1.0, 0, 0, 0], (n, 1)), sh0=rng.normal(0, 0.5, (n, 3)),
                       density_logit=rng.normal(0, 1, n), blur_raw=rng.normal(0, 0.5, n), depth=c[:, 2],
                       footprint=np.tile(INTR.footprint(), (n, 1)), source=np.zeros((n, 3)))
    target = rng.uniform(0, 1, (16, 16, 3))
    return tris, [View(target, CameraPose.identity(), INTR)]


class TestPhotometric:
    def test_identical(self):
        a = np.random.default_rng(0).random((4, 4, 3))
        assert photometric_loss(a, a) == 0.0

    def test_half(self):
        assert photometric_loss(np.full((3, 3, 3), 0.5), np.zeros((3, 3, 3))) == 0.25

    def test_single_pixel(self):
        a = np.zeros((5, 4, 3))
        b = a.copy()
        b[2, 1, 1] = 1.0
        assert photometric_loss(a, b) == pytest.approx(1 / (3 * 20))

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            photometric_loss(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


class TestCameraPairLoss:
    def test_equal(self):
        poses = [random_pose(s) for s in range(4)]
        assert camera_pair_loss(poses, poses) == (0.0, False)

    def test_flip_about_z(self):
        gt = [CameraPose.identity(), CameraPose.identity()]
        flip = Rotation.from_euler("z", 180, degrees=True).as_matrix()
        pred = [CameraPose.identity(), CameraPose(flip)]
        val = camera_pair_loss(pred, gt, LossWeights(omega_t=0.0, omega_r=1.0)).value
        assert val == pytest.approx(2 * np.pi)

    def test_too_few(self):
        assert camera_pair_loss([CameraPose.identity()], [CameraPose.identity()]) == (0.0, True)

    def test_huber(self):
        np.testing.assert_allclose(huber([0.05, 0.3], 0.1), [0.5 * 0.05**2, 0.1 * (0.3 - 0.05)])

    @given(seeds, seeds)
    def test_frame_invariance(self, s1, s2):
        pred = [random_pose(s1 + k) for k in range(3)]
        gt = [random_pose(s2 + k) for k in range(3)]
        G = random_pose(s1 ^ s2)
        moved = [G.compose(p) for p in pred]
        assert camera_pair_loss(moved, gt).value == pytest.approx(camera_pair_loss(pred, gt).value, abs=1e-9)


class TestTotalLossAndFilter:
    def test_zero(self):
        assert total_loss(0.0, 0.0, 0.0) == 0.0

    def test_unit_weights(self):
        w = LossWeights(lambda_photo=1, lambda_cam=1, lambda_normal=1)
        assert total_loss(0.1, 0.2, 0.3, w) == pytest.approx(0.6)

    def test_non_finite(self):
        with pytest.raises(InvalidInputError):
            total_loss(np.nan, 0.0, 0.0)

    def test_invalid_weights(self):
        with pytest.raises(InvalidInputError):
            LossWeights(lambda_mse=-1.0)
        with pytest.raises(InvalidInputError):
            LossWeights(huber_delta=0.0)

    def test_truth_table(self):
        cfg = FitConfig(steps=1000)
        assert cfg.filter_activation == 100
        assert large_loss_filter(5.0, 5.0, 5.0, 99, cfg) == 1.0
        assert large_loss_filter(0.19, 0.05, 0.5, 100, cfg) == 1.0
        assert large_loss_filter(0.19, 0.07, 0.5, 100, cfg) == 1e-4
        assert large_loss_filter(0.21, 0.05, 0.5, 100, cfg) == 1e-4
        assert large_loss_filter(0.19, 0.05, 1.01, 100, cfg) == 1e-4
        assert large_loss_filter(0.2, 0.06, 1.0, 100, cfg) == 1.0

    @given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.integers(0, 3000))
    def test_positive_scale(self, a, b, c, t):
        assert large_loss_filter(a, b, c, t, FitConfig()) > 0

    def test_zero_weight_removes_pathway(self, small_scene):
        tris, views = small_scene
        teacher = [None]
        cfg = FitConfig(steps=1, optimize_rotations=True)
        w0 = LossWeights(lambda_normal=0.0)
        obj = SceneObjective(tris.copy(), views, teacher, cfg, w0)
        _, g_a = obj.evaluate(obj.initial_params(), 0)
        from splatmesh.normals import NormalField
        tch = [NormalField(np.tile([0, 0, -1.0], (16, 16, 1)), np.ones((16, 16), bool))]
        obj = SceneObjective(tris.copy(), views, tch, cfg, w0)
        _, g_b = obj.evaluate(obj.initial_params(), 0)
        np.testing.assert_array_equal(g_a["quat"], g_b["quat"])


class TestAdam:
    def test_first_step(self):
        p = {"x": np.array([1.0, -2.0])}
        Adam({"x": 0.1}).step(p, {"x": np.array([0.5, -3.0])})
        np.testing.assert_allclose(p["x"], [0.9, -1.9], atol=1e-7)

    def test_quadratic(self):
        p = {"x": np.array([3.0])}
        opt = Adam({"x": 0.1})
        for _ in range(500):
            opt.step(p, {"x": 2 * p["x"]})
        assert abs(p["x"][0]) < 1e-2


class TestObjectiveGradients:
    @pytest.mark.parametrize("group", ["center", "scale_logits", "sh0", "density_logit", "blur_raw"])
    def test_against_central_differences(self, small_scene, group):
        tris, views = small_scene
        cfg = FitConfig(steps=100, schedule=ScheduleConfig().rescaled(0.01))
        obj = SceneObjective(tris.copy(), views, None, cfg)
        params = obj.initial_params()
        parts, g = obj.evaluate(params, 40)
        rng = np.random.default_rng(0)
        h = 1e-3 if group == "sh0" else 1e-6
        errs = []
        for _ in range(12):
            idx = tuple(int(rng.integers(s)) for s in params[group].shape)
            p1 = {k: v.copy() for k, v in params.items()}
            p2 = {k: v.copy() for k, v in params.items()}
            p1[group][idx] += h
            p2[group][idx] -= h
            fd = (obj.evaluate(p1, 40, False)[0]["total"] - obj.evaluate(p2, 40, False)[0]["total"]) / (2 * h)
            errs.append(abs(fd - g[group][idx]) / max(abs(fd), abs(g[group][idx]), 1e-9))
        assert np.mean(np.array(errs) < 1e-3) >= 0.9


class TestFitScene:
    def test_zero_steps(self, small_scene):
        tris, views = small_scene
        res = fit_scene(tris, views, cfg=FitConfig(steps=0))
        np.testing.assert_array_equal(res.scene.center, tris.center)
        assert res.history == []

    def test_no_views(self, small_scene):
        with pytest.raises(InvalidInputError):
            fit_scene(small_scene[0], [])

    def test_color_converges(self):
        target = np.broadcast_to([0.3, 0.6, 0.8], (16, 16, 3)).copy()
        views = [View(target, CameraPose.identity(), INTR)]
        res = fit_scene(cover_triangle(), views, cfg=FitConfig(steps=500))
        out, _ = render(res.scene, CameraPose.identity(), INTR, schedule_state(500), record=False)
        assert np.abs(out.rgb - target).max() < 1e-3
        hist = np.array([h["total"] for h in res.history])
        assert np.all(np.diff(hist[10:]) <= 1e-6)

    def test_diverged_snapshot(self):
        target = np.full((16, 16, 3), np.nan)
        with pytest.raises(FitDivergedError) as exc:
            fit_scene(cover_triangle(), [View(target, CameraPose.identity(), INTR)], cfg=FitConfig(steps=3))
        assert exc.value.snapshot["step"] == 0
        assert isinstance(exc.value.snapshot["scene"], TriangleSet)

    def test_deterministic(self, small_scene):
        tris, views = small_scene
        cfg = FitConfig(steps=5)
        a = fit_scene(tris, views, cfg=cfg)
        b = fit_scene(tris, views, cfg=cfg)
        assert a.scene.center.tobytes() == b.scene.center.tobytes()
        assert [h["total"] for h in a.history] == [h["total"] for h in b.history]

    def test_rotations_fixed_by_default(self, small_scene):
        tris, views = small_scene
        res = fit_scene(tris, views, cfg=FitConfig(steps=3))
        np.testing.assert_array_equal(res.scene.quat, tris.quat)


class TestParallelViews:
    def test_threads_bit_identical(self, small_scene):
        tris, views = small_scene
        views = views + [View(views[0].image[::-1].copy(), views[0].pose, INTR)]
        runs = []
        for threads in (1, 2, 4):
            cfg = FitConfig(steps=3, render=RenderConfig(threads=threads))
            runs.append(fit_scene(tris, views, cfg=cfg))
        for r in runs[1:]:
            assert r.scene.center.tobytes() == runs[0].scene.center.tobytes()
            assert r.scene.sh0.tobytes() == runs[0].scene.sh0.tobytes()
