import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from splatmesh.errors import InvalidInputError, ParseError
from splatmesh.io import (parse_config, read_image, read_ppm, read_tspg, read_tspt, write_loss_csv, write_ppm,
                          write_tspg, write_tspt)
from splatmesh.triangles import ScheduleState, TriangleSet, schedule_state

VIEW = ("[view.a]\nimage = img.ppm\npoints = pts.tspg\npose = 1 0 0 0 1 0 0 0 1 0 0 0\n"
        "fx = 16\nfy = 16\ncx = 7.5\ncy = 7.5\n")


@pytest.fixture
def files(tmp_path):
    write_ppm(tmp_path / "img.ppm", np.zeros((4, 4, 3)))
    write_tspg(tmp_path / "pts.tspg", np.ones((4, 4, 3)))
    return tmp_path


def manifest(files, text):
    p = files / "m.cfg"
    p.write_text(text)
    return p


class TestTSPG:
    @given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4))))
    def test_bit_exact(self, grid):
        import tempfile
        with tempfile.TemporaryDirectory() as d:
            write_tspg(f"{d}/g.tspg", grid)
            back = read_tspg(f"{d}/g.tspg")
        assert back.shape == grid.shape and back.tobytes() == grid.tobytes()

    def test_header_layout(self, tmp_path):
        write_tspg(tmp_path / "g.tspg", np.zeros((2, 3)))
        data = (tmp_path / "g.tspg").read_bytes()
        assert data[:4] == b"TSPG" and len(data) == 20 + 2 * 3 * 4

    def test_truncated(self, tmp_path):
        write_tspg(tmp_path / "g.tspg", np.zeros((2, 3, 2)))
        (tmp_path / "g.tspg").write_bytes((tmp_path / "g.tspg").read_bytes()[:-1])
        with pytest.raises(ParseError):
            read_tspg(tmp_path / "g.tspg")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "g.tspg").write_bytes(b"XXXX" + bytes(40))
        with pytest.raises(ParseError):
            read_tspg(tmp_path / "g.tspg")


class TestTSPT:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        n = 7
        q = rng.normal(size=(n, 4))
        tris = TriangleSet(center=rng.normal(size=(n, 3)), scale_logits=rng.normal(size=(n, 3)),
                           quat=q / np.linalg.norm(q, axis=1, keepdims=True), cam_quat=np.tile([1.0, 0, 0, 0], (n, 1)),
                           sh0=rng.normal(size=(n, 3)), density_logit=rng.normal(size=n), blur_raw=rng.normal(size=n),
                           depth=rng.uniform(1, 2, n), footprint=rng.uniform(0.01, 0.1, (n, 3)),
                           source=rng.integers(0, 50, (n, 3)), fallback=rng.random(n) < 0.5)
        write_tspt(tmp_path / "s.tspt", tris)
        back = read_tspt(tmp_path / "s.tspt")
        for name in ("center", "scale_logits", "quat", "sh0", "density_logit", "blur_raw", "depth", "footprint",
                     "source", "fallback"):
            np.testing.assert_array_equal(getattr(back, name), getattr(tris, name))

    def test_empty(self, tmp_path):
        write_tspt(tmp_path / "e.tspt", TriangleSet.empty())
        assert len(read_tspt(tmp_path / "e.tspt")) == 0


class TestPPM:
    def test_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (5, 7, 3)) / 255.0
        write_ppm(tmp_path / "a.ppm", img)
        np.testing.assert_array_equal(read_image(tmp_path / "a.ppm"), img)

    def test_comment_header(self, tmp_path):
        (tmp_path / "c.ppm").write_bytes(b"P6\n# note\n1 1\n255\n" + bytes([255, 0, 51]))
        np.testing.assert_allclose(read_ppm(tmp_path / "c.ppm")[0, 0], [1.0, 0.0, 0.2])

    def test_truncated(self, tmp_path):
        (tmp_path / "t.ppm").write_bytes(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(ParseError):
            read_ppm(tmp_path / "t.ppm")

    def test_ascii_rejected(self, tmp_path):
        (tmp_path / "p3.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(ParseError):
            read_ppm(tmp_path / "p3.ppm")


class TestManifest:
    def test_minimal(self, files):
        m = parse_config(manifest(files, VIEW))
        assert len(m.views) == 1 and m.views[0].fx == 16
        assert m.schedule.tau_final == 5.0 and m.schedule.beta_final == 0.5

    def test_missing_keys_aggregated(self, files):
        text = VIEW.replace("fx = 16\n", "").replace("cy = 7.5\n", "")
        with pytest.raises(InvalidInputError) as exc:
            parse_config(manifest(files, text))
        assert "fx" in str(exc.value) and "cy" in str(exc.value)

    def test_tau_override(self, files):
        m = parse_config(manifest(files, "[schedule]\ntau_final = 5.0\ntau_init = 2.0\n" + VIEW))
        assert schedule_state(16000, m.schedule).tau == 5.0
        assert schedule_state(0, m.schedule).tau == 2.0
        assert ScheduleState.final(m.schedule).tau == 5.0

    def test_malformed_line(self, files):
        with pytest.raises(ParseError) as exc:
            parse_config(manifest(files, VIEW + "this is not a key\n"))
        assert exc.value.line == 9

    def test_bad_number(self, files):
        with pytest.raises(ParseError) as exc:
            parse_config(manifest(files, VIEW.replace("fx = 16", "fx = sixteen")))
        assert exc.value.line == 5

    def test_unknown_key_warns(self, files, caplog):
        with caplog.at_level(logging.WARNING):
            m = parse_config(manifest(files, "[fit]\nwobble = 3\n" + VIEW))
        assert any("wobble" in w for w in m.warnings)
        assert "wobble" in caplog.text

    def test_missing_file(self, files):
        with pytest.raises(InvalidInputError) as exc:
            parse_config(manifest(files, VIEW.replace("img.ppm", "nope.ppm")))
        assert "nope.ppm" in str(exc.value)

    def test_pose_snap_warning(self, files):
        m = parse_config(manifest(files, VIEW.replace("1 0 0 0 1 0 0 0 1", "1.01 0 0 0 1 0 0 0 1")))
        assert any("snapped" in w for w in m.warnings)
        np.testing.assert_allclose(m.views[0].pose.rotation, np.eye(3), atol=1e-12)

    def test_small_snap_silent(self, files):
        m = parse_config(manifest(files, VIEW.replace("1 0 0 0 1 0 0 0 1", "1.0001 0 0 0 1 0 0 0 1")))
        assert not m.warnings

    def test_pose_length(self, files):
        with pytest.raises(ParseError):
            parse_config(manifest(files, VIEW.replace("0 0 0\nfx", "0 0\nfx")))

    def test_no_views(self, files):
        with pytest.raises(InvalidInputError):
            parse_config(manifest(files, "[fit]\nsteps = 3\n"))

    def test_unreadable(self, tmp_path):
        with pytest.raises(InvalidInputError):
            parse_config(tmp_path / "absent.cfg")


def test_loss_csv(tmp_path):
    write_loss_csv(tmp_path / "l.csv", [{"step": 0, "total": 0.5, "mse": 0.25, "normal": 0.0, "cam": 0.0,
                                         "filter_scale": 1.0}])
    assert (tmp_path / "l.csv").read_text().splitlines() == ["step,total,mse,normal,cam,filter_scale",
                                                             "0,0.5,0.25,0.0,0.0,1.0"]
