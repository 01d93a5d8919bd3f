import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from fewbeam import io
from fewbeam import synthetic as sy
from fewbeam.eval import InstanceMask
from fewbeam.geometry import CameraIntrinsics, PoseSE3
from fewbeam.pose import CorrespondenceSet


class TestVelodyne:
    def test_hand_bytes(self, tmp_path):
        p = tmp_path / "one.bin"
        p.write_bytes(struct.pack("<4f", 1.0, 2.0, 3.0, 0.5))
        np.testing.assert_array_equal(io.read_velodyne_bin(p), [[1.0, 2.0, 3.0, 0.5]])

    def test_empty(self, tmp_path):
        p = tmp_path / "empty.bin"
        p.write_bytes(b"")
        assert io.read_velodyne_bin(p).shape == (0, 4)

    def test_bad_size(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"\0" * 17)
        with pytest.raises(io.FormatError, match="offset 16"):
            io.read_velodyne_bin(p)

    def test_non_finite(self, tmp_path):
        p = tmp_path / "nan.bin"
        p.write_bytes(struct.pack("<8f", 0, 0, 0, 0, 1, float("nan"), 0, 0))
        with pytest.raises(io.FormatError, match="point 1 field 1"):
            io.read_velodyne_bin(p)

    def test_round_trip_order(self, tmp_path, rng):
        cloud = rng.normal(size=(50, 4)).astype(np.float32).astype(np.float64)
        io.write_velodyne_bin(tmp_path / "c.bin", cloud)
        np.testing.assert_array_equal(io.read_velodyne_bin(tmp_path / "c.bin"), cloud)

    def test_xyz_gets_zero_intensity(self, tmp_path):
        io.write_velodyne_bin(tmp_path / "c.bin", [[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(io.read_velodyne_bin(tmp_path / "c.bin"), [[1, 2, 3, 0]])


class TestDepthPng:
    def test_convention(self, tmp_path):
        io.write_depth_png16(tmp_path / "d.png", np.array([[1.0, 0.0]]))
        raw = np.array(Image.open(tmp_path / "d.png"))
        assert raw.tolist() == [[256, 0]]

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(0, 65535), min_size=6, max_size=6))
    def test_round_trip(self, tmp_path_factory, stored):
        d = np.array(stored, dtype=np.float64).reshape(2, 3) / 256
        p = tmp_path_factory.mktemp("png") / "d.png"
        io.write_depth_png16(p, d)
        np.testing.assert_array_equal(io.read_depth_png16(p), d)

    def test_too_deep(self, tmp_path):
        with pytest.raises(ValueError):
            io.write_depth_png16(tmp_path / "d.png", np.array([[256.0]]))

    def test_eight_bit_rejected(self, tmp_path):
        Image.fromarray(np.zeros((2, 2), np.uint8)).save(tmp_path / "d.png")
        with pytest.raises(io.FormatError):
            io.read_depth_png16(tmp_path / "d.png")

    def test_rgb_round_trip(self, tmp_path, rng):
        img = rng.integers(0, 256, (4, 5, 3)) / 255.0
        io.write_rgb_png(tmp_path / "i.png", img)
        np.testing.assert_allclose(io.read_rgb_png(tmp_path / "i.png"), img, atol=1e-12)

    def test_instances(self, tmp_path):
        a = np.zeros((4, 4), bool)
        a[1:3, 1:3] = True
        b = np.zeros((4, 4), bool)
        b[0, 0] = True
        io.write_instance_png(tmp_path / "m.png", [InstanceMask(a, 7), InstanceMask(b, 300)], (4, 4))
        back = {m.instance_id: m.mask for m in io.read_instance_png(tmp_path / "m.png")}
        assert set(back) == {7, 300}
        np.testing.assert_array_equal(back[7], a)


class TestText:
    @settings(max_examples=50, deadline=None)
    @given(
        st.floats(1e-3, 1e4),
        st.floats(1e-3, 1e4),
        st.floats(0, 99.999),
        st.floats(0, 49.999),
    )
    def test_intrinsics_round_trip(self, fx, fy, cx, cy):
        K = CameraIntrinsics(fx, fy, cx, cy, 100, 50)
        assert io.parse_intrinsics(io.format_intrinsics(K)) == K

    @pytest.mark.parametrize("text", ["1 2 3", "1 1 0 0 10 10\n1 1 0 0 10 10", "1 1 0 0 10.5 10", "1 1 0 0 x 10", "-1 1 0 0 10 10"])
    def test_intrinsics_malformed(self, text):
        with pytest.raises(io.FormatError):
            io.parse_intrinsics(text)

    def test_poses_round_trip(self, tmp_path, rng):
        poses = [PoseSE3.from_rotvec(rng.normal(size=3), rng.normal(size=3)) for _ in range(3)]
        io.write_poses(tmp_path / "p.txt", poses)
        back = io.read_poses(tmp_path / "p.txt")
        for a, b in zip(poses, back):
            np.testing.assert_allclose(a.matrix, b.matrix, atol=1e-15)

    def test_poses_malformed(self, tmp_path):
        (tmp_path / "p.txt").write_text("1 0 0 0 0 1 0 0 0 0 1\n")
        with pytest.raises(io.FormatError, match=":1"):
            io.read_poses(tmp_path / "p.txt")
        (tmp_path / "q.txt").write_text("2 0 0 0 0 1 0 0 0 0 1 0\n")
        with pytest.raises(io.FormatError):
            io.read_poses(tmp_path / "q.txt")

    def test_correspondences(self, tmp_path, rng):
        c = CorrespondenceSet(rng.random((5, 2)), rng.uniform(1, 5, 5), rng.random((5, 2)))
        io.write_correspondences_csv(tmp_path / "c.csv", c)
        back = io.read_correspondences_csv(tmp_path / "c.csv")
        np.testing.assert_array_equal(back.p_t, c.p_t)
        np.testing.assert_array_equal(back.depth, c.depth)
        (tmp_path / "bad.csv").write_text("a,b\n")
        with pytest.raises(io.FormatError):
            io.read_correspondences_csv(tmp_path / "bad.csv")


SCENE_TEXT = """
# a co-moving box
seed = 3
background_depth = none
height = 48
width = 160
ego_translation = 1 0 0
box
  center = 0 0.85 8
  size = 2 1.6 2
  velocity = 1 0 0
box
  center = 3 0.5 12
"""


class TestConfigs:
    def test_scene(self):
        cfg = io.parse_scene_config(SCENE_TEXT)
        assert cfg.scene.background_depth is None
        assert cfg.K.shape == (48, 160)
        assert len(cfg.scene.boxes) == 2
        assert cfg.scene.boxes[0].velocity == (1.0, 0.0, 0.0)
        assert cfg.scene.boxes[1].size == (1.0, 1.0, 1.0)
        assert cfg.scene.boxes[1].texture_seed is None

    def test_scene_round_trip(self):
        cfg = io.parse_scene_config(SCENE_TEXT)
        text = io.format_scene_config(cfg)
        assert io.format_scene_config(io.parse_scene_config(text)) == text

    @pytest.mark.parametrize("text,where", [("colour = red", ":1"), ("seed = 1\nwheel", ":2"), ("box\n  radius = 2", ":2"), ("seed = x", ":1")])
    def test_scene_errors(self, text, where):
        with pytest.raises(io.FormatError, match=where):
            io.parse_scene_config(text)

    def test_run_config(self):
        out = io.parse_run_config("learning_rate = 0.02\nsteps = 10\nautomask = off\nblur_sigmas = 4, 2\nsupervision = hinted\n")
        assert out == {"learning_rate": 0.02, "steps": 10, "automask": False, "blur_sigmas": (4.0, 2.0), "supervision": "hinted"}

    def test_run_config_unknown(self):
        with pytest.raises(io.FormatError, match="momentum"):
            io.parse_run_config("momentum = 0.9")


class TestTriplet:
    def test_round_trip(self, tmp_path):
        cfg = io.parse_scene_config(SCENE_TEXT)
        t = sy.make_triplet(cfg.scene, cfg.K, cfg.ego, cfg.lidar, seed=cfg.seed)
        io.write_triplet(tmp_path / "trip", t)
        back = io.read_triplet(tmp_path / "trip")
        assert back.K == t.K
        np.testing.assert_allclose(back.target, t.target, atol=0.5 / 255 + 1e-12)
        quant = np.rint(t.depth * 256) / 256
        np.testing.assert_array_equal(back.depth, np.where(t.depth < 256, quant, 0))
        np.testing.assert_array_equal(back.lidar, np.rint(t.lidar * 256) / 256)
        assert len(back.poses) == 2 and back.extrinsics is not None
        assert {m.instance_id for m in back.instances} <= {1, 2}

    def test_missing_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            io.read_triplet(tmp_path / "nope")
