import numpy as np
import pytest

from fewbeam import synthetic as sy
from fewbeam.field import DepthField
from fewbeam.geometry import PoseSE3, transform_coords
from fewbeam.losses import LossConfig, LossInputs, total_loss_and_gradient
from fewbeam.optimizer import (
    LossTrace,
    OptimizationDiverged,
    OptimizeConfig,
    ScenarioConfig,
    apply_pose_scaling,
    blur_stage,
    optimize_depth,
    run_infinite_depth_scenario,
)

K = sy.default_intrinsics(48, 160)
EGO = sy.EgoMotion((0.5, 0.0, 0.0))


@pytest.fixture(scope="module")
def triplet():
    return sy.make_triplet(sy.benchmark_scene(0), K, EGO, sy.four_beam_spec(), seed=0)


@pytest.fixture(scope="module")
def masked_run(triplet):
    t = triplet
    cfg = OptimizeConfig(learning_rate=0.02, steps=300, multiscale_levels=4, supervision="masked")
    return optimize_depth(t.target, t.sources, t.lidar, t.poses, cfg, K)


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"learning_rate": 0.0}, {"steps": -1}, {"supervision": "lidar"}, {"pose_source": "imu"}, {"pose_scale_divisor": 0.0}, {"blur_sigmas": (2.0, -1.0)}],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ValueError):
            OptimizeConfig(**kwargs)

    def test_defaults(self):
        cfg = OptimizeConfig()
        assert (cfg.learning_rate, cfg.steps, cfg.init_depth) == (1e-4, 2000, 20.0)
        assert cfg.halve_lr_at_midpoint

    def test_loss_config(self):
        assert OptimizeConfig(supervision="photometric").loss_config().lidar_variant == "none"
        assert OptimizeConfig(supervision="hinted").loss_config().lidar_variant == "hinted"

    @pytest.mark.parametrize("steps,sigmas,expected", [(90, (4.0, 2.0), [0] * 30 + [1] * 30 + [2] * 31), (10, (), [0] * 11), (0, (3.0,), [1])])
    def test_blur_schedule(self, steps, sigmas, expected):
        assert [blur_stage(s, steps, sigmas) for s in range(steps + 1)] == expected


class TestPoseScaling:
    def test_unit(self, rng):
        poses = [PoseSE3.from_rotvec(rng.normal(size=3), rng.normal(size=3))]
        scaled, mult = apply_pose_scaling(poses, 1.0)
        assert mult == 1.0 and scaled[0] == poses[0]

    def test_divisor_ten(self):
        scaled, mult = apply_pose_scaling([PoseSE3(np.eye(3), [0.0, 0.0, 5.0])], 10.0)
        np.testing.assert_array_equal(scaled[0].r, [0.0, 0.0, 0.5])
        assert mult == 10.0

    def test_geometry_preserved(self, triplet):
        t = triplet
        scaled, mult = apply_pose_scaling(t.poses, 10.0)
        for p, q in zip(t.poses, scaled):
            a = transform_coords(K, t.depth, p)
            b = transform_coords(K, t.depth / mult, q)
            np.testing.assert_allclose(a[0], b[0], rtol=1e-12, atol=1e-9)

    def test_rejects(self):
        with pytest.raises(ValueError):
            apply_pose_scaling([], 0.0)


class TestTrace:
    def test_steps_increase(self):
        tr = LossTrace()
        terms = {"photometric": 1.0, "lidar": 0.0, "smoothness": 0.0}
        tr.append(0, 1.0, terms, 1e-3)
        with pytest.raises(ValueError):
            tr.append(0, 1.0, terms, 1e-3)

    def test_csv(self, tmp_path):
        tr = LossTrace()
        tr.append(0, 0.5, {"photometric": 0.25, "lidar": 0.25, "smoothness": 0.0}, 1e-3)
        tr.write_csv(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == ",".join(LossTrace.COLUMNS)
        assert lines[1].split(",")[:3] == ["0", "0.5", "0.25"]


class TestOptimize:
    def test_zero_steps(self, triplet):
        t = triplet
        res = optimize_depth(t.target, t.sources, t.lidar, t.poses, OptimizeConfig(steps=0), K)
        np.testing.assert_allclose(res.depth, 20.0, rtol=1e-12)
        assert len(res.trace) == 1

    def test_needs_sources(self, triplet):
        with pytest.raises(ValueError):
            optimize_depth(triplet.target, [], None, [], OptimizeConfig(steps=1), K)

    def test_lidar_required(self, triplet):
        t = triplet
        with pytest.raises(ValueError):
            optimize_depth(t.target, t.sources, None, t.poses, OptimizeConfig(steps=1, supervision="masked"), K)

    def test_divergence_carries_trace(self, triplet):
        t = triplet
        H = t.lidar.copy()
        H[H > 0] = np.inf
        with pytest.raises(OptimizationDiverged) as exc:
            optimize_depth(t.target, t.sources, H, t.poses, OptimizeConfig(steps=3, supervision="naive"), K)
        assert len(exc.value.trace) == 1

    def test_learning_rate_halved(self, triplet):
        t = triplet
        res = optimize_depth(t.target, t.sources, None, t.poses, OptimizeConfig(steps=4, learning_rate=0.01, supervision="photometric"), K)
        np.testing.assert_allclose(res.trace.column("learning_rate"), [0.01, 0.01, 0.005, 0.005, 0.005])

    def test_masked_recovers_metric_depth(self, masked_run, triplet):
        # textured pixels: a 3x3 window with visible intensity variation
        from scipy import ndimage

        g = triplet.target.mean(axis=-1)
        textured = (ndimage.maximum_filter(g, 3) - ndimage.minimum_filter(g, 3)) > 0.05
        rel = np.abs(masked_run.depth / triplet.depth - 1)
        assert np.median(rel[textured]) < 0.05

    def test_lidar_ratio(self, masked_run, triplet):
        v = triplet.lidar > 0
        assert np.median(masked_run.depth[v] / triplet.lidar[v]) == pytest.approx(1.0, abs=0.02)

    def test_trace_decreases(self, masked_run):
        # any rise inside a 50-step window stays below 5% of the window start
        total = masked_run.trace.column("total")
        w = 50
        for i in range(len(total) - 1):
            assert total[i : i + w + 1].max() < 1.05 * total[i]
        assert total[-1] < 0.1 * total[0]

    @pytest.mark.parametrize("s", [0.5, 1.5])
    def test_photometric_argmin_family(self, triplet, s):
        # the fitted depth scaled with the translations is an equally good fit
        t = triplet
        cfg = OptimizeConfig(learning_rate=0.02, steps=100, multiscale_levels=4, supervision="photometric")
        depth = optimize_depth(t.target, t.sources, None, t.poses, cfg, K).depth
        assert depth.max() * s < 100.0
        losses = []
        for k in (1.0, s):
            f = DepthField(K.shape)
            f.set_flat(f.encode(k * depth).ravel())
            inputs = LossInputs(t.target, t.sources, [p.with_translation(k * p.r) for p in t.poses], K)
            losses.append(total_loss_and_gradient(f, inputs, LossConfig(lidar_variant="none"), want_grad=False)[0])
        assert losses[0] == pytest.approx(losses[1], abs=1e-4)

    def test_prescaled_run_matches_with_divisor(self, triplet):
        t = triplet
        totals = []
        for s in (1.0, 4.0):
            poses = [p.with_translation(s * p.r) for p in t.poses]
            cfg = OptimizeConfig(learning_rate=0.02, steps=40, supervision="photometric", init_depth=20.0 * s, pose_scale_divisor=s)
            res = optimize_depth(t.target, t.sources, None, poses, cfg, K)
            totals.append(res.trace.column("total"))
        np.testing.assert_allclose(totals[0], totals[1], atol=1e-4)

    def test_multiscale_spreads_lidar_gradient(self, triplet):
        t = triplet
        inputs = LossInputs(t.target, t.sources, t.poses, K, t.lidar)
        counts = []
        for levels in (1, 4):
            f = DepthField(K.shape, levels=levels)
            grads = []
            for w in (1.0, 0.0):
                cfg = LossConfig(lidar_weight=w, lidar_variant="naive", multiscale_levels=levels, smooth_weight=0.0)
                grads.append(total_loss_and_gradient(f, inputs, cfg)[1])
            counts.append(int(np.count_nonzero(grads[0] - grads[1])))
        assert counts[1] > counts[0] > 0


class TestScenario:
    def test_without_box(self):
        cfg = ScenarioConfig(seed=0, height=48, width=160, steps=150, with_box=False, smooth_weight=1.0)
        r = run_infinite_depth_scenario(cfg)
        assert r.r_box_photometric is None and r.r_box_masked is None
        static = r.gt_depth > 0
        ratio = np.median(r.depth_photometric[static] / r.depth_masked[static])
        assert ratio == pytest.approx(1.0, abs=0.05)
