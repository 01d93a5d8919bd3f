import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewbeam import synthetic as sy
from fewbeam.geometry import CameraIntrinsics, PoseSE3, rotation_from_rotvec
from fewbeam.pose import (
    CorrespondenceSet,
    PnPError,
    attach_depth,
    detect_and_match,
    filter_by_translation_median,
    harris_corners,
    p3p,
    pnp_ransac,
    reprojection_errors,
    solve_pnp,
)

from conftest import textured

K = sy.kitti_intrinsics()


def rotation_error_deg(A: PoseSE3, B: PoseSE3) -> float:
    c = (np.trace(A.R @ B.R.T) - 1) / 2
    return float(np.degrees(np.arccos(np.clip(c, -1, 1))))


def observe(pose, corr, K):
    Xs = pose.apply(corr.points_3d(K))
    return np.column_stack([K.fx * Xs[:, 0] / Xs[:, 2] + K.cx, K.fy * Xs[:, 1] / Xs[:, 2] + K.cy])


class TestMatching:
    @pytest.fixture
    def image(self, rng):
        return textured(rng, (60, 90), sigma=1.5)

    def test_identity_pair(self, image):
        matches = detect_and_match(image, image)
        assert len(matches) > 10
        for pt, ps in matches:
            assert pt == ps

    def test_constructed_shift(self, image):
        shifted = np.zeros_like(image)
        shifted[:, 3:] = image[:, :-3]
        matches = detect_and_match(image, shifted)
        assert len(matches) > 10
        d = np.array([np.subtract(ps, pt) for pt, ps in matches])
        med = np.median(d, axis=0)
        assert abs(med[0] - 3) <= 0.5 and abs(med[1]) <= 0.5

    def test_constant_image(self):
        img = np.full((40, 40, 3), 0.5)
        assert detect_and_match(img, img) == []

    def test_resolution_mismatch(self, image):
        with pytest.raises(ValueError):
            detect_and_match(image, image[:50])

    def test_keypoint_mask(self, image):
        mask = np.zeros(image.shape[:2], dtype=bool)
        mask[:, :45] = True
        corners = harris_corners(image[..., 0], mask=mask)
        assert len(corners) > 0
        assert all(u < 45 for u, _ in corners)


class TestAttachDepth:
    matches = [((2.0, 1.0), (3.0, 1.0)), ((4.4, 2.6), (5.0, 2.0)), ((0.0, 0.0), (1.0, 1.0))]

    def test_no_lidar(self):
        assert len(attach_depth(self.matches, np.zeros((5, 6)))) == 0

    def test_full_retention(self):
        corr = attach_depth(self.matches, np.full((5, 6), 7.0))
        assert len(corr) == 3
        np.testing.assert_array_equal(corr.depth, 7.0)

    def test_mixed(self):
        H = np.zeros((5, 6))
        H[1, 2] = 4.0
        H[3, 4] = 9.0  # (4.4, 2.6) rounds to column 4, row 3
        corr = attach_depth(self.matches, H)
        assert len(corr) == 2
        np.testing.assert_array_equal(corr.depth, [4.0, 9.0])
        np.testing.assert_array_equal(corr.p_s, [[3.0, 1.0], [5.0, 2.0]])

    def test_outside_image_dropped(self):
        assert len(attach_depth([((10.0, 10.0), (0.0, 0.0))], np.ones((5, 6)))) == 0

    def test_nonpositive_depth_rejected(self):
        with pytest.raises(ValueError):
            CorrespondenceSet([[0, 0]], [0.0], [[1, 1]])


class TestSolvePnP:
    def test_known_pose(self):
        corr, pose, _ = sy.pnp_problem(3, outlier_fraction=0.0, noise=0.0)
        est = solve_pnp(corr, K)
        assert np.radians(rotation_error_deg(est, pose)) < 1e-6
        assert np.linalg.norm(est.r - pose.r) < 1e-6

    def test_identity(self, rng):
        corr, _, _ = sy.pnp_problem(4, outlier_fraction=0.0, noise=0.0)
        corr = CorrespondenceSet(corr.p_t, corr.depth, corr.p_t)
        est = solve_pnp(corr, K)
        np.testing.assert_allclose(est.matrix, np.eye(4), atol=1e-9)

    def test_too_few_points(self):
        corr, _, _ = sy.pnp_problem(5, n=5, outlier_fraction=0.0, noise=0.0)
        with pytest.raises(PnPError):
            solve_pnp(corr, K)

    def test_degenerate_configuration(self):
        # all points on one ray: the linear system is rank deficient
        pt = np.tile([[600.0, 170.0]], (8, 1))
        corr = CorrespondenceSet(pt, np.linspace(5, 12, 8), pt)
        with pytest.raises(PnPError):
            solve_pnp(corr, K)

    def test_rotation_covariance(self, rng):
        corr, pose, _ = sy.pnp_problem(6, outlier_fraction=0.0, noise=0.0)
        Q = rotation_from_rotvec(rng.normal(0, 0.02, 3))
        X2 = corr.points_3d(K) @ Q.T
        p_t2 = np.column_stack([K.fx * X2[:, 0] / X2[:, 2] + K.cx, K.fy * X2[:, 1] / X2[:, 2] + K.cy])
        est = solve_pnp(CorrespondenceSet(p_t2, X2[:, 2], corr.p_s), K)
        np.testing.assert_allclose(est.R, pose.R @ Q.T, atol=1e-6)
        np.testing.assert_allclose(est.r, pose.r, atol=1e-6)

    @pytest.mark.parametrize("s", [0.5, 3.0])
    def test_metric_scale(self, s):
        corr, pose, _ = sy.pnp_problem(7, outlier_fraction=0.0, noise=0.0)
        est = solve_pnp(CorrespondenceSet(corr.p_t, s * corr.depth, corr.p_s), K)
        assert np.linalg.norm(est.r) == pytest.approx(s * np.linalg.norm(pose.r), rel=1e-6)


class TestP3P:
    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_true_pose_among_solutions(self, seed):
        corr, pose, _ = sy.pnp_problem(seed, n=3, outlier_fraction=0.0, noise=0.0)
        X = corr.points_3d(K)
        f = pose.apply(X)
        sols = p3p(X, f / np.linalg.norm(f, axis=1, keepdims=True))
        assert 1 <= len(sols) <= 4
        err = min(np.abs(P.matrix - pose.matrix).max() for P in sols)
        assert err < 1e-6

    def test_collinear_returns_nothing_useful(self):
        X = np.array([[0.0, 0, 5], [0, 0, 5], [1, 0, 5]])
        assert p3p(X, X) == []


class TestRansac:
    def test_outlier_free(self):
        corr, pose, _ = sy.pnp_problem(8, outlier_fraction=0.0, noise=0.0)
        res = pnp_ransac(corr, K, seed=0)
        assert res.inliers.all()
        direct = solve_pnp(corr, K)
        np.testing.assert_allclose(res.pose.matrix, direct.matrix, atol=1e-8)
        assert res.mean_error < 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_thirty_percent_outliers(self, seed):
        corr, pose, outliers = sy.pnp_problem(seed)
        res = pnp_ransac(corr, K, seed=seed)
        assert rotation_error_deg(res.pose, pose) < 0.5
        assert np.linalg.norm(res.pose.r - pose.r) / np.linalg.norm(pose.r) < 0.01
        assert not res.inliers[outliers].any()
        assert res.num_inliers >= 60

    def test_ninety_percent_outliers(self):
        corr, _, _ = sy.pnp_problem(9, outlier_fraction=0.9)
        with pytest.raises(PnPError):
            pnp_ransac(corr, K, seed=0)

    def test_too_few(self):
        corr, _, _ = sy.pnp_problem(10, n=5)
        with pytest.raises(PnPError):
            pnp_ransac(corr, K)

    def test_seeded_reproducibility(self):
        corr, _, _ = sy.pnp_problem(11)
        a, b = pnp_ransac(corr, K, seed=5), pnp_ransac(corr, K, seed=5)
        assert a.pose.matrix.tobytes() == b.pose.matrix.tobytes()
        np.testing.assert_array_equal(a.inliers, b.inliers)

    @pytest.mark.parametrize("seed", range(4))
    def test_refit_not_worse_than_hypothesis(self, seed):
        # least squares refinement: compare the quantity it minimises
        corr, _, _ = sy.pnp_problem(20 + seed)
        res = pnp_ransac(corr, K, seed=seed)
        inl = corr.subset(res.inliers)
        X = inl.points_3d(K)
        rms = lambda P: np.sqrt(np.mean(reprojection_errors(P, X, inl.p_s, K) ** 2))
        assert rms(res.pose) <= rms(res.hypothesis) + 1e-12

    def test_error_is_over_inliers(self):
        corr, _, _ = sy.pnp_problem(12)
        res = pnp_ransac(corr, K, seed=1)
        inl = corr.subset(res.inliers)
        expected = reprojection_errors(res.pose, inl.points_3d(K), inl.p_s, K).mean()
        assert res.mean_error == pytest.approx(expected, rel=1e-12)


class TestMedianFilter:
    def test_equal(self):
        assert filter_by_translation_median([2.0] * 5).all()

    def test_paper_style_example(self):
        np.testing.assert_array_equal(filter_by_translation_median([1, 1, 1, 1, 10], c=3), [True] * 4 + [False])

    def test_single(self):
        assert filter_by_translation_median([123.0]).tolist() == [True]

    def test_empty(self):
        with pytest.raises(ValueError):
            filter_by_translation_median([])
