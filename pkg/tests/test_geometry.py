import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_pose
from maslam.geometry import (AngleNearPi, DegenerateTrajectory, EmptyCloud,
                             PointCloud, SE3Pose, SpatialIndex, Twist, compose,
                             estimate_normals, inverse, nn_index, nn_query,
                             se3_exp, se3_log, transform_cloud, umeyama_align,
                             voxel_downsample, voxel_keys)


class TestExpLog:
    def test_zero_twist_is_identity(self):
        T = se3_exp(Twist(np.zeros(3), np.zeros(3)))
        assert np.allclose(T.matrix(), np.eye(4), atol=1e-15)

    def test_quarter_turn_about_z(self):
        T = se3_exp(Twist(np.zeros(3), np.array([0.0, 0.0, math.pi / 2])))
        assert np.allclose(T.apply(np.array([1.0, 0.0, 0.0])),
                           [0.0, 1.0, 0.0], atol=1e-12)
        assert np.allclose(T.t, 0.0)

    def test_round_trip_small_rotation(self):
        rng = np.random.default_rng(0)
        phi = rng.normal(0, 1, 3)
        phi *= 0.3 / np.linalg.norm(phi)
        xi = Twist(rng.normal(0, 1, 3), phi)
        back = se3_log(se3_exp(xi))
        assert np.abs(back.vector() - xi.vector()).max() < 1e-9

    def test_round_trip_1000_random(self):
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(1000):
            phi = rng.normal(0, 1.2, 3)
            n = np.linalg.norm(phi)
            if n > math.pi - 1e-3:
                phi *= (math.pi - 1e-3) / n
            xi = Twist(rng.normal(0, 2, 3), phi)
            back = se3_log(se3_exp(xi))
            worst = max(worst, np.abs(back.vector() - xi.vector()).max())
        assert worst < 1e-9

    def test_log_identity(self):
        xi = se3_log(SE3Pose.identity())
        assert np.abs(xi.vector()).max() == 0.0

    def test_log_pure_translation(self):
        T = SE3Pose(np.array([1.0, 0, 0, 0]), np.array([1.0, 2.0, 3.0]))
        xi = se3_log(T)
        assert np.allclose(xi.rho, [1, 2, 3], atol=1e-15)
        assert np.allclose(xi.phi, 0.0)

    def test_near_pi_raises(self):
        phi = np.array([0.0, 0.0, math.pi - 1e-9])
        T = se3_exp(Twist(np.zeros(3), phi))
        with pytest.raises(AngleNearPi):
            se3_log(T)

    def test_small_angle_branch(self):
        xi = Twist(np.array([0.1, -0.2, 0.3]), np.array([1e-10, -2e-10, 1e-10]))
        back = se3_log(se3_exp(xi))
        assert np.abs(back.vector() - xi.vector()).max() < 1e-12


class TestGroupOps:
    def test_compose_identity(self):
        rng = np.random.default_rng(2)
        T = random_pose(rng)
        TI = compose(T, SE3Pose.identity())
        assert np.array_equal(TI.q, T.q) and np.array_equal(TI.t, T.t)

    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            T = random_pose(rng)
            ident = compose(T, inverse(T))
            assert ident.rotation_angle() < 1e-9
            assert np.linalg.norm(ident.t) < 1e-9

    def test_associativity_and_matrix_consistency(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            a, b, c = (random_pose(rng) for _ in range(3))
            left = compose(compose(a, b), c)
            right = compose(a, compose(b, c))
            assert np.abs(left.matrix() - right.matrix()).max() < 1e-12
            assert np.abs(left.matrix() - a.matrix() @ b.matrix() @ c.matrix()).max() < 1e-12

    def test_quaternion_stays_normalized(self):
        rng = np.random.default_rng(5)
        T = random_pose(rng)
        for _ in range(10000):
            T = compose(T, random_pose(rng, 0.1, 0.1))
        assert abs(np.linalg.norm(T.q) - 1.0) < 1e-9

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_apply_matches_matrix(self, seed):
        rng = np.random.default_rng(seed)
        T = random_pose(rng)
        p = rng.normal(0, 5, 3)
        hom = T.matrix() @ np.append(p, 1.0)
        assert np.allclose(T.apply(p), hom[:3], atol=1e-12)


class TestTransformCloud:
    def _cloud(self, rng, n=50):
        normals = rng.normal(0, 1, (n, 3))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        return PointCloud(rng.normal(0, 2, (n, 3)), rng.uniform(0, 1, n), normals)

    def test_identity_bit_exact(self):
        rng = np.random.default_rng(6)
        cloud = self._cloud(rng)
        out = transform_cloud(SE3Pose.identity(), cloud)
        assert np.array_equal(out.points, cloud.points)
        assert np.array_equal(out.normals, cloud.normals)

    def test_round_trip(self):
        rng = np.random.default_rng(7)
        cloud = self._cloud(rng)
        T = random_pose(rng)
        back = transform_cloud(T, transform_cloud(inverse(T), cloud))
        assert np.abs(back.points - cloud.points).max() < 1e-9
        assert np.abs(back.normals - cloud.normals).max() < 1e-9

    def test_normals_rotate_only(self):
        rng = np.random.default_rng(8)
        cloud = self._cloud(rng)
        T = random_pose(rng, t_scale=10.0)
        out = transform_cloud(T, cloud)
        norms = np.linalg.norm(out.normals, axis=1)
        assert np.abs(norms - 1.0).max() < 1e-9


class TestVoxelDownsample:
    def test_cube_corners_to_centroid(self):
        pts = np.array([[x, y, z] for x in (0.0, 1.0) for y in (0.0, 1.0)
                        for z in (0.0, 1.0)])
        cloud = PointCloud(pts, np.arange(8) / 8.0)
        down = voxel_downsample(cloud, 10.0)
        assert len(down) == 1
        assert np.allclose(down.points[0], [0.5, 0.5, 0.5])
        assert np.isclose(down.intensities[0], np.mean(np.arange(8) / 8.0))

    def test_sparse_cloud_identity_up_to_order(self):
        rng = np.random.default_rng(9)
        pts = rng.uniform(0, 100, (50, 3))
        cloud = PointCloud(pts, rng.uniform(0, 1, 50))
        down = voxel_downsample(cloud, 0.5)
        assert len(down) == 50
        assert np.allclose(down.points[np.lexsort(down.points.T)],
                           pts[np.lexsort(pts.T)])

    def test_count_matches_bruteforce_hash(self):
        rng = np.random.default_rng(10)
        pts = rng.normal(0, 1.0, (10000, 3))
        cloud = PointCloud(pts, rng.uniform(0, 1, 10000))
        voxel = 0.05
        down = voxel_downsample(cloud, voxel)
        occupied = {tuple(k) for k in voxel_keys(pts, voxel)}
        assert len(down) == len(occupied)

    def test_points_inside_cells(self):
        rng = np.random.default_rng(11)
        pts = rng.normal(0, 1.0, (2000, 3))
        cloud = PointCloud(pts, np.zeros(2000))
        voxel = 0.1
        down = voxel_downsample(cloud, voxel)
        keys = voxel_keys(down.points, voxel)
        lo = keys * voxel
        assert np.all(down.points >= lo - 1e-12)
        assert np.all(down.points <= lo + voxel + 1e-12)

    def test_empty_raises(self):
        with pytest.raises(EmptyCloud):
            voxel_downsample(PointCloud(np.zeros((0, 3)), np.zeros(0)), 0.1)


class TestEstimateNormals:
    def test_plane_normals(self):
        rng = np.random.default_rng(12)
        pts = np.column_stack([rng.uniform(-1, 1, (500, 2)), np.zeros(500)])
        cloud = estimate_normals(PointCloud(pts, np.zeros(500)), k=8)
        nz = np.abs(cloud.normals[:, 2])
        assert np.all(nz > 1.0 - 1e-6)

    def test_sphere_normals_point_inward(self):
        rng = np.random.default_rng(13)
        dirs = rng.normal(0, 1, (2000, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        cloud = estimate_normals(PointCloud(dirs, np.zeros(2000)), k=10)
        inward = -dirs
        dots = np.einsum("ni,ni->n", cloud.normals, inward)
        assert np.mean(dots > 0.99) >= 0.95

    def test_collinear_neighborhood_marked_invalid(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        cloud = estimate_normals(PointCloud(pts, np.zeros(3)), k=3)
        assert not cloud.valid_normal_mask().any()


class TestSpatialIndex:
    def test_query_existing_point(self):
        rng = np.random.default_rng(14)
        pts = rng.normal(0, 1, (100, 3))
        idx = nn_index(PointCloud(pts, np.zeros(100)))
        i, d = nn_query(idx, pts[42])
        assert i == 42 and d == 0.0

    def test_query_beyond_max_dist(self):
        pts = np.zeros((5, 3))
        idx = nn_index(PointCloud(pts, np.zeros(5)))
        assert nn_query(idx, np.array([10.0, 0, 0]), max_dist=1.0) is None

    def test_matches_linear_scan(self):
        rng = np.random.default_rng(15)
        pts = rng.normal(0, 1, (500, 3))
        idx = nn_index(PointCloud(pts, np.zeros(500)))
        for _ in range(1000):
            q = rng.normal(0, 1.5, 3)
            i, d = nn_query(idx, q)
            dists = np.linalg.norm(pts - q, axis=1)
            assert i == int(np.argmin(dists))
            assert abs(d - dists.min()) < 1e-12


def _sse(pose: SE3Pose, est: np.ndarray, gt: np.ndarray) -> float:
    return float(((est @ pose.rotation_matrix().T + pose.t - gt) ** 2).sum())


class TestUmeyama:
    def test_identical_trajectories(self):
        rng = np.random.default_rng(16)
        poses = [random_pose(rng, 3.0) for _ in range(10)]
        T = umeyama_align(poses, poses)
        assert T.rotation_angle() < 1e-9
        assert np.linalg.norm(T.t) < 1e-9

    def test_known_offset_removed(self):
        rng = np.random.default_rng(17)
        gt = [random_pose(rng, 3.0) for _ in range(10)]
        offset = random_pose(rng)
        est = [compose(offset, p) for p in gt]
        T = umeyama_align(est, gt)
        for e, g in zip(est, gt):
            assert np.linalg.norm(T.apply(e.t) - g.t) < 1e-9

    def test_matches_bruteforce_minimizer(self):
        rng = np.random.default_rng(18)
        gt = np.asarray(rng.normal(0, 2, (15, 3)))
        offset = random_pose(rng, 0.5, 0.3)
        est = gt @ offset.rotation_matrix().T + offset.t + rng.normal(0, 0.02, (15, 3))
        T = umeyama_align(est, gt)
        sse_t = _sse(T, est, gt)
        # seeded random-restart + refinement oracle
        best = np.inf
        for _ in range(4000):
            cand = random_pose(rng, 1.0, 0.6)
            best = min(best, _sse(cand, est, gt))
        center = T
        for scale in (0.1, 0.01, 1e-3):
            for _ in range(300):
                cand = compose(se3_exp(Twist(rng.normal(0, scale, 3),
                                             rng.normal(0, scale, 3))), center)
                s = _sse(cand, est, gt)
                if s < best:
                    best = s
        assert sse_t <= best + 1e-3

    def test_degenerate(self):
        same = [SE3Pose.identity()] * 5
        with pytest.raises(DegenerateTrajectory):
            umeyama_align(same, same)
        with pytest.raises(DegenerateTrajectory):
            umeyama_align(same[:2], same[:2])
