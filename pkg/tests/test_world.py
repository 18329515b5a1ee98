import math

import numpy as np
import pytest

from maslam.fileio import (MalformedHeader, TruncatedPayload, read_config,
                           read_pfm, read_ppm, read_tum, write_config,
                           write_pfm, write_ppm, write_tum)
from maslam.geometry import SE3Pose, compose, se3_exp, Twist
from maslam.scenes import build_scene, look_at
from maslam.world import (CameraIntrinsics, NoValidDepth, Plane, SceneSpec,
                          Sphere, Texture, backproject, default_intrinsics,
                          generate_sequences, raycast_frame)


def _facing_plane_scene():
    prim = Plane((0.0, 0.0, 2.0), (0.0, 0.0, -1.0),
                 Texture("checker", (0.9, 0.1, 0.1), (0.1, 0.1, 0.9), 0.4))
    traj = [SE3Pose.identity()]
    return SceneSpec([prim], [traj], frames_per_agent=1)


class TestRaycast:
    def test_plane_two_meters_ahead(self):
        K = default_intrinsics()
        frame = raycast_frame(_facing_plane_scene(), SE3Pose.identity(), K)
        # principal point lies between the four center pixels (cx=79.5)
        d = frame.depth[59:61, 79:81]
        assert np.all(np.abs(d - 2.0) < 1e-6)

    def test_empty_scene_all_invalid(self):
        K = default_intrinsics()
        scene = SceneSpec([], [[SE3Pose.identity()]], 1)
        frame = raycast_frame(scene, SE3Pose.identity(), K)
        assert np.all(frame.depth == 0.0)

    def test_sphere_center_depth(self):
        K = default_intrinsics()
        scene = SceneSpec([Sphere((0.0, 0.0, 3.0), 1.0)], [[SE3Pose.identity()]], 1)
        frame = raycast_frame(scene, SE3Pose.identity(), K)
        d = frame.depth[59:61, 79:81]
        assert np.all(np.abs(d - 2.0) < 1e-3)

    def test_hit_points_on_surface(self):
        K = default_intrinsics()
        scene = build_scene("room1", 10)
        pose = scene.gt_pose(0, 3)
        frame = raycast_frame(scene, pose, K)
        cloud = backproject(frame)
        world = pose.apply(cloud.points)
        # for a convex room of planes plus props: each point must satisfy at
        # least one primitive's surface equation
        ok = np.zeros(len(world), dtype=bool)
        for prim in scene.primitives:
            if isinstance(prim, Plane):
                n = np.asarray(prim.normal, dtype=float)
                n = n / np.linalg.norm(n)
                dist = (world - np.asarray(prim.point)) @ n
                ok |= np.abs(dist) < 1e-6
            elif isinstance(prim, Sphere):
                r = np.linalg.norm(world - np.asarray(prim.center), axis=1)
                ok |= np.abs(r - prim.radius) < 1e-6
            else:  # boxes: on one of the six faces
                c = np.asarray(prim.center)
                h = np.asarray(prim.half_extents)
                rel = np.abs(world - c) - h
                on_face = (np.abs(rel).min(axis=1) < 1e-6) & np.all(rel < 1e-6, axis=1)
                ok |= on_face
        assert ok.all()


class TestGenerateSequences:
    def test_zero_noise_matches_raycast(self):
        scene = build_scene("room1", 5)
        bundle = generate_sequences(scene, 0.0, 0.0, seed=3)
        f = bundle.frame(0, 2)
        direct = raycast_frame(scene, scene.gt_pose(0, 2), bundle.intrinsics)
        assert np.array_equal(f.depth, direct.depth)
        assert np.array_equal(f.color, direct.color)

    def test_depth_noise_half_normal_mean(self):
        scene = build_scene("room1", 4)
        sigma = 0.01
        clean = generate_sequences(scene, 0.0, 0.0, seed=5)
        noisy = generate_sequences(scene, sigma, 0.0, seed=5)
        diffs = []
        for t in range(4):
            fc, fn = clean.frame(0, t), noisy.frame(0, t)
            valid = fc.depth > 0
            diffs.append(np.abs(fn.depth[valid] - fc.depth[valid]))
        mean_abs = float(np.mean(np.concatenate(diffs)))
        expected = sigma * math.sqrt(2.0 / math.pi)
        assert abs(mean_abs - expected) < 0.1 * expected

    def test_same_seed_bit_identical(self):
        scene = build_scene("room2", 3)
        b1 = generate_sequences(scene, 0.01, 0.002, seed=9)
        b2 = generate_sequences(scene, 0.01, 0.002, seed=9)
        for a in range(2):
            for t in range(3):
                f1, f2 = b1.frame(a, t), b2.frame(a, t)
                assert np.array_equal(f1.depth, f2.depth)
                assert np.array_equal(f1.color, f2.color)
            for t in range(3):
                p1 = b1.odometry_pose(a, t)
                p2 = b2.odometry_pose(a, t)
                assert np.array_equal(p1.q, p2.q) and np.array_equal(p1.t, p2.t)

    def test_frame_order_independent(self):
        scene = build_scene("room1", 4)
        b = generate_sequences(scene, 0.01, 0.0, seed=11)
        late_first = b.frame(0, 3).depth.copy()
        b2 = generate_sequences(scene, 0.01, 0.0, seed=11)
        for t in range(4):
            b2.frame(0, t)
        assert np.array_equal(late_first, b2.frame(0, 3).depth)

    def test_drift_affects_odometry_not_gt(self):
        scene = build_scene("room1", 6)
        drift = generate_sequences(scene, 0.0, 0.01, seed=13)
        clean = generate_sequences(scene, 0.0, 0.0, seed=13)
        assert np.array_equal(drift.gt_pose(0, 5).t, clean.gt_pose(0, 5).t)
        assert not np.allclose(drift.odometry_pose(0, 5).t, clean.odometry_pose(0, 5).t)


class TestBackproject:
    def test_principal_pixel(self):
        K = CameraIntrinsics(fx=100.0, fy=100.0, cx=2.0, cy=2.0, width=5, height=5)
        depth = np.zeros((5, 5))
        depth[2, 2] = 2.0
        color = np.zeros((5, 5, 3))
        from maslam.world import Frame
        cloud = backproject(Frame(0, 0.0, color, depth, K))
        assert len(cloud) == 1
        assert np.allclose(cloud.points[0], [0.0, 0.0, 2.0], atol=1e-12)

    def test_all_invalid_raises(self):
        K = default_intrinsics()
        from maslam.world import Frame
        with pytest.raises(NoValidDepth):
            backproject(Frame(0, 0.0, np.zeros((K.height, K.width, 3)),
                              np.zeros((K.height, K.width)), K))

    def test_plane_points_satisfy_plane_equation(self):
        K = default_intrinsics()
        scene = _facing_plane_scene()
        frame = raycast_frame(scene, SE3Pose.identity(), K)
        cloud = backproject(frame)
        assert np.abs(cloud.points[:, 2] - 2.0).max() < 1e-6

    def test_luma_weights(self):
        K = CameraIntrinsics(fx=10.0, fy=10.0, cx=0.0, cy=0.0, width=1, height=1)
        from maslam.world import Frame
        color = np.array([[[1.0, 0.5, 0.25]]])
        depth = np.array([[1.0]])
        cloud = backproject(Frame(0, 0.0, color, depth, K))
        assert np.isclose(cloud.intensities[0],
                          0.299 * 1.0 + 0.587 * 0.5 + 0.114 * 0.25)


class TestFrameIO:
    def test_pfm_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(20)
        img = rng.normal(0, 2, (13, 17)).astype(np.float32)
        path = tmp_path / "x.pfm"
        write_pfm(path, img)
        back = read_pfm(path)
        assert np.array_equal(back, img)

    def test_ppm_round_trip_quantization(self, tmp_path):
        rng = np.random.default_rng(21)
        img = rng.uniform(0, 1, (9, 11, 3))
        path = tmp_path / "x.ppm"
        write_ppm(path, img)
        back = read_ppm(path)
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12

    def test_truncated_pfm(self, tmp_path):
        img = np.ones((8, 8), dtype=np.float32)
        path = tmp_path / "x.pfm"
        write_pfm(path, img)
        data = path.read_bytes()
        path.write_bytes(data[:-10])
        with pytest.raises(TruncatedPayload):
            read_pfm(path)

    def test_bad_magic_ppm(self, tmp_path):
        path = tmp_path / "x.ppm"
        path.write_bytes(b"P5\n2 2\n255\n" + b"\x00" * 4)
        with pytest.raises(MalformedHeader):
            read_ppm(path)

    def test_config_round_trip(self, tmp_path):
        path = tmp_path / "c.txt"
        write_config(path, {"alpha": 1.5, "name": "room2"})
        path.write_text(path.read_text() + "# trailing comment\n")
        vals = read_config(path)
        assert vals == {"alpha": "1.5", "name": "room2"}

    def test_tum_round_trip(self, tmp_path):
        rng = np.random.default_rng(22)
        poses = [se3_exp(Twist(rng.normal(0, 1, 3), rng.normal(0, 0.5, 3)))
                 for _ in range(5)]
        path = tmp_path / "t.tum"
        write_tum(path, poses)
        _, back = read_tum(path)
        for p, b in zip(poses, back):
            assert np.abs(p.t - b.t).max() < 1e-6
            assert np.abs(p.q - b.q).max() < 1e-6


class TestLookAt:
    def test_camera_axes(self):
        pose = look_at((0.0, 0.0, 1.0), (1.0, 0.0, 1.0))
        R = pose.rotation_matrix()
        assert np.allclose(R[:, 2], [1, 0, 0], atol=1e-12)    # forward +x
        assert np.allclose(R[:, 1], [0, 0, -1], atol=1e-12)   # down = world -z
