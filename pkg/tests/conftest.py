import numpy as np
import pytest

from maslam.geometry import PointCloud, SE3Pose, Twist, se3_exp
from maslam.renderer import GaussianSet
from maslam.world import CameraIntrinsics


@pytest.fixture
def small_intrinsics():
    return CameraIntrinsics(fx=24.0, fy=24.0, cx=15.5, cy=11.5,
                            width=32, height=24, depth_min=0.1, depth_max=20.0)


def random_pose(rng, t_scale=1.0, r_scale=0.5) -> SE3Pose:
    return se3_exp(Twist(rng.normal(0.0, t_scale, 3), rng.normal(0.0, r_scale, 3)))


def random_gaussians(rng, n=20, z_range=(1.5, 3.5)) -> GaussianSet:
    means = rng.uniform(-1.2, 1.2, (n, 3))
    means[:, 2] = rng.uniform(*z_range, n)
    return GaussianSet(
        means,
        rng.normal(0.0, 1.0, (n, 4)),
        rng.uniform(0.05, 0.25, (n, 3)),
        rng.uniform(0.3, 0.95, n),
        rng.uniform(0.05, 0.95, (n, 3)),
    )


def textured_surface_cloud(rng, n_plane=4000, n_sphere=3000) -> PointCloud:
    """Checker-textured plane plus a striped sphere with analytic normals."""
    xy = rng.uniform(-2.0, 2.0, (n_plane, 2))
    plane_pts = np.column_stack([xy, np.zeros(n_plane)])
    plane_n = np.tile([0.0, 0.0, 1.0], (n_plane, 1))
    plane_i = ((np.floor(plane_pts[:, 0] / 0.3)
                + np.floor(plane_pts[:, 1] / 0.3)) % 2) * 0.8 + 0.1
    dirs = rng.normal(0.0, 1.0, (n_sphere, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    center = np.array([0.5, 0.3, 1.0])
    sph_pts = center + 0.7 * dirs
    sph_i = (np.sin(8 * sph_pts[:, 0]) * np.sin(8 * sph_pts[:, 1]) > 0) * 0.7 + 0.15
    return PointCloud(np.vstack([plane_pts, sph_pts]),
                      np.concatenate([plane_i, sph_i]),
                      np.vstack([plane_n, dirs]))
