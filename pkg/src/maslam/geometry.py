"""SE(3) poses, twists, point clouds, spatial queries, and trajectory alignment.

Conventions used across the whole package:
  - Quaternions are (w, x, y, z), Hamilton product, canonicalized to w >= 0
    and renormalized after every composition.
  - Twists are 6-vectors (rho, phi): translational part first, rotation
    vector (radians) second.
  - Normals are oriented toward the sensor origin of the producing frame;
    invalid normals are stored as NaN rows and skipped downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class AngleNearPi(ValueError):
    """Rotation angle too close to pi for a stable logarithm."""


class EmptyCloud(ValueError):
    """Operation requires a non-empty point cloud."""


class DegenerateTrajectory(ValueError):
    """Trajectory has too few poses or no translation spread to align."""


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("zero-norm vector")
    return v / n


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Normalize and flip sign so w >= 0 (first nonzero positive on w == 0).

    Skips the division when the norm is already within 1e-12 of 1, so
    canonicalizing a canonical quaternion is bit-stable."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    if abs(n - 1.0) > 1e-12:
        q = q / n
    if q[0] < 0.0 or (q[0] == 0.0 and (q[[1, 2, 3]][np.nonzero(q[[1, 2, 3]])[0][0]] < 0.0 if np.any(q[[1, 2, 3]]) else False)):
        q = -q
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns the canonical (w >= 0) quaternion."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] >= R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    return quat_canonical(q)


def quat_slerp(qa: np.ndarray, qb: np.ndarray, t: float) -> np.ndarray:
    """Spherical interpolation along the shorter arc."""
    qa = np.asarray(qa, dtype=np.float64)
    qb = np.asarray(qb, dtype=np.float64)
    dot = float(np.dot(qa, qb))
    if dot < 0.0:
        qb = -qb
        dot = -dot
    if dot > 1.0 - 1e-12:
        return quat_canonical(qa + t * (qb - qa))
    theta = math.acos(min(1.0, dot))
    s = math.sin(theta)
    return quat_canonical((math.sin((1 - t) * theta) / s) * qa + (math.sin(t * theta) / s) * qb)


def _skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform: rotation quaternion (w, x, y, z) + translation (m)."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", quat_canonical(np.asarray(self.q, dtype=np.float64)))
        object.__setattr__(self, "t", np.array(self.t, dtype=np.float64).reshape(3))
        self.q.flags.writeable = False
        self.t.flags.writeable = False

    @staticmethod
    def identity() -> "SE3Pose":
        return SE3Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_matrix(M: np.ndarray) -> "SE3Pose":
        M = np.asarray(M, dtype=np.float64)
        return SE3Pose(quat_from_matrix(M[:3, :3]), M[:3, 3])

    @staticmethod
    def from_rt(R: np.ndarray, t: np.ndarray) -> "SE3Pose":
        return SE3Pose(quat_from_matrix(R), t)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation_matrix()
        M[:3, 3] = self.t
        return M

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array or single 3-vector."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation_matrix().T + self.t

    def rotation_angle(self) -> float:
        """Rotation magnitude in radians, in [0, pi]."""
        return 2.0 * math.atan2(float(np.linalg.norm(self.q[1:])), float(abs(self.q[0])))


@dataclass(frozen=True)
class Twist:
    """se(3) coordinates: rho (translational, m) and phi (rotational, rad)."""

    rho: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rho", np.array(self.rho, dtype=np.float64).reshape(3))
        object.__setattr__(self, "phi", np.array(self.phi, dtype=np.float64).reshape(3))

    @staticmethod
    def from_vector(xi: np.ndarray) -> "Twist":
        xi = np.asarray(xi, dtype=np.float64).reshape(6)
        return Twist(xi[:3], xi[3:])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])


def compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    """a then applied after b: (a*b).apply(p) == a.apply(b.apply(p))."""
    return SE3Pose(quat_multiply(a.q, b.q), a.apply(b.t))


def inverse(a: SE3Pose) -> SE3Pose:
    qc = quat_conjugate(a.q)
    return SE3Pose(qc, -(quat_to_matrix(qc) @ a.t))


def relative(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    """inverse(a) * b."""
    return compose(inverse(a), b)


_SMALL_ANGLE = 1e-8


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues rotation matrix; 2nd-order series below the small-angle cut."""
    phi = np.asarray(phi, dtype=np.float64)
    theta = float(np.linalg.norm(phi))
    K = _skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    A = math.sin(theta) / theta
    B = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + A * K + B * (K @ K)


def se3_exp(xi: Twist) -> SE3Pose:
    """Closed-form exponential map se(3) -> SE(3)."""
    phi = xi.phi
    rho = xi.rho
    theta = float(np.linalg.norm(phi))
    K = _skew(phi)
    if theta < _SMALL_ANGLE:
        V = np.eye(3) + 0.5 * K + (K @ K) / 6.0
        R = np.eye(3) + K + 0.5 * (K @ K)
    else:
        t2 = theta * theta
        V = (np.eye(3)
             + ((1.0 - math.cos(theta)) / t2) * K
             + ((theta - math.sin(theta)) / (t2 * theta)) * (K @ K))
        R = so3_exp(phi)
    return SE3Pose(quat_from_matrix(R), V @ rho)


def se3_log(T: SE3Pose) -> Twist:
    """Inverse of se3_exp; raises AngleNearPi within 1e-6 of the pi singularity."""
    theta = T.rotation_angle()
    if theta > math.pi - 1e-6:
        raise AngleNearPi(f"rotation angle {theta:.9f} too close to pi")
    v = T.q[1:]
    sin_half = float(np.linalg.norm(v))
    if theta < _SMALL_ANGLE:
        phi = 2.0 * v  # sin(t/2) ~ t/2
        K = _skew(phi)
        Vinv = np.eye(3) - 0.5 * K + (K @ K) / 12.0
    else:
        axis = v / sin_half
        phi = axis * theta
        K = _skew(phi)
        t2 = theta * theta
        coeff = (1.0 / t2) * (1.0 - (theta * math.sin(theta)) / (2.0 * (1.0 - math.cos(theta))))
        Vinv = np.eye(3) - 0.5 * K + coeff * (K @ K)
    return Twist(Vinv @ T.t, phi)


def se3_adjoint(T: SE3Pose) -> np.ndarray:
    """6x6 adjoint mapping twists: Ad_T = [[R, [t]x R], [0, R]]."""
    R = T.rotation_matrix()
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[:3, 3:] = _skew(T.t) @ R
    A[3:, 3:] = R
    return A


def _so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    K = _skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    t2 = theta * theta
    return (np.eye(3)
            + ((1.0 - math.cos(theta)) / t2) * K
            + ((theta - math.sin(theta)) / (t2 * theta)) * (K @ K))


def _se3_Q_matrix(xi: Twist) -> np.ndarray:
    """Barfoot's Q block of the SE(3) left Jacobian."""
    rho, phi = xi.rho, xi.phi
    theta = float(np.linalg.norm(phi))
    P = _skew(rho)
    K = _skew(phi)
    PK = P @ K
    KP = K @ P
    KPK = K @ P @ K
    if theta < _SMALL_ANGLE:
        return 0.5 * P + (KP + PK) / 6.0
    t2 = theta * theta
    t3 = t2 * theta
    t4 = t3 * theta
    t5 = t4 * theta
    c, s = math.cos(theta), math.sin(theta)
    c1 = (theta - s) / t3
    c2 = (t2 / 2 + c - 1.0) / t4
    c3 = (theta - s - t3 / 6.0) / t5
    Q = (0.5 * P
         + c1 * (KP + PK + KPK)
         + c2 * (K @ K @ P + P @ K @ K - 3.0 * KPK)
         + (0.5 * c2 + 1.5 * c3) * (KPK @ K + K @ KPK))
    return Q


def se3_left_jacobian_inverse(xi: Twist) -> np.ndarray:
    """Inverse left Jacobian of SE(3) at xi (6x6)."""
    Jl = _so3_left_jacobian(xi.phi)
    Jl_inv = np.linalg.inv(Jl)
    Q = _se3_Q_matrix(xi)
    out = np.zeros((6, 6))
    out[:3, :3] = Jl_inv
    out[3:, 3:] = Jl_inv
    out[:3, 3:] = -Jl_inv @ Q @ Jl_inv
    return out


def se3_right_jacobian_inverse(xi: Twist) -> np.ndarray:
    """Inverse right Jacobian: Jr(xi)^-1 = Jl(-xi)^-1."""
    return se3_left_jacobian_inverse(Twist(-xi.rho, -xi.phi))


# ---------------------------------------------------------------------------
# Point clouds
# ---------------------------------------------------------------------------


@dataclass
class PointCloud:
    """Positions + scalar intensities, optional unit normals and RGB colors.

    Invalid normals are NaN rows; `valid_normal_mask` exposes them.
    """

    points: np.ndarray
    intensities: np.ndarray
    normals: np.ndarray | None = None
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.intensities = np.asarray(self.intensities, dtype=np.float64).reshape(-1)
        n = len(self.points)
        if len(self.intensities) != n:
            raise ValueError("intensities length mismatch")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != n:
                raise ValueError("normals length mismatch")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != n:
                raise ValueError("colors length mismatch")

    def __len__(self) -> int:
        return len(self.points)

    def valid_normal_mask(self) -> np.ndarray:
        if self.normals is None:
            return np.zeros(len(self), dtype=bool)
        return ~np.any(np.isnan(self.normals), axis=1)

    def select(self, idx) -> "PointCloud":
        return PointCloud(
            self.points[idx],
            self.intensities[idx],
            None if self.normals is None else self.normals[idx],
            None if self.colors is None else self.colors[idx],
        )


def transform_cloud(T: SE3Pose, cloud: PointCloud) -> PointCloud:
    """Rigidly transform points; normals are rotated only."""
    R = T.rotation_matrix()
    normals = None if cloud.normals is None else cloud.normals @ R.T
    return PointCloud(cloud.points @ R.T + T.t, cloud.intensities.copy(), normals,
                      None if cloud.colors is None else cloud.colors.copy())


@dataclass
class VoxelGrid:
    """Occupied voxels with one representative (centroid, averaged attributes)."""

    voxel_size: float
    cells: dict = field(default_factory=dict)


def voxel_keys(points: np.ndarray, voxel: float) -> np.ndarray:
    return np.floor(points / voxel).astype(np.int64)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One representative per occupied voxel: centroid, averaged intensity,
    renormalized averaged normal (NaN if the average cancels out).

    Output is ordered by voxel key, so it is independent of input order up to
    floating-point summation; sums use extended precision to keep centroid
    aggregation stable.
    """
    if voxel <= 0.0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        raise EmptyCloud("cannot downsample an empty cloud")
    keys = voxel_keys(cloud.points, voxel)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    keys_sorted = keys[order]
    boundaries = np.ones(len(keys_sorted), dtype=bool)
    boundaries[1:] = np.any(keys_sorted[1:] != keys_sorted[:-1], axis=1)
    starts = np.flatnonzero(boundaries)
    counts = np.diff(np.append(starts, len(keys_sorted)))

    def _group_mean(values: np.ndarray) -> np.ndarray:
        acc = np.add.reduceat(values[order].astype(np.longdouble), starts, axis=0)
        return (acc / counts.reshape(-1, *([1] * (values.ndim - 1)))).astype(np.float64)

    points = _group_mean(cloud.points)
    intensities = _group_mean(cloud.intensities)
    normals = None
    if cloud.normals is not None:
        normals = _group_mean(cloud.normals)
        norms = np.linalg.norm(normals, axis=1)
        good = norms > 1e-9
        normals[good] /= norms[good, None]
        normals[~good] = np.nan
    colors = None if cloud.colors is None else _group_mean(cloud.colors)
    return PointCloud(points, intensities, normals, colors)


def build_voxel_grid(cloud: PointCloud, voxel: float) -> VoxelGrid:
    down = voxel_downsample(cloud, voxel)
    keys = voxel_keys(down.points, voxel)
    cells = {tuple(k): i for i, k in enumerate(keys)}
    grid = VoxelGrid(voxel)
    grid.cells = {k: down.select([i]) for k, i in cells.items()}
    return grid


def estimate_normals(cloud: PointCloud, k: int, origin: np.ndarray | None = None) -> PointCloud:
    """Smallest-eigenvector normals over k-NN neighborhoods (self included),
    oriented toward `origin` (the producing sensor center, default zero).

    Collinear neighborhoods get NaN normals; downstream ops skip them.
    """
    n = len(cloud)
    if n < 3:
        raise EmptyCloud("need at least 3 points for normal estimation")
    if k < 3:
        raise ValueError("k must be >= 3")
    k_eff = min(k, n)
    origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=np.float64)
    tree = cKDTree(cloud.points)
    _, idx = tree.query(cloud.points, k=k_eff)
    neigh = cloud.points[idx]  # (n, k, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k_eff
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    degenerate = evals[:, 1] <= 1e-9 * np.maximum(evals[:, 2], 1e-30)
    to_origin = origin - cloud.points
    flip = np.einsum("ni,ni->n", normals, to_origin) < 0.0
    normals[flip] = -normals[flip]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[degenerate] = np.nan
    return PointCloud(cloud.points.copy(), cloud.intensities.copy(), normals,
                      None if cloud.colors is None else cloud.colors.copy())


class SpatialIndex:
    """Exact nearest-neighbor index; read-only after build."""

    def __init__(self, cloud: PointCloud):
        if len(cloud) == 0:
            raise EmptyCloud("cannot index an empty cloud")
        self._tree = cKDTree(cloud.points)
        self.size = len(cloud)

    def query(self, q: np.ndarray, max_dist: float = np.inf):
        """Nearest (index, distance), or None if beyond max_dist."""
        dist, idx = self._tree.query(np.asarray(q, dtype=np.float64))
        if not np.isfinite(dist) or dist > max_dist:
            return None
        return int(idx), float(dist)

    def query_batch(self, qs: np.ndarray, max_dist: float = np.inf):
        """Vectorized query: (indices, distances, valid mask)."""
        dist, idx = self._tree.query(np.asarray(qs, dtype=np.float64))
        valid = np.isfinite(dist) & (dist <= max_dist)
        return idx, dist, valid

    def query_knn(self, qs: np.ndarray, k: int):
        return self._tree.query(np.asarray(qs, dtype=np.float64), k=k)

    def query_radius(self, q: np.ndarray, radius: float):
        return self._tree.query_ball_point(np.asarray(q, dtype=np.float64), radius)


def nn_index(cloud: PointCloud) -> SpatialIndex:
    return SpatialIndex(cloud)


def nn_query(index: SpatialIndex, q: np.ndarray, max_dist: float = np.inf):
    return index.query(q, max_dist)


def umeyama_align(est: list[SE3Pose] | np.ndarray, gt: list[SE3Pose] | np.ndarray) -> SE3Pose:
    """Rigid (no scale) least-squares alignment of translations: returns T with
    T.apply(est_translations) ~ gt_translations.
    """
    def _translations(seq):
        if isinstance(seq, np.ndarray):
            return np.asarray(seq, dtype=np.float64).reshape(-1, 3)
        return np.array([p.t for p in seq])

    a = _translations(est)
    b = _translations(gt)
    if len(a) != len(b):
        raise DegenerateTrajectory("trajectory length mismatch")
    if len(a) < 3:
        raise DegenerateTrajectory("need at least 3 poses")
    mu_a = a.mean(axis=0)
    mu_b = b.mean(axis=0)
    ac = a - mu_a
    bc = b - mu_b
    if float(np.abs(ac).max(initial=0.0)) < 1e-9:
        raise DegenerateTrajectory("no translation spread")
    H = ac.T @ bc
    U, _, Vt = np.linalg.svd(H)
    S = np.eye(3)
    if np.linalg.det(U @ Vt) < 0.0:
        S[2, 2] = -1.0
    R = Vt.T @ S @ U.T
    t = mu_b - R @ mu_a
    return SE3Pose.from_rt(R, t)
