"""Synthetic RGB-D world: analytic primitives with procedural albedo,
pinhole raycasting, seeded sequence generation with sensor noise, and
backprojection to point clouds.

Depth maps store the camera-frame z coordinate (not ray length); a pixel with
depth 0 is invalid. All generation is a pure function of (scene, seed) and
per-frame seeded, so frames can be produced in any order bit-identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud, SE3Pose, Twist, compose, inverse, quat_slerp, se3_exp


class NoValidDepth(ValueError):
    pass


LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_min: float = 0.1
    depth_max: float = 20.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.depth_min < self.depth_max):
            raise ValueError("need 0 < depth_min < depth_max")

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        sx = width / self.width
        sy = height / self.height
        return CameraIntrinsics(self.fx * sx, self.fy * sy,
                                (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5,
                                width, height, self.depth_min, self.depth_max)


def default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=120.0, fy=120.0, cx=79.5, cy=59.5, width=160, height=120)


@dataclass
class Frame:
    index: int
    timestamp: float
    color: np.ndarray          # H x W x 3 in [0, 1]
    depth: np.ndarray          # H x W meters, 0 = invalid
    intrinsics: CameraIntrinsics


# ---------------------------------------------------------------------------
# Procedural textures (albedo as a function of the 3D hit point)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Texture:
    """checker: alternating colors on a 3D grid of the given period;
    gradient: linear blend along `axis` with the given spatial period;
    solid: constant color."""

    kind: str = "solid"
    color_a: tuple = (0.7, 0.7, 0.7)
    color_b: tuple = (0.3, 0.3, 0.3)
    period: float = 0.5
    axis: tuple = (1.0, 0.0, 0.0)

    def albedo(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        ca = np.asarray(self.color_a, dtype=np.float64)
        cb = np.asarray(self.color_b, dtype=np.float64)
        if self.kind == "solid":
            return np.tile(ca, (len(pts), 1))
        if self.kind == "checker":
            cells = np.floor(pts / self.period).astype(np.int64)
            parity = (cells.sum(axis=1) % 2).astype(np.float64)
            return ca[None, :] * (1.0 - parity[:, None]) + cb[None, :] * parity[:, None]
        if self.kind == "gradient":
            axis = np.asarray(self.axis, dtype=np.float64)
            axis = axis / np.linalg.norm(axis)
            s = (pts @ axis) / self.period
            t = 0.5 * (1.0 + np.sin(2.0 * math.pi * s))
            return ca[None, :] * (1.0 - t[:, None]) + cb[None, :] * t[:, None]
        raise ValueError(f"unknown texture kind {self.kind!r}")


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    texture: Texture = Texture()

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        oc = origin - c
        a = np.einsum("ni,ni->n", dirs, dirs)
        b = 2.0 * dirs @ oc
        cq = float(oc @ oc) - self.radius ** 2
        disc = b * b - 4.0 * a * cq
        s = np.full(len(dirs), np.inf)
        hit = disc >= 0.0
        sq = np.sqrt(np.maximum(disc, 0.0))
        s1 = (-b - sq) / (2.0 * a)
        s2 = (-b + sq) / (2.0 * a)
        near = np.where(s1 > 1e-9, s1, s2)
        s[hit & (near > 1e-9)] = near[hit & (near > 1e-9)]
        return s


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; rays starting inside hit the exit face."""

    center: tuple
    half_extents: tuple
    texture: Texture = Texture()

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        h = np.asarray(self.half_extents, dtype=np.float64)
        lo, hi = c - h, c + h
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - origin) / dirs
            t2 = (hi - origin) / dirs
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        s = np.full(len(dirs), np.inf)
        hit = tmax >= np.maximum(tmin, 0.0)
        entry = np.where(tmin > 1e-9, tmin, tmax)
        ok = hit & (entry > 1e-9)
        s[ok] = entry[ok]
        return s


@dataclass(frozen=True)
class Plane:
    point: tuple
    normal: tuple
    texture: Texture = Texture()

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        p0 = np.asarray(self.point, dtype=np.float64)
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        denom = dirs @ n
        s = np.full(len(dirs), np.inf)
        ok = np.abs(denom) > 1e-12
        s_ok = ((p0 - origin) @ n) / denom[ok]
        valid = s_ok > 1e-9
        idx = np.flatnonzero(ok)[valid]
        s[idx] = s_ok[valid]
        return s


@dataclass
class SceneSpec:
    """Primitives + per-agent ground-truth trajectories (keyframes,
    interpolated linearly in translation and by slerp in rotation)."""

    primitives: list
    trajectories: list            # per agent: list[SE3Pose] keyframes
    frames_per_agent: int
    name: str = "scene"

    @property
    def agents(self) -> int:
        return len(self.trajectories)

    def gt_pose(self, agent: int, frame: int) -> SE3Pose:
        keys = self.trajectories[agent]
        if len(keys) == 1:
            return keys[0]
        u = frame / max(self.frames_per_agent - 1, 1) * (len(keys) - 1)
        seg = min(int(math.floor(u)), len(keys) - 2)
        t = u - seg
        a, b = keys[seg], keys[seg + 1]
        return SE3Pose(quat_slerp(a.q, b.q, t), (1.0 - t) * a.t + t * b.t)


def pixel_ray_dirs(K: CameraIntrinsics) -> np.ndarray:
    """Camera-frame ray directions with unit z, one per pixel (H*W, 3)."""
    u = np.arange(K.width, dtype=np.float64)
    v = np.arange(K.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    return np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)],
                    axis=-1).reshape(-1, 3)


def raycast_frame(scene: SceneSpec, pose: SE3Pose, K: CameraIntrinsics,
                  index: int = 0, timestamp: float = 0.0) -> Frame:
    """Per-pixel first-hit z-depth and albedo (no shading); misses get depth 0."""
    dirs_cam = pixel_ray_dirs(K)
    R = pose.rotation_matrix()
    dirs_world = dirs_cam @ R.T
    origin = pose.t
    n_pix = len(dirs_world)
    best = np.full(n_pix, np.inf)
    which = np.full(n_pix, -1, dtype=np.int64)
    for pi, prim in enumerate(scene.primitives):
        s = prim.intersect(origin, dirs_world)
        closer = s < best
        best[closer] = s[closer]
        which[closer] = pi
    valid = np.isfinite(best) & (best >= K.depth_min) & (best <= K.depth_max)
    depth = np.where(valid, best, 0.0)
    color = np.zeros((n_pix, 3))
    for pi, prim in enumerate(scene.primitives):
        mask = valid & (which == pi)
        if not np.any(mask):
            continue
        hits = origin + best[mask, None] * dirs_world[mask]
        color[mask] = prim.texture.albedo(hits)
    return Frame(index=index, timestamp=timestamp,
                 color=color.reshape(K.height, K.width, 3),
                 depth=depth.reshape(K.height, K.width), intrinsics=K)


# ---------------------------------------------------------------------------
# Sequence generation
# ---------------------------------------------------------------------------


@dataclass
class SequenceBundle:
    """Lazy per-agent frame streams, ground-truth trajectories, and drifted
    odometry.  Ground truth is never perturbed; drift only affects odometry."""

    scene: SceneSpec
    intrinsics: CameraIntrinsics
    depth_sigma: float
    pose_drift: float
    seed: int
    _odometry: list = field(default_factory=list)

    def __post_init__(self):
        for agent in range(self.scene.agents):
            rels = []
            for t in range(1, self.scene.frames_per_agent):
                rel = compose(inverse(self.scene.gt_pose(agent, t - 1)),
                              self.scene.gt_pose(agent, t))
                if self.pose_drift > 0.0:
                    rng = self._rng(agent, t, stream=1)
                    eps = rng.normal(0.0, self.pose_drift, size=6)
                    rel = compose(rel, se3_exp(Twist(eps[:3], eps[3:])))
                rels.append(rel)
            poses = [self.scene.gt_pose(agent, 0)]
            for rel in rels:
                poses.append(compose(poses[-1], rel))
            self._odometry.append(poses)

    def _rng(self, agent: int, frame: int, stream: int = 0) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([self.seed, agent, frame, stream])))

    @property
    def agents(self) -> int:
        return self.scene.agents

    @property
    def frames_per_agent(self) -> int:
        return self.scene.frames_per_agent

    def gt_pose(self, agent: int, frame: int) -> SE3Pose:
        return self.scene.gt_pose(agent, frame)

    def gt_trajectory(self, agent: int) -> list[SE3Pose]:
        return [self.gt_pose(agent, t) for t in range(self.frames_per_agent)]

    def odometry_pose(self, agent: int, frame: int) -> SE3Pose:
        return self._odometry[agent][frame]

    def odometry_trajectory(self, agent: int) -> list[SE3Pose]:
        return list(self._odometry[agent])

    def frame(self, agent: int, index: int) -> Frame:
        f = raycast_frame(self.scene, self.gt_pose(agent, index), self.intrinsics,
                          index=index, timestamp=float(index))
        if self.depth_sigma > 0.0:
            rng = self._rng(agent, index, stream=0)
            noise = rng.normal(0.0, self.depth_sigma, size=f.depth.shape)
            valid = f.depth > 0.0
            noisy = np.clip(f.depth + noise, self.intrinsics.depth_min,
                            self.intrinsics.depth_max)
            f.depth = np.where(valid, noisy, 0.0)
        return f


def generate_sequences(scene: SceneSpec, depth_sigma: float = 0.0,
                       pose_drift: float = 0.0, seed: int = 0,
                       intrinsics: CameraIntrinsics | None = None) -> SequenceBundle:
    return SequenceBundle(scene, intrinsics or default_intrinsics(),
                          depth_sigma, pose_drift, seed)


# ---------------------------------------------------------------------------
# Backprojection
# ---------------------------------------------------------------------------


def backproject_grid(frame: Frame) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame points per pixel (H, W, 3) and the valid-depth mask."""
    K = frame.intrinsics
    u = np.arange(K.width, dtype=np.float64)
    v = np.arange(K.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    d = frame.depth
    pts = np.stack([(uu - K.cx) / K.fx * d, (vv - K.cy) / K.fy * d, d], axis=-1)
    return pts, d > 0.0


def backproject(frame: Frame) -> PointCloud:
    """One point per valid-depth pixel, camera coordinates, luma intensity."""
    pts, valid = backproject_grid(frame)
    if not np.any(valid):
        raise NoValidDepth("frame has no valid depth")
    colors = frame.color[valid]
    return PointCloud(pts[valid], colors @ LUMA_WEIGHTS, None, colors)
