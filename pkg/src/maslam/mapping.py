"""Per-agent sub-map lifecycle: seeding from a lifted RGB-D frame,
opacity/depth-driven densification, loss-driven optimization with fixed
per-group step sizes, pruning, and the zero-rendered-opacity dispatch split.

Sub-maps own their Gaussians; retained (still visible) Gaussians from
earlier sub-maps may appear in the rendering context as a frozen background
but are never optimized here.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .config import MappingConfig
from .geometry import PointCloud, SE3Pose, inverse
from .losses import MappingLossSpec, scale_regularizer
from .renderer import (SCALE_MAX, SCALE_MIN, GaussianSet, render_gradients,
                       render_internals, rendered_opacity_per_gaussian)
from .world import Frame, backproject, backproject_grid

MIN_VALID_PIXELS = 100      # frames with fewer valid depths skip densification
GLOBAL_MAP_AGENT_ID = 0xFFFFFFFF


@dataclass
class SubMap:
    agent_id: int
    seq: int
    gaussians: GaussianSet
    anchor_cloud: PointCloud              # anchor-keyframe camera coordinates
    anchor_frame_index: int
    keyframe_poses: list                  # SE3Pose, camera -> world
    keyframe_indices: list
    dispatched: bool = False

    @property
    def submap_id(self) -> tuple:
        return (self.agent_id, self.seq)

    def anchor_pose(self) -> SE3Pose:
        return self.keyframe_poses[0]


def _nearest_neighbor_scales(points: np.ndarray, reference: np.ndarray | None = None,
                             cap: float = 0.06) -> np.ndarray:
    """Isotropic seed scales: distance to the nearest other point, capped."""
    if reference is None or len(reference) == 0:
        reference = points
        if len(points) < 2:
            return np.full(len(points), min(0.05, cap))
        _, idx = cKDTree(reference).query(points, k=2)
        dists = np.linalg.norm(points - reference[idx[:, 1]], axis=1)
    else:
        combined = np.vstack([reference, points])
        _, idx = cKDTree(combined).query(points, k=2)
        own = np.arange(len(reference), len(combined))
        other = np.where(idx[:, 0] == own, idx[:, 1], idx[:, 0])
        dists = np.linalg.norm(points - combined[other], axis=1)
    return np.clip(dists, 1e-4, cap)


def _new_gaussians(points_world: np.ndarray, colors: np.ndarray, cfg: MappingConfig,
                   existing_means: np.ndarray | None = None) -> GaussianSet:
    n = len(points_world)
    scales_iso = _nearest_neighbor_scales(points_world, existing_means,
                                          cap=cfg.max_seed_scale)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianSet(points_world, quats,
                       np.repeat(scales_iso[:, None], 3, axis=1),
                       np.full(n, cfg.new_gaussian_opacity), colors, validate=False)


def seed_submap(frame: Frame, pose: SE3Pose, cfg: MappingConfig,
                rng: np.random.Generator, agent_id: int = 0, seq: int = 0) -> SubMap:
    """Start a sub-map from a frame: uniform sample of backprojected pixels
    becomes the Gaussian means; the full-resolution cloud is kept as the
    registration anchor."""
    anchor = backproject(frame)      # raises NoValidDepth on empty frames
    n_valid = len(anchor)
    take = min(cfg.theta_sample, n_valid)
    pick = np.sort(rng.choice(n_valid, size=take, replace=False))
    pts_world = pose.apply(anchor.points[pick])
    gaussians = _new_gaussians(pts_world, anchor.colors[pick], cfg)
    return SubMap(agent_id=agent_id, seq=seq, gaussians=gaussians,
                  anchor_cloud=anchor, anchor_frame_index=frame.index,
                  keyframe_poses=[pose], keyframe_indices=[frame.index])


def densify(submap: SubMap, frame: Frame, pose: SE3Pose, cfg: MappingConfig,
            rng: np.random.Generator, background: GaussianSet | None = None) -> int:
    """Add Gaussians where the current view is uncovered (low rendered alpha)
    or geometrically wrong (depth error above the median-scaled threshold).
    Returns the number of Gaussians added."""
    valid = frame.depth > 0.0
    if int(valid.sum()) < MIN_VALID_PIXELS:
        return 0
    context = submap.gaussians if background is None or len(background) == 0 \
        else GaussianSet.concat([submap.gaussians, background])
    ri = render_internals(context, inverse(pose), frame.intrinsics)
    depth_err = np.abs(ri.depth_norm - frame.depth)
    med = np.median(depth_err[valid])
    candidates = valid & ((ri.alpha < cfg.alpha_thre)
                          | (depth_err > cfg.depth_discrepancy_factor * med))
    n_cand = int(candidates.sum())
    if n_cand == 0:
        return 0
    take = min(cfg.theta_sample, n_cand)
    flat_idx = np.flatnonzero(candidates.ravel())
    pick = np.sort(rng.choice(n_cand, size=take, replace=False))
    chosen = flat_idx[pick]
    pts_cam, _ = backproject_grid(frame)
    pts_world = pose.apply(pts_cam.reshape(-1, 3)[chosen])
    colors = frame.color.reshape(-1, 3)[chosen]
    added = _new_gaussians(pts_world, colors, cfg,
                           existing_means=submap.gaussians.means)
    submap.gaussians = GaussianSet.concat([submap.gaussians, added])
    return len(added)


def mapping_loss(submap: SubMap, keyframes: list, cfg: MappingConfig,
                 background: GaussianSet | None = None):
    """Average rendering loss over keyframes plus the scale regularizer.

    keyframes: list of (Frame, SE3Pose camera->world).
    Returns (total, breakdown dict)."""
    context = submap.gaussians if background is None or len(background) == 0 \
        else GaussianSet.concat([submap.gaussians, background])
    color_sum = depth_sum = 0.0
    for frame, pose in keyframes:
        spec = MappingLossSpec(frame.color, frame.depth, cfg.lambda_color,
                               cfg.lambda_depth, cfg.lambda_ssim)
        ri = render_internals(context, inverse(pose), frame.intrinsics)
        spec(ri.color, ri.depth_norm, ri.alpha)
        color_sum += spec.breakdown["color"]
        depth_sum += spec.breakdown["depth"]
    n = max(len(keyframes), 1)
    reg, _ = scale_regularizer(submap.gaussians.scales)
    breakdown = {"color": color_sum / n, "depth": depth_sum / n, "reg": reg}
    total = (cfg.lambda_color * breakdown["color"]
             + cfg.lambda_depth * breakdown["depth"]
             + cfg.lambda_reg * breakdown["reg"])
    return total, breakdown


@dataclass
class OptimizeStats:
    per_step_loss: list = field(default_factory=list)
    pruned: int = 0


def optimize_submap(submap: SubMap, keyframes: list, cfg: MappingConfig,
                    background: GaussianSet | None = None,
                    iters: int | None = None) -> OptimizeStats:
    """Fixed-step gradient descent on {opacity, color, scale, mean} for
    iter_m steps, cycling keyframes round-robin; rotations stay frozen.
    Gaussians below the opacity threshold are pruned afterwards."""
    stats = OptimizeStats()
    if len(submap.gaussians) == 0 or not keyframes:
        return stats
    n_iters = cfg.iter_m if iters is None else iters
    bg = background if background is not None and len(background) > 0 else None
    n_active = len(submap.gaussians)
    for step in range(n_iters):
        frame, pose = keyframes[step % len(keyframes)]
        context = submap.gaussians if bg is None \
            else GaussianSet.concat([submap.gaussians, bg])
        spec = MappingLossSpec(frame.color, frame.depth, cfg.lambda_color,
                               cfg.lambda_depth, cfg.lambda_ssim)
        g = render_gradients(context, inverse(pose), frame.intrinsics, spec)
        reg_val, reg_grad = scale_regularizer(submap.gaussians.scales)
        stats.per_step_loss.append(g.loss + cfg.lambda_reg * reg_val)

        gs = submap.gaussians
        means = gs.means - cfg.lr_mean * g.d_mean[:n_active]
        scales = np.clip(gs.scales - cfg.lr_scale * (g.d_scale[:n_active]
                                                     + cfg.lambda_reg * reg_grad),
                         SCALE_MIN, SCALE_MAX)
        colors = np.clip(gs.colors - cfg.lr_color * g.d_color[:n_active], 0.0, 1.0)
        opac = np.clip(gs.opacities - cfg.lr_opacity * g.d_opacity[:n_active],
                       1e-4, 1.0)
        submap.gaussians = GaussianSet(means, gs.quats, scales, opac, colors,
                                       validate=False)
    keep = submap.gaussians.opacities >= cfg.opacity_prune
    stats.pruned = int((~keep).sum())
    if stats.pruned:
        submap.gaussians = submap.gaussians.select(keep)
    return stats


def select_dispatch(submap: SubMap, next_first_frame: Frame, next_pose: SE3Pose):
    """Split a finished sub-map by visibility in the next sub-map's first
    view: zero rendered opacity -> dispatch now, nonzero -> retain locally.

    Returns (dispatch set, retain set, dispatch mask)."""
    vis = rendered_opacity_per_gaussian(submap.gaussians, inverse(next_pose),
                                        next_first_frame.intrinsics)
    dispatch_mask = vis == 0.0
    return (submap.gaussians.select(dispatch_mask),
            submap.gaussians.select(~dispatch_mask),
            dispatch_mask)


# ---------------------------------------------------------------------------
# Sub-map binary format (bit-exact round trip)
# ---------------------------------------------------------------------------

SUBMAP_MAGIC = b"MSLM"
SUBMAP_VERSION = 1


def submap_to_bytes(sm: SubMap) -> bytes:
    g = sm.gaussians
    a = sm.anchor_cloud
    flags = 0
    if a.normals is not None:
        flags |= 1
    if a.colors is not None:
        flags |= 2
    parts = [SUBMAP_MAGIC,
             struct.pack("<HIIQQQBQB", SUBMAP_VERSION, sm.agent_id, sm.seq,
                         len(g), len(a), len(sm.keyframe_poses), flags,
                         sm.anchor_frame_index, 1 if sm.dispatched else 0)]
    for arr in (g.means, g.quats, g.scales, g.opacities, g.colors,
                a.points, a.intensities):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    if a.normals is not None:
        parts.append(np.ascontiguousarray(a.normals, dtype="<f8").tobytes())
    if a.colors is not None:
        parts.append(np.ascontiguousarray(a.colors, dtype="<f8").tobytes())
    for idx, pose in zip(sm.keyframe_indices, sm.keyframe_poses):
        parts.append(struct.pack("<Q", idx))
        parts.append(np.ascontiguousarray(np.concatenate([pose.q, pose.t]),
                                          dtype="<f8").tobytes())
    return b"".join(parts)


class SubMapFormatError(ValueError):
    pass


def submap_from_bytes(buf: bytes) -> SubMap:
    if buf[:4] != SUBMAP_MAGIC:
        raise SubMapFormatError("bad sub-map magic")
    off = 4
    header = struct.unpack_from("<HIIQQQBQB", buf, off)
    off += struct.calcsize("<HIIQQQBQB")
    version, agent_id, seq, n_g, n_a, n_kf, flags, anchor_idx, dispatched = header
    if version != SUBMAP_VERSION:
        raise SubMapFormatError(f"unsupported sub-map version {version}")

    def take(count):
        nonlocal off
        nbytes = count * 8
        if off + nbytes > len(buf):
            raise SubMapFormatError("truncated sub-map payload")
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off).copy()
        off += nbytes
        return arr

    means = take(n_g * 3).reshape(n_g, 3)
    quats = take(n_g * 4).reshape(n_g, 4)
    scales = take(n_g * 3).reshape(n_g, 3)
    opac = take(n_g)
    colors = take(n_g * 3).reshape(n_g, 3)
    a_points = take(n_a * 3).reshape(n_a, 3)
    a_int = take(n_a)
    a_norm = take(n_a * 3).reshape(n_a, 3) if flags & 1 else None
    a_col = take(n_a * 3).reshape(n_a, 3) if flags & 2 else None
    kf_idx, kf_poses = [], []
    for _ in range(n_kf):
        if off + 8 > len(buf):
            raise SubMapFormatError("truncated keyframe table")
        (idx,) = struct.unpack_from("<Q", buf, off)
        off += 8
        vals = take(7)
        kf_idx.append(int(idx))
        kf_poses.append(SE3Pose(vals[:4], vals[4:]))
    return SubMap(agent_id=agent_id, seq=seq,
                  gaussians=GaussianSet(means, quats, scales, opac, colors,
                                        validate=False),
                  anchor_cloud=PointCloud(a_points, a_int, a_norm, a_col),
                  anchor_frame_index=int(anchor_idx),
                  keyframe_poses=kf_poses, keyframe_indices=kf_idx,
                  dispatched=bool(dispatched))


def write_submap(path: str | Path, sm: SubMap) -> None:
    Path(path).write_bytes(submap_to_bytes(sm))


def read_submap(path: str | Path) -> SubMap:
    return submap_from_bytes(Path(path).read_bytes())
