"""Coarse-to-fine loop-constraint registration: FPFH feature matching inside
RANSAC for the coarse transform, point-to-plane ICP on the full-resolution
anchor clouds for refinement.

Anchor clouds live in their sub-map's first-keyframe camera frame, so the
estimated transform is directly the relative pose between anchor cameras.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .config import LoopConfig
from .fpfh import compute_fpfh
from .geometry import (PointCloud, SE3Pose, SpatialIndex, Twist, compose,
                       estimate_normals, inverse, se3_exp, umeyama_align,
                       voxel_downsample)
from .mapping import SubMap
from .world import LUMA_WEIGHTS


class RegistrationFailed(RuntimeError):
    pass


@dataclass
class RegistrationMetrics:
    inlier_rmse: float
    overlap: float
    n_inliers: int = 0
    n_correspondences: int = 0


def _prepared(cloud: PointCloud, cfg: LoopConfig, normal_k: int = 16) -> PointCloud:
    down = voxel_downsample(cloud, cfg.registration_voxel)
    return estimate_normals(down, normal_k)


def _mutual_feature_matches(f_src, f_tgt, s_ok, t_ok):
    """Cross-checked nearest neighbors in FPFH space."""
    ftree_t = cKDTree(f_tgt[t_ok])
    _, fwd = ftree_t.query(f_src[s_ok])
    ftree_s = cKDTree(f_src[s_ok])
    _, bwd = ftree_s.query(f_tgt[t_ok])
    keep = bwd[fwd] == np.arange(len(s_ok))
    return s_ok[keep], t_ok[fwd[keep]]


def global_registration(source: PointCloud, target: PointCloud,
                        cfg: LoopConfig) -> SE3Pose:
    """RANSAC over 3-point samples of mutually-matched FPFH correspondences;
    samples failing the edge-length compatibility check are discarded before
    model fitting; the best model is re-fit by rigid least squares on its
    inliers. Seeded, hence deterministic."""
    src = _prepared(source, cfg)
    tgt = _prepared(target, cfg)
    f_src, iso_s = compute_fpfh(src, cfg.fpfh_radius_feature)
    f_tgt, iso_t = compute_fpfh(tgt, cfg.fpfh_radius_feature)
    s_ok = np.flatnonzero(~iso_s)
    t_ok = np.flatnonzero(~iso_t)
    if len(s_ok) < 3 or len(t_ok) < 3:
        raise RegistrationFailed("too few featured points")
    si, ti = _mutual_feature_matches(f_src, f_tgt, s_ok, t_ok)
    if len(si) < 3:
        raise RegistrationFailed("too few mutual feature matches")
    corr_src = src.points[si]
    corr_tgt = tgt.points[ti]
    n_corr = len(corr_src)

    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    picks = np.stack([rng.choice(n_corr, size=3, replace=False)
                      for _ in range(cfg.ransac_iters)])
    a = corr_src[picks]            # (iters, 3, 3)
    b = corr_tgt[picks]
    edge_a = np.stack([np.linalg.norm(a[:, 0] - a[:, 1], axis=1),
                       np.linalg.norm(a[:, 1] - a[:, 2], axis=1),
                       np.linalg.norm(a[:, 2] - a[:, 0], axis=1)], axis=1)
    edge_b = np.stack([np.linalg.norm(b[:, 0] - b[:, 1], axis=1),
                       np.linalg.norm(b[:, 1] - b[:, 2], axis=1),
                       np.linalg.norm(b[:, 2] - b[:, 0], axis=1)], axis=1)
    compatible = (np.all(np.abs(edge_a - edge_b) < cfg.ransac_inlier_dist, axis=1)
                  & np.all(edge_a > 3.0 * cfg.registration_voxel, axis=1))
    area = np.linalg.norm(np.cross(a[:, 1] - a[:, 0], a[:, 2] - a[:, 0]), axis=1)
    compatible &= area > 1e-9

    best_count = -1
    best_mask = None
    thresh2 = cfg.ransac_inlier_dist ** 2
    for k in np.flatnonzero(compatible):
        try:
            T = umeyama_align(a[k], b[k])
        except ValueError:
            continue
        d2 = ((corr_src @ T.rotation_matrix().T + T.t - corr_tgt) ** 2).sum(axis=1)
        count = int((d2 < thresh2).sum())
        if count > best_count:
            best_count = count
            best_mask = d2 < thresh2
    if best_mask is None or best_count / n_corr < cfg.ransac_min_inlier_ratio:
        raise RegistrationFailed(
            f"inlier ratio {max(best_count, 0) / n_corr:.3f} below "
            f"{cfg.ransac_min_inlier_ratio}")
    return umeyama_align(corr_src[best_mask], corr_tgt[best_mask])


def icp_refine(source: PointCloud, target: PointCloud, T_coarse: SE3Pose,
               cfg: LoopConfig):
    """Point-to-plane ICP on the full-resolution clouds.

    Returns (transform, RegistrationMetrics); raises RegistrationFailed when
    the final overlap ratio is below the configured minimum."""
    tgt = target if target.normals is not None else estimate_normals(target, 16)
    tgt_valid = tgt.valid_normal_mask()
    tree = SpatialIndex(tgt)
    T = T_coarse
    rmse = np.inf
    overlap = 0.0
    for _ in range(cfg.icp_iters):
        sp_all = T.apply(source.points)
        idx, dist, ok = tree.query_batch(sp_all, cfg.icp_max_dist)
        ok &= tgt_valid[idx]
        n_ok = int(ok.sum())
        overlap = n_ok / len(source)
        if n_ok < 6:
            break
        sp = sp_all[ok]
        p = tgt.points[idx[ok]]
        n = tgt.normals[idx[ok]]
        r = np.einsum("ni,ni->n", sp - p, n)
        J = np.concatenate([n, np.cross(sp, n)], axis=1)
        H = J.T @ J + 1e-12 * np.eye(6)
        b = -J.T @ r
        try:
            xi = np.linalg.solve(H, b)
        except np.linalg.LinAlgError:
            break
        obj0 = float(r @ r)
        alpha = 1.0
        accepted = False
        for _ in range(12):
            T_try = compose(se3_exp(Twist.from_vector(alpha * xi)), T)
            sp_try = T_try.apply(source.points[ok])
            r_try = np.einsum("ni,ni->n", sp_try - p, n)
            if float(r_try @ r_try) <= obj0:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            rmse = np.sqrt(obj0 / n_ok)
            break
        T = T_try
        rmse = np.sqrt(float(r_try @ r_try) / n_ok)
        if float(np.linalg.norm(alpha * xi)) < 1e-10:
            break
    if overlap < cfg.icp_min_overlap:
        raise RegistrationFailed(f"overlap {overlap:.3f} below {cfg.icp_min_overlap}")
    return T, RegistrationMetrics(inlier_rmse=float(rmse), overlap=float(overlap))


def gaussian_means_cloud(submap: SubMap) -> PointCloud:
    """Sub-map Gaussian means as a cloud in the anchor camera frame
    (diagnostic registration source for the constraint ablation)."""
    means_cam = inverse(submap.anchor_pose()).apply(submap.gaussians.means)
    return PointCloud(means_cam, submap.gaussians.colors @ LUMA_WEIGHTS, None,
                      submap.gaussians.colors)


def estimate_loop_constraint(earlier: SubMap, later: SubMap, cfg: LoopConfig,
                             source_kind: str = "anchor_cloud"):
    """Measured relative pose mapping the earlier sub-map's anchor camera
    frame into the later one's, via coarse FPFH+RANSAC then full-resolution
    ICP on the anchor clouds (or Gaussian means in diagnostic mode).

    Returns (SE3Pose, RegistrationMetrics)."""
    if source_kind == "anchor_cloud":
        src = earlier.anchor_cloud
        tgt = later.anchor_cloud
    elif source_kind == "gaussian_means":
        src = gaussian_means_cloud(earlier)
        tgt = gaussian_means_cloud(later)
    else:
        raise ValueError(f"unknown loop constraint source {source_kind!r}")
    T_coarse = global_registration(src, tgt, cfg)
    src_n = estimate_normals(src, 16) if src.normals is None else src
    return icp_refine(src_n, tgt, T_coarse, cfg)
