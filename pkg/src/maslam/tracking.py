"""Two-stage pose estimation: deterministic multi-scale colored ICP between
consecutive frames, then masked re-render refinement against the active
sub-map.

The joint ICP objective mixes squared point-to-plane residuals (weight
sigma) with squared tangent-plane photometric residuals (weight 1 - sigma);
each Gauss-Newton step is line-searched by halving so the objective is
non-increasing at fixed correspondences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import TrackingConfig
from .geometry import (PointCloud, SE3Pose, SpatialIndex, Twist, compose,
                       estimate_normals, inverse, se3_adjoint, se3_exp,
                       transform_cloud, voxel_downsample)
from .losses import TrackingLossSpec
from .renderer import GaussianSet, render_gradients, render_internals
from .world import Frame, NoValidDepth, backproject

MIN_CORRESPONDENCES = 10


class EmptySubmap(ValueError):
    pass


@dataclass
class CorrespondenceSet:
    """Matched ids between the previous cloud (p) and the current cloud (q),
    plus the geometric weight sigma of the joint objective."""

    prev_ids: np.ndarray
    curr_ids: np.ndarray
    sigma: float


@dataclass
class ICPResult:
    transform: SE3Pose          # maps current-frame points into the previous frame
    low_confidence: bool = False
    n_correspondences: int = 0
    final_objective: float = 0.0
    objective_trace: list = field(default_factory=list)


def intensity_gradients(cloud: PointCloud, k: int = 15) -> np.ndarray:
    """Per-point intensity gradient in the tangent plane, least squares over
    k neighbors with a hard in-plane constraint. NaN rows where the normal is
    invalid or the neighborhood is rank-deficient."""
    n = len(cloud)
    grads = np.full((n, 3), np.nan)
    valid = cloud.valid_normal_mask()
    if n < 2 or not np.any(valid):
        return grads
    k_eff = min(k + 1, n)
    tree = SpatialIndex(cloud)
    _, idx = tree.query_knn(cloud.points, k_eff)
    if k_eff == 1:
        idx = idx[:, None]
    pts = cloud.points
    ints = cloud.intensities
    normals = cloud.normals
    neigh = pts[idx]                                  # (n, k, 3)
    rel = neigh - pts[:, None, :]
    # project neighbors onto each point's tangent plane
    dot = np.einsum("nkj,nj->nk", rel, np.where(valid[:, None], normals, 0.0))
    rel_t = rel - dot[..., None] * normals[:, None, :]
    dC = ints[idx] - ints[:, None]
    AtA = np.einsum("nki,nkj->nij", rel_t, rel_t)
    # constraint row: gradient stays in the tangent plane
    w_con = float(k_eff)
    AtA += w_con ** 2 * np.einsum("ni,nj->nij", np.nan_to_num(normals),
                                  np.nan_to_num(normals))
    Atb = np.einsum("nki,nk->ni", rel_t, dC)
    AtA += 1e-12 * np.eye(3)
    try:
        sol = np.linalg.solve(AtA, Atb[..., None])[..., 0]
    except np.linalg.LinAlgError:
        sol = np.full((n, 3), np.nan)
    # exact tangent projection
    sol -= np.einsum("ni,ni->n", sol, np.nan_to_num(normals))[:, None] * \
        np.nan_to_num(normals)
    sol[~valid] = np.nan
    return sol


def _joint_objective(sp: np.ndarray, p: np.ndarray, n: np.ndarray, g: np.ndarray,
                     c_p: np.ndarray, c_q: np.ndarray, sigma: float) -> float:
    d = sp - p
    r_g = np.einsum("ni,ni->n", d, n)
    proj = sp - r_g[:, None] * n
    r_c = c_p + np.einsum("ni,ni->n", g, proj - p) - c_q
    return float(sigma * np.dot(r_g, r_g) + (1.0 - sigma) * np.dot(r_c, r_c))


def colored_icp(cloud_t: PointCloud, cloud_prev: PointCloud, T_init: SE3Pose,
                cfg: TrackingConfig) -> ICPResult:
    """Estimate the transform mapping cloud_t into cloud_prev's frame.

    Both clouds need normals and intensities. Deterministic: same inputs give
    bit-identical output."""
    T = T_init
    sigma = cfg.sigma
    low_conf = False
    n_corr = 0
    final_obj = 0.0
    trace: list = []
    n_scales = len(cfg.scales)
    for level, (voxel, max_corr, max_iters) in enumerate(cfg.scales):
        finest = level == n_scales - 1
        src = voxel_downsample(cloud_t, voxel)
        tgt = voxel_downsample(cloud_prev, voxel)
        tgt_valid = tgt.valid_normal_mask()
        grads = intensity_gradients(tgt, cfg.gradient_k)
        grad_valid = ~np.any(np.isnan(grads), axis=1)
        tree = SpatialIndex(tgt)
        for _ in range(max_iters):
            sp_all = T.apply(src.points)
            idx, dist, ok = tree.query_batch(sp_all, max_corr)
            ok &= tgt_valid[idx] & grad_valid[idx]
            n_corr = int(ok.sum())
            if n_corr < MIN_CORRESPONDENCES:
                if finest:
                    return ICPResult(T_init, low_confidence=True,
                                     n_correspondences=n_corr,
                                     objective_trace=trace)
                break
            q_ids = np.flatnonzero(ok)
            p_ids = idx[ok]
            sp = sp_all[q_ids]
            p = tgt.points[p_ids]
            n = tgt.normals[p_ids]
            g = grads[p_ids]
            c_p = tgt.intensities[p_ids]
            c_q = src.intensities[q_ids]

            d = sp - p
            r_g = np.einsum("ni,ni->n", d, n)
            proj = sp - r_g[:, None] * n
            r_c = c_p + np.einsum("ni,ni->n", g, proj - p) - c_q

            J_g = np.concatenate([n, np.cross(sp, n)], axis=1)
            J_c = np.concatenate([g, np.cross(sp, g)], axis=1)
            H = (sigma * J_g.T @ J_g + (1.0 - sigma) * J_c.T @ J_c)
            b = -(sigma * J_g.T @ r_g + (1.0 - sigma) * J_c.T @ r_c)
            H += (1e-12 * np.trace(H) / 6.0 + 1e-15) * np.eye(6)
            try:
                xi = np.linalg.solve(H, b)
            except np.linalg.LinAlgError:
                break
            obj0 = float(sigma * r_g @ r_g + (1.0 - sigma) * r_c @ r_c)
            alpha = 1.0
            accepted = False
            for _ in range(12):
                T_try = compose(se3_exp(Twist.from_vector(alpha * xi)), T)
                obj1 = _joint_objective(T_try.apply(src.points[q_ids]), p, n, g,
                                        c_p, c_q, sigma)
                if obj1 <= obj0:
                    accepted = True
                    break
                alpha *= 0.5
            trace.append((level, obj0, obj1 if accepted else obj0))
            if not accepted:
                final_obj = obj0
                break
            T = T_try
            final_obj = obj1
            if float(np.linalg.norm(alpha * xi)) < 1e-8:
                break
    return ICPResult(T, low_confidence=low_conf, n_correspondences=n_corr,
                     final_objective=final_obj, objective_trace=trace)


def prepare_tracking_cloud(frame: Frame, cfg: TrackingConfig) -> PointCloud:
    """Backproject and estimate sensor-oriented normals once per frame."""
    cloud = backproject(frame)
    return estimate_normals(cloud, cfg.normal_k)


@dataclass
class InitResult:
    pose: SE3Pose               # camera -> world
    relative: SE3Pose           # previous frame <- current frame
    low_confidence: bool


def initialize_pose(frame_t: Frame, frame_prev: Frame, pose_prev_world: SE3Pose,
                    cfg: TrackingConfig,
                    cloud_t: PointCloud | None = None,
                    cloud_prev: PointCloud | None = None) -> InitResult:
    """Frame-to-frame colored ICP from identity, composed onto the previous
    world pose. Falls back to the previous pose when a frame has no valid
    depth or correspondences collapse."""
    try:
        ct = cloud_t if cloud_t is not None else prepare_tracking_cloud(frame_t, cfg)
        cp = cloud_prev if cloud_prev is not None else \
            prepare_tracking_cloud(frame_prev, cfg)
    except NoValidDepth:
        return InitResult(pose_prev_world, SE3Pose.identity(), True)
    res = colored_icp(ct, cp, SE3Pose.identity(), cfg)
    return InitResult(compose(pose_prev_world, res.transform), res.transform,
                      res.low_confidence)


@dataclass
class RefineResult:
    pose: SE3Pose
    loss: float
    all_masked: bool = False
    losses: list = field(default_factory=list)


def tracking_weights(depth_norm: np.ndarray, alpha: np.ndarray, frame: Frame,
                     cfg: TrackingConfig) -> np.ndarray:
    """Per-pixel weights: inlier mask (depth error below the median-scaled
    threshold, valid input depth) times the soft alpha mask alpha^k."""
    valid = frame.depth > 0.0
    err = np.abs(depth_norm - frame.depth)
    if not np.any(valid):
        return np.zeros_like(depth_norm)
    med = np.median(err[valid])
    inlier = valid & (err <= cfg.inlier_depth_factor * max(med, 1e-12))
    return inlier * np.power(np.clip(alpha, 0.0, 1.0), cfg.alpha_exponent)


def refine_pose(context: GaussianSet, frame: Frame, T_init_world: SE3Pose,
                cfg: TrackingConfig) -> RefineResult:
    """First-order descent on a left-multiplied world-frame twist of the
    camera pose under the masked re-render loss; returns the best iterate."""
    if len(context) == 0:
        return RefineResult(T_init_world, 0.0, all_masked=True)
    K = frame.intrinsics
    pose = T_init_world
    best_pose, best_loss = T_init_world, np.inf
    any_live = False
    losses = []
    for step in range(cfg.iter_t + 1):
        pose_cw = inverse(pose)
        ri = render_internals(context, pose_cw, K)
        weights = tracking_weights(ri.depth_norm, ri.alpha, frame, cfg)
        spec = TrackingLossSpec(frame.color, frame.depth, weights, cfg.lambda_c)
        if spec.wsum <= 0.0:
            losses.append(np.inf)
            if step == cfg.iter_t:
                break
            continue
        any_live = True
        g = render_gradients(context, pose_cw, K, spec)
        losses.append(g.loss)
        if g.loss < best_loss:
            best_loss, best_pose = g.loss, pose
        if step == cfg.iter_t:
            break
        # camera-frame twist gradient -> world-frame left twist on T_wc
        g_world = -se3_adjoint(pose_cw).T @ g.d_cam_twist
        step_vec = np.concatenate([-cfg.lr_trans * g_world[:3],
                                   -cfg.lr_rot * g_world[3:]])
        pose = compose(se3_exp(Twist.from_vector(step_vec)), pose)
    if not any_live:
        return RefineResult(T_init_world, 0.0, all_masked=True, losses=losses)
    return RefineResult(best_pose, best_loss, losses=losses)
