"""CPU forward rasterizer for 3D Gaussians with analytic gradients.

Projection is EWA-style: camera-frame covariance conjugated by the camera
rotation, flattened through the perspective Jacobian at the projected mean,
plus a 0.3 px^2 isotropic anti-alias floor. Compositing is front-to-back
over Gaussians sorted by camera-space depth (ties broken by index).

Gradients are analytic (backprop mirroring the forward kernel) for opacity,
color, scale, mean, and a left-multiplied camera-frame twist on the
world-to-camera pose; they are validated against central finite differences
in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import SE3Pose, quat_canonical, quat_multiply
from .raster_kernels import composite_backward, composite_forward
from .world import CameraIntrinsics

ANTIALIAS_FLOOR = 0.3     # px^2 added to both 2D covariance diagonals
ALPHA_DEPTH_CUT = 1e-4    # depth reported as 0 below this alpha
SCALE_MIN = 1e-6
SCALE_MAX = 10.0


@dataclass(frozen=True)
class Gaussian:
    """Single renderable splat (convenience view; bulk ops use GaussianSet)."""

    mean: np.ndarray
    rotation: np.ndarray      # unit quaternion (w, x, y, z)
    scale: np.ndarray         # per-axis std-dev, meters
    opacity: float
    color: np.ndarray


class GaussianSet:
    """Struct-of-arrays collection of Gaussians."""

    __slots__ = ("means", "quats", "scales", "opacities", "colors")

    def __init__(self, means, quats, scales, opacities, colors, validate: bool = True):
        self.means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        self.quats = np.asarray(quats, dtype=np.float64).reshape(-1, 4)
        self.scales = np.asarray(scales, dtype=np.float64).reshape(-1, 3)
        self.opacities = np.asarray(opacities, dtype=np.float64).reshape(-1)
        self.colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        if not (len(self.quats) == len(self.scales) == len(self.opacities)
                == len(self.colors) == n):
            raise ValueError("field length mismatch")
        norms = np.linalg.norm(self.quats, axis=1)
        if validate:
            if np.any(norms == 0.0):
                raise ValueError("zero quaternion")
            if np.any(self.scales < SCALE_MIN) or np.any(self.scales > SCALE_MAX):
                raise ValueError("scale out of range")
            if np.any(self.opacities <= 0.0) or np.any(self.opacities > 1.0):
                raise ValueError("opacity out of (0, 1]")
        off = np.abs(norms - 1.0) > 1e-12   # renormalize only when needed (bit-stable)
        if np.any(off):
            self.quats = self.quats.copy()
            self.quats[off] /= norms[off, None]

    def __len__(self) -> int:
        return len(self.means)

    @staticmethod
    def empty() -> "GaussianSet":
        return GaussianSet(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                           np.zeros(0), np.zeros((0, 3)), validate=False)

    @staticmethod
    def concat(sets: list["GaussianSet"]) -> "GaussianSet":
        if not sets:
            return GaussianSet.empty()
        return GaussianSet(
            np.concatenate([s.means for s in sets]),
            np.concatenate([s.quats for s in sets]),
            np.concatenate([s.scales for s in sets]),
            np.concatenate([s.opacities for s in sets]),
            np.concatenate([s.colors for s in sets]),
            validate=False,
        )

    def select(self, idx) -> "GaussianSet":
        return GaussianSet(self.means[idx], self.quats[idx], self.scales[idx],
                           self.opacities[idx], self.colors[idx], validate=False)

    def copy(self) -> "GaussianSet":
        return GaussianSet(self.means.copy(), self.quats.copy(), self.scales.copy(),
                           self.opacities.copy(), self.colors.copy(), validate=False)

    def transformed(self, T: SE3Pose) -> "GaussianSet":
        """Rigid update: means by the full transform, orientations by its
        rotation (quaternion pre-multiplication); colors untouched."""
        R = T.rotation_matrix()
        quats = np.stack([quat_canonical(quat_multiply(T.q, q)) for q in self.quats]) \
            if len(self) else self.quats.copy()
        return GaussianSet(self.means @ R.T + T.t, quats, self.scales.copy(),
                           self.opacities.copy(), self.colors.copy(), validate=False)

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(self.means[i], self.quats[i], self.scales[i],
                        float(self.opacities[i]), self.colors[i])

    def covariances(self) -> np.ndarray:
        """World-frame 3x3 covariances R diag(s^2) R^T, shape (N, 3, 3)."""
        R = batch_quat_to_matrix(self.quats)
        S2 = self.scales ** 2
        return np.einsum("nij,nj,nkj->nik", R, S2, R)


def batch_quat_to_matrix(quats: np.ndarray) -> np.ndarray:
    w, x, y, z = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    R = np.empty((len(quats), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


@dataclass
class RenderOutput:
    color: np.ndarray     # H x W x 3
    depth: np.ndarray     # H x W, 0 where alpha < ALPHA_DEPTH_CUT
    alpha: np.ndarray     # H x W in [0, 1]


@dataclass
class RenderInternals:
    """Forward byproducts needed by the backward pass and diagnostics."""

    color: np.ndarray
    depth_raw: np.ndarray        # alpha-weighted depth accumulation, unnormalized
    depth_norm: np.ndarray       # depth_raw / max(alpha, 1e-6), no zeroing
    alpha: np.ndarray
    transmit: np.ndarray
    max_contrib: np.ndarray      # per input Gaussian, composited max over pixels
    skipped_noninvertible: int
    # projection data for the Gaussians that reached the kernel, sorted
    order: np.ndarray            # original indices in kernel order
    means_cam: np.ndarray
    cov_cam: np.ndarray
    cov2d: np.ndarray            # (M, 3): a, b, c
    us: np.ndarray
    vs: np.ndarray
    inv2d: np.ndarray            # (M, 3): inverse entries
    radii: np.ndarray


def _project(gaussians: GaussianSet, pose_cw: SE3Pose, K: CameraIntrinsics):
    """Camera-frame means/covariances and 2D footprints for front-facing,
    invertible Gaussians, sorted by (depth, index)."""
    R = pose_cw.rotation_matrix()
    means_cam = gaussians.means @ R.T + pose_cw.t
    cov_world = gaussians.covariances()
    cov_cam = np.einsum("ij,njk,lk->nil", R, cov_world, R)

    front = means_cam[:, 2] > 1e-9
    idx = np.flatnonzero(front)
    mc = means_cam[idx]
    cc = cov_cam[idx]
    x, y, z = mc[:, 0], mc[:, 1], mc[:, 2]
    fx, fy = K.fx, K.fy
    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / z ** 2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / z ** 2
    cov2 = np.einsum("nij,njk,nlk->nil", J, cc, J)
    a = cov2[:, 0, 0] + ANTIALIAS_FLOOR
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + ANTIALIAS_FLOOR
    det = a * c - b * b
    ok = np.isfinite(det) & (det > 1e-12) & np.isfinite(a) & np.isfinite(c)
    skipped = int(len(idx) - ok.sum())
    idx = idx[ok]
    mc, cc = mc[ok], cc[ok]
    a, b, c, det = a[ok], b[ok], c[ok], det[ok]
    x, y, z = mc[:, 0], mc[:, 1], mc[:, 2]
    us = fx * x / z + K.cx
    vs = fy * y / z + K.cy
    inv_a = c / det
    inv_b = -b / det
    inv_c = a / det
    lam_max = 0.5 * ((a + c) + np.sqrt((a - c) ** 2 + 4.0 * b * b))
    radii = 3.0 * np.sqrt(lam_max)
    order_local = np.lexsort((idx, z))
    return (idx[order_local], mc[order_local],
            cc[order_local],
            np.stack([a, b, c], axis=1)[order_local],
            us[order_local], vs[order_local],
            np.stack([inv_a, inv_b, inv_c], axis=1)[order_local],
            radii[order_local], skipped)


def render_internals(gaussians: GaussianSet, pose_cw: SE3Pose,
                     K: CameraIntrinsics) -> RenderInternals:
    (order, mc, cc, cov2d, us, vs, inv2d, radii, skipped) = _project(gaussians, pose_cw, K)
    color, depth_raw, transmit, max_contrib_sorted = composite_forward(
        us, vs, np.ascontiguousarray(mc[:, 2]), inv2d[:, 0], inv2d[:, 1], inv2d[:, 2],
        radii, gaussians.opacities[order], np.ascontiguousarray(gaussians.colors[order]),
        K.height, K.width)
    alpha = 1.0 - transmit
    depth_norm = depth_raw / np.maximum(alpha, 1e-6)
    max_contrib = np.zeros(len(gaussians))
    max_contrib[order] = max_contrib_sorted
    return RenderInternals(color, depth_raw, depth_norm, alpha, transmit,
                           max_contrib, skipped, order, mc, cc, cov2d, us, vs,
                           inv2d, radii)


def rasterize(gaussians: GaussianSet, pose_cw: SE3Pose, K: CameraIntrinsics) -> RenderOutput:
    """Render color, alpha-weighted mean depth, and accumulated alpha."""
    ri = render_internals(gaussians, pose_cw, K)
    depth = np.where(ri.alpha >= ALPHA_DEPTH_CUT, ri.depth_norm, 0.0)
    return RenderOutput(ri.color, depth, ri.alpha)


def rendered_opacity_per_gaussian(gaussians: GaussianSet, pose_cw: SE3Pose,
                                  K: CameraIntrinsics) -> np.ndarray:
    """Maximal composited contribution of each Gaussian over all pixels;
    exactly 0 for Gaussians behind the camera or with off-image footprints."""
    return render_internals(gaussians, pose_cw, K).max_contrib


@dataclass
class RenderGradients:
    loss: float
    d_opacity: np.ndarray
    d_color: np.ndarray
    d_scale: np.ndarray
    d_mean: np.ndarray
    d_cam_twist: np.ndarray   # left twist (rho, phi) on the world->camera pose


_GENERATORS = np.zeros((3, 3, 3))
_GENERATORS[0, 2, 1] = 1.0
_GENERATORS[0, 1, 2] = -1.0
_GENERATORS[1, 0, 2] = 1.0
_GENERATORS[1, 2, 0] = -1.0
_GENERATORS[2, 1, 0] = 1.0
_GENERATORS[2, 0, 1] = -1.0


def render_gradients(gaussians: GaussianSet, pose_cw: SE3Pose, K: CameraIntrinsics,
                     loss_spec) -> RenderGradients:
    """Evaluate loss_spec on the rendered images and backpropagate.

    loss_spec(color, depth_norm, alpha) must return
    (loss, d/d color, d/d depth_norm, d/d alpha).
    """
    ri = render_internals(gaussians, pose_cw, K)
    loss, g_color_img, g_dnorm_img, g_alpha_img = loss_spec(ri.color, ri.depth_norm,
                                                            ri.alpha)
    denom = np.maximum(ri.alpha, 1e-6)
    g_draw_img = g_dnorm_img / denom
    g_alpha_tot = np.array(g_alpha_img, dtype=np.float64, copy=True)
    live = ri.alpha > 1e-6
    g_alpha_tot[live] -= g_dnorm_img[live] * ri.depth_raw[live] / denom[live] ** 2

    n = len(gaussians)
    grads = RenderGradients(float(loss), np.zeros(n), np.zeros((n, 3)),
                            np.zeros((n, 3)), np.zeros((n, 3)), np.zeros(6))
    m = len(ri.order)
    if m == 0:
        return grads

    color_tot = ri.color
    g_opac, g_col, g_z, g_uv, g_cov = composite_backward(
        ri.us, ri.vs, np.ascontiguousarray(ri.means_cam[:, 2]),
        ri.inv2d[:, 0], ri.inv2d[:, 1], ri.inv2d[:, 2], ri.radii,
        gaussians.opacities[ri.order], np.ascontiguousarray(gaussians.colors[ri.order]),
        np.ascontiguousarray(g_color_img), np.ascontiguousarray(g_draw_img),
        np.ascontiguousarray(g_alpha_tot),
        np.ascontiguousarray(color_tot), np.ascontiguousarray(ri.depth_raw),
        np.ascontiguousarray(ri.transmit), K.height, K.width)

    x, y, z = ri.means_cam[:, 0], ri.means_cam[:, 1], ri.means_cam[:, 2]
    fx, fy = K.fx, K.fy

    # 2D covariance gradient as a full symmetric matrix
    GM = np.zeros((m, 2, 2))
    GM[:, 0, 0] = g_cov[:, 0]
    GM[:, 0, 1] = GM[:, 1, 0] = 0.5 * g_cov[:, 1]
    GM[:, 1, 1] = g_cov[:, 2]

    J = np.zeros((m, 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / z ** 2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / z ** 2

    d_cov_cam = np.einsum("nji,njk,nkl->nil", J, GM, J)
    dJ = 2.0 * np.einsum("nij,njk,nkl->nil", GM, J, ri.cov_cam)

    d_mc = np.zeros((m, 3))
    d_mc[:, 0] = g_uv[:, 0] * fx / z + dJ[:, 0, 2] * (-fx / z ** 2)
    d_mc[:, 1] = g_uv[:, 1] * fy / z + dJ[:, 1, 2] * (-fy / z ** 2)
    d_mc[:, 2] = (g_z
                  + g_uv[:, 0] * (-fx * x / z ** 2)
                  + g_uv[:, 1] * (-fy * y / z ** 2)
                  + dJ[:, 0, 0] * (-fx / z ** 2)
                  + dJ[:, 1, 1] * (-fy / z ** 2)
                  + dJ[:, 0, 2] * (2.0 * fx * x / z ** 3)
                  + dJ[:, 1, 2] * (2.0 * fy * y / z ** 3))

    R = pose_cw.rotation_matrix()
    d_mean_sorted = d_mc @ R
    d_cov_world = np.einsum("ji,njk,kl->nil", R, d_cov_cam, R)

    Rq = batch_quat_to_matrix(gaussians.quats[ri.order])
    M_local = np.einsum("nji,njk,nkl->nil", Rq, d_cov_world, Rq)
    scales_sorted = gaussians.scales[ri.order]
    d_scale_sorted = 2.0 * scales_sorted * np.einsum("nii->ni", M_local)

    grads.d_opacity[ri.order] = g_opac
    grads.d_color[ri.order] = g_col
    grads.d_mean[ri.order] = d_mean_sorted
    grads.d_scale[ri.order] = d_scale_sorted

    # camera twist (left perturbation of the world->camera pose)
    grads.d_cam_twist[:3] = d_mc.sum(axis=0)
    grads.d_cam_twist[3:] = np.cross(ri.means_cam, d_mc).sum(axis=0)
    for k in range(3):
        Gk = _GENERATORS[k]
        comm = np.einsum("ij,njk->nik", Gk, ri.cov_cam) - np.einsum(
            "nij,jk->nik", ri.cov_cam, Gk)
        grads.d_cam_twist[3 + k] += float(np.einsum("nij,nij->", d_cov_cam, comm))
    return grads
