"""Differentiable image losses shared by mapping, tracking, and merging:
L1 color/depth terms, SSIM (11x11 Gaussian window, sigma 1.5), and the
per-Gaussian scale regularizer.

Loss specs follow the renderer's gradient contract: called with
(color, depth_norm, alpha) images, they return
(loss, d/d color, d/d depth_norm, d/d alpha).
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
_KHALF = 5


def _gaussian_kernel1d(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


_K1D = _gaussian_kernel1d()


def _filt(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian correlation with zero padding (self-adjoint)."""
    out = correlate1d(img, _K1D, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _K1D, axis=1, mode="constant", cval=0.0)


def _interior_mask(h: int, w: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    if h > 2 * _KHALF and w > 2 * _KHALF:
        mask[_KHALF:h - _KHALF, _KHALF:w - _KHALF] = True
    return mask


def ssim_with_gradient(x: np.ndarray, y: np.ndarray):
    """Mean SSIM over fully-covered windows and channels, plus d(SSIM)/dx.

    x, y: H x W x C (or H x W) images on a [0, 1] range.
    """
    if x.shape != y.shape:
        raise ValueError("image shape mismatch")
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    h, w, ch = x.shape
    mask = _interior_mask(h, w)
    count = int(mask.sum())
    grad = np.zeros_like(x)
    if count == 0:
        return 1.0, grad.reshape(x.shape)
    wmap = mask.astype(np.float64) / (count * ch)
    total = 0.0
    for c in range(ch):
        xc, yc = x[..., c], y[..., c]
        a = _filt(xc)
        b = _filt(yc)
        cc = _filt(xc * xc)
        dd = _filt(yc * yc)
        ee = _filt(xc * yc)
        sxy = ee - a * b
        n1 = 2.0 * a * b + SSIM_C1
        n2 = 2.0 * sxy + SSIM_C2
        d1 = a * a + b * b + SSIM_C1
        d2 = (cc - a * a) + (dd - b * b) + SSIM_C2
        s = (n1 * n2) / (d1 * d2)
        total += float(np.sum(s * wmap))
        ds_da = 2.0 * b * (n2 - n1) / (d1 * d2) - 2.0 * a * s * (1.0 / d1 - 1.0 / d2)
        ds_dc = -s / d2
        ds_de = 2.0 * n1 / (d1 * d2)
        grad[..., c] = (_filt(wmap * ds_da)
                        + 2.0 * xc * _filt(wmap * ds_dc)
                        + yc * _filt(wmap * ds_de))
    return total, grad


def scale_regularizer(scales: np.ndarray):
    """Mean L1 deviation of per-Gaussian scales from the set's mean scale.

    Returns (value, gradient w.r.t. scales)."""
    n = len(scales)
    if n == 0:
        return 0.0, np.zeros_like(scales)
    mean = scales.mean(axis=0)
    dev = scales - mean
    signs = np.sign(dev)
    value = float(np.abs(dev).sum() / n)
    grad = (signs - signs.mean(axis=0)) / n
    return value, grad


class MappingLossSpec:
    """Color (L1 + SSIM) and depth L1 terms of the sub-map loss for one
    keyframe; the scale regularizer lives outside the render path."""

    def __init__(self, target_color: np.ndarray, target_depth: np.ndarray,
                 lambda_color: float, lambda_depth: float, lambda_ssim: float):
        self.target_color = target_color
        self.target_depth = target_depth
        self.lambda_color = lambda_color
        self.lambda_depth = lambda_depth
        self.lambda_ssim = lambda_ssim
        self.valid = target_depth > 0.0
        self.n_valid = int(self.valid.sum())
        self.breakdown: dict[str, float] = {}

    def __call__(self, color, depth_norm, alpha):
        diff_c = color - self.target_color
        l1_color = float(np.abs(diff_c).mean())
        ssim_val, ssim_grad = ssim_with_gradient(color, self.target_color)
        l_color = (1.0 - self.lambda_ssim) * l1_color + self.lambda_ssim * (1.0 - ssim_val)

        g_color = self.lambda_color * (
            (1.0 - self.lambda_ssim) * np.sign(diff_c) / diff_c.size
            - self.lambda_ssim * ssim_grad)

        g_depth = np.zeros_like(depth_norm)
        l_depth = 0.0
        if self.n_valid > 0:
            diff_d = np.where(self.valid, depth_norm - self.target_depth, 0.0)
            l_depth = float(np.abs(diff_d).sum() / self.n_valid)
            g_depth = self.lambda_depth * np.sign(diff_d) / self.n_valid

        loss = self.lambda_color * l_color + self.lambda_depth * l_depth
        self.breakdown = {"color": l_color, "depth": l_depth, "ssim": ssim_val,
                          "color_l1": l1_color}
        return loss, g_color, g_depth, np.zeros_like(alpha)


class TrackingLossSpec:
    """Masked weighted L1 on color and depth with a fixed per-pixel weight
    map (inlier mask times soft alpha mask, computed by the caller)."""

    def __init__(self, target_color: np.ndarray, target_depth: np.ndarray,
                 weights: np.ndarray, lambda_c: float):
        self.target_color = target_color
        self.target_depth = target_depth
        self.weights = weights
        self.lambda_c = lambda_c
        self.wsum = float(weights.sum())

    def __call__(self, color, depth_norm, alpha):
        if self.wsum <= 0.0:
            return 0.0, np.zeros_like(color), np.zeros_like(depth_norm), \
                np.zeros_like(alpha)
        diff_c = color - self.target_color
        diff_d = depth_norm - self.target_depth
        per_px = (self.lambda_c * np.abs(diff_c).mean(axis=2)
                  + (1.0 - self.lambda_c) * np.abs(diff_d))
        loss = float((self.weights * per_px).sum() / self.wsum)
        wn = self.weights / self.wsum
        g_color = (self.lambda_c / 3.0) * wn[..., None] * np.sign(diff_c)
        g_depth = (1.0 - self.lambda_c) * wn * np.sign(diff_d)
        return loss, g_color, g_depth, np.zeros_like(alpha)
