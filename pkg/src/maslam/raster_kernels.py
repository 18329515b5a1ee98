"""Numba kernels for splat compositing: front-to-back forward pass and the
matching analytic backward pass.

Splats are processed in depth order; each kernel call walks every Gaussian's
clipped screen bounding box. The weight function is hard-zero outside the
3-sigma Mahalanobis ellipse, with a C1 taper just inside the cut so the
losses stay differentiable; contribution weights are clamped below 1 so the
backward transmittance division is bounded. Loops are serial, so repeated
calls are bit-identical.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

POWER_CUT = -4.5          # 0.5 * (3 sigma)^2
TAPER_WIDTH = 0.5         # C1 rolloff band just inside the cut
W_MAX = 1.0 - 1e-7
W_EPS = 1e-14


@njit(cache=True)
def _window(power: float):
    """C1 taper: 0 at the 3-sigma cut, 1 above the taper band.

    Returns (window, d window / d power)."""
    if power >= POWER_CUT + TAPER_WIDTH:
        return 1.0, 0.0
    t = (power - POWER_CUT) / TAPER_WIDTH
    return t * t * (3.0 - 2.0 * t), 6.0 * t * (1.0 - t) / TAPER_WIDTH


@njit(cache=True)
def composite_forward(us, vs, zs, inv_a, inv_b, inv_c, radii, opac, colors,
                      height, width):
    """Front-to-back compositing over depth-sorted Gaussians.

    Returns color accumulation (H,W,3), raw depth accumulation (H,W),
    transmittance (H,W), and each Gaussian's maximal composited contribution.
    """
    n = us.shape[0]
    color_img = np.zeros((height, width, 3))
    depth_raw = np.zeros((height, width))
    transmit = np.ones((height, width))
    max_contrib = np.zeros(n)
    for i in range(n):
        u = us[i]
        v = vs[i]
        r = radii[i]
        x0 = int(math.ceil(u - r))
        x1 = int(math.floor(u + r))
        y0 = int(math.ceil(v - r))
        y1 = int(math.floor(v + r))
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > width - 1:
            x1 = width - 1
        if y1 > height - 1:
            y1 = height - 1
        if x0 > x1 or y0 > y1:
            continue
        ia = inv_a[i]
        ib = inv_b[i]
        ic = inv_c[i]
        o = opac[i]
        z = zs[i]
        c0 = colors[i, 0]
        c1 = colors[i, 1]
        c2 = colors[i, 2]
        best = 0.0
        for py in range(y0, y1 + 1):
            dy = py - v
            for px in range(x0, x1 + 1):
                dx = px - u
                power = -0.5 * (ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy)
                if power < POWER_CUT:
                    continue
                win, _ = _window(power)
                w = o * math.exp(power) * win
                if w < W_EPS:
                    continue
                if w > W_MAX:
                    w = W_MAX
                t = transmit[py, px]
                contrib = w * t
                color_img[py, px, 0] += contrib * c0
                color_img[py, px, 1] += contrib * c1
                color_img[py, px, 2] += contrib * c2
                depth_raw[py, px] += contrib * z
                transmit[py, px] = t * (1.0 - w)
                if contrib > best:
                    best = contrib
        max_contrib[i] = best
    return color_img, depth_raw, transmit, max_contrib


@njit(cache=True)
def composite_backward(us, vs, zs, inv_a, inv_b, inv_c, radii, opac, colors,
                       grad_color, grad_draw, grad_alpha,
                       color_tot, draw_tot, transmit_fin, height, width):
    """Backward pass matching composite_forward bit-for-bit on the forward
    quantities it recomputes.

    grad_color/grad_draw/grad_alpha are loss gradients w.r.t. the color
    accumulation, raw depth accumulation, and alpha images. Returns per-
    Gaussian gradients w.r.t. opacity, color, camera depth z, projected
    center (u, v), and the 2D covariance entries (a, b, c).
    """
    n = us.shape[0]
    g_opac = np.zeros(n)
    g_color = np.zeros((n, 3))
    g_z = np.zeros(n)
    g_uv = np.zeros((n, 2))
    g_cov = np.zeros((n, 3))
    t_run = np.ones((height, width))
    pref_c0 = np.zeros((height, width))
    pref_c1 = np.zeros((height, width))
    pref_c2 = np.zeros((height, width))
    pref_d = np.zeros((height, width))
    for i in range(n):
        u = us[i]
        v = vs[i]
        r = radii[i]
        x0 = int(math.ceil(u - r))
        x1 = int(math.floor(u + r))
        y0 = int(math.ceil(v - r))
        y1 = int(math.floor(v + r))
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > width - 1:
            x1 = width - 1
        if y1 > height - 1:
            y1 = height - 1
        if x0 > x1 or y0 > y1:
            continue
        ia = inv_a[i]
        ib = inv_b[i]
        ic = inv_c[i]
        o = opac[i]
        z = zs[i]
        c0 = colors[i, 0]
        c1 = colors[i, 1]
        c2 = colors[i, 2]
        for py in range(y0, y1 + 1):
            dy = py - v
            for px in range(x0, x1 + 1):
                dx = px - u
                power = -0.5 * (ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy)
                if power < POWER_CUT:
                    continue
                win, dwin = _window(power)
                e = math.exp(power)
                w = o * e * win
                if w < W_EPS:
                    continue
                clamped = w > W_MAX
                if clamped:
                    w = W_MAX
                t = t_run[py, px]
                contrib = w * t
                gc0 = grad_color[py, px, 0]
                gc1 = grad_color[py, px, 1]
                gc2 = grad_color[py, px, 2]
                gd = grad_draw[py, px]
                ga = grad_alpha[py, px]
                # prefix sums including this Gaussian -> suffix = total - prefix
                pc0 = pref_c0[py, px] + contrib * c0
                pc1 = pref_c1[py, px] + contrib * c1
                pc2 = pref_c2[py, px] + contrib * c2
                pd = pref_d[py, px] + contrib * z
                pref_c0[py, px] = pc0
                pref_c1[py, px] = pc1
                pref_c2[py, px] = pc2
                pref_d[py, px] = pd
                g_color[i, 0] += contrib * gc0
                g_color[i, 1] += contrib * gc1
                g_color[i, 2] += contrib * gc2
                g_z[i] += contrib * gd
                # d loss / d w: own contribution + downstream transmittance
                suffix = (gc0 * (color_tot[py, px, 0] - pc0)
                          + gc1 * (color_tot[py, px, 1] - pc1)
                          + gc2 * (color_tot[py, px, 2] - pc2)
                          + gd * (draw_tot[py, px] - pd))
                dldw = t * (gc0 * c0 + gc1 * c1 + gc2 * c2 + gd * z)
                dldw += (-suffix + ga * transmit_fin[py, px]) / (1.0 - w)
                if not clamped:
                    g_opac[i] += dldw * e * win
                    dldpow = dldw * o * e * (win + dwin)
                    qx = ia * dx + ib * dy
                    qy = ib * dx + ic * dy
                    g_uv[i, 0] += dldpow * qx
                    g_uv[i, 1] += dldpow * qy
                    g_cov[i, 0] += dldpow * 0.5 * qx * qx
                    g_cov[i, 1] += dldpow * qx * qy
                    g_cov[i, 2] += dldpow * 0.5 * qy * qy
                t_run[py, px] = t * (1.0 - w)
    return g_opac, g_color, g_z, g_uv, g_cov
