"""Fast Point Feature Histograms: per-point 33-bin descriptors built from
pair angles over radius neighborhoods, two-pass (SPFH then distance-weighted
aggregation), with each 11-bin block normalized to sum 100.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud

N_BINS = 11


def _bin_index(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    idx = np.floor((values - lo) / (hi - lo) * N_BINS).astype(np.int64)
    return np.clip(idx, 0, N_BINS - 1)


def _pair_features_batch(ps, ns, pt, nt):
    """Darboux-frame pair angles (alpha, phi, theta) over matched arrays.

    The source of each pair is the point whose normal is better aligned with
    the connecting line (larger |cos|); the direction flips with a swap.
    Coincident points and degenerate frames are masked out."""
    d = pt - ps
    dist = np.linalg.norm(d, axis=1)
    ok = dist > 1e-12
    d = np.where(ok[:, None], d / np.maximum(dist, 1e-300)[:, None], 0.0)
    a1 = np.einsum("ni,ni->n", ns, d)
    a2 = np.einsum("ni,ni->n", nt, d)
    swap = np.abs(a1) < np.abs(a2)
    u = np.where(swap[:, None], nt, ns)
    n2 = np.where(swap[:, None], ns, nt)
    phi = np.where(swap, -a2, a1)
    d = np.where(swap[:, None], -d, d)
    v = np.cross(d, u)
    vn = np.linalg.norm(v, axis=1)
    ok &= vn > 1e-12
    v = v / np.maximum(vn, 1e-300)[:, None]
    w = np.cross(u, v)
    alpha = np.einsum("ni,ni->n", v, n2)
    theta = np.arctan2(np.einsum("ni,ni->n", w, n2), np.einsum("ni,ni->n", u, n2))
    return alpha, phi, theta, ok, dist


def compute_fpfh(cloud: PointCloud, radius: float):
    """FPFH descriptors (N, 33) and an isolated-point mask.

    Points without neighbors in the radius (or without a valid normal) get a
    zero histogram and are flagged isolated.
    """
    n = len(cloud)
    normals = cloud.normals
    if normals is None:
        raise ValueError("FPFH needs normals")
    valid = cloud.valid_normal_mask()
    tree = cKDTree(cloud.points)
    neighbor_lists = tree.query_ball_point(cloud.points, radius)

    src_idx, dst_idx = [], []
    for i, neigh in enumerate(neighbor_lists):
        if not valid[i]:
            continue
        for j in neigh:
            if j != i and valid[j]:
                src_idx.append(i)
                dst_idx.append(j)
    spfh = np.zeros((n, 33))
    counts = np.zeros(n, dtype=np.int64)
    if src_idx:
        si = np.asarray(src_idx)
        di = np.asarray(dst_idx)
        alpha, phi, theta, ok, _ = _pair_features_batch(
            cloud.points[si], normals[si], cloud.points[di], normals[di])
        si, alpha, phi, theta = si[ok], alpha[ok], phi[ok], theta[ok]
        np.add.at(counts, si, 1)
        b_alpha = _bin_index(alpha, -1.0, 1.0)
        b_phi = _bin_index(phi, -1.0, 1.0)
        b_theta = _bin_index(theta, -math.pi, math.pi)
        flat = np.zeros(n * 33)
        np.add.at(flat, si * 33 + b_alpha, 1.0)
        np.add.at(flat, si * 33 + N_BINS + b_phi, 1.0)
        np.add.at(flat, si * 33 + 2 * N_BINS + b_theta, 1.0)
        spfh = flat.reshape(n, 33)

    fpfh = spfh.copy()
    isolated = counts == 0
    for i, neigh in enumerate(neighbor_lists):
        if isolated[i] or not valid[i]:
            continue
        others = [j for j in neigh if j != i and valid[j] and counts[j] > 0]
        if not others:
            continue
        dists = np.linalg.norm(cloud.points[others] - cloud.points[i], axis=1)
        weights = 1.0 / np.maximum(dists, 1e-12)
        fpfh[i] += (weights[:, None] * spfh[others]).sum(axis=0) / len(others)

    # percentage-normalize each 11-bin block
    for block in range(3):
        sl = slice(block * N_BINS, (block + 1) * N_BINS)
        s = fpfh[:, sl].sum(axis=1)
        nz = s > 0.0
        fpfh[nz, sl] *= 100.0 / s[nz, None]
    fpfh[isolated | ~valid] = 0.0
    return fpfh, (isolated | ~valid)
