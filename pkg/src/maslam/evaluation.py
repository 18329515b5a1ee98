"""Trajectory and rendering metrics: ATE RMSE (cm) after rigid alignment,
PSNR (capped), SSIM, and depth L1 (cm), plus the key=value metrics file.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .geometry import SE3Pose, compose, inverse, umeyama_align
from .losses import ssim_with_gradient


class LengthMismatch(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


def ate_rmse(est: list[SE3Pose], gt: list[SE3Pose]) -> float:
    """Root-mean-square translational error in centimeters after rigid
    (no-scale) alignment of the estimated trajectory onto the ground truth."""
    if len(est) != len(gt):
        raise LengthMismatch(f"{len(est)} vs {len(gt)} poses")
    T = umeyama_align(est, gt)
    e = np.array([p.t for p in est]) @ T.rotation_matrix().T + T.t
    g = np.array([p.t for p in gt])
    return float(np.sqrt(np.mean(np.sum((e - g) ** 2, axis=1)))) * 100.0


def rotation_error_deg(est: list[SE3Pose], gt: list[SE3Pose]) -> float:
    """Diagnostic: mean relative-rotation error (degrees) after alignment."""
    if len(est) != len(gt):
        raise LengthMismatch(f"{len(est)} vs {len(gt)} poses")
    T = umeyama_align(est, gt)
    errs = []
    for e, g in zip(est, gt):
        d = compose(inverse(compose(T, e)), g)
        errs.append(d.rotation_angle())
    return float(np.degrees(np.mean(errs)))


PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1/MSE) for [0,1] images, capped at 99 dB."""
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    value, _ = ssim_with_gradient(np.asarray(a, dtype=np.float64),
                                  np.asarray(b, dtype=np.float64))
    return float(value)


def depth_l1(a: np.ndarray, b: np.ndarray, valid: np.ndarray | None = None) -> float:
    """Mean |a - b| over jointly valid pixels, in centimeters."""
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    mask = (a > 0) & (b > 0) if valid is None else valid.astype(bool)
    if not np.any(mask):
        return 0.0
    return float(np.mean(np.abs(a[mask] - b[mask]))) * 100.0


def write_metrics(path: str | Path, metrics: dict) -> None:
    lines = [f"{k} = {_fmt_metric(v)}" for k, v in metrics.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt_metric(v) -> str:
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def read_metrics(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out
