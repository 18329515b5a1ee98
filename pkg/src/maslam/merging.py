"""Global map construction: provenance-preserving concatenation of corrected
sub-maps, then joint refinement over sampled keyframes and a final
zero-opacity prune.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import MappingConfig
from .geometry import inverse
from .losses import MappingLossSpec, scale_regularizer
from .renderer import SCALE_MAX, SCALE_MIN, GaussianSet, render_gradients, render_internals


@dataclass
class GlobalMap:
    gaussians: GaussianSet
    owner_ids: list                 # per Gaussian: source (agent, seq)


def coarse_merge(submaps: list) -> GlobalMap:
    """Append all sub-map Gaussians into one set, no deduplication; every
    output Gaussian is a bit-exact copy of an input one."""
    sets = [sm.gaussians for sm in submaps]
    owners = []
    for sm in submaps:
        owners.extend([sm.submap_id] * len(sm.gaussians))
    return GlobalMap(GaussianSet.concat(sets), owners)


@dataclass
class RefineStats:
    loss_before: float = 0.0
    loss_after: float = 0.0
    per_iter_loss: list = field(default_factory=list)
    pruned: int = 0


def _full_set_loss(gaussians: GaussianSet, keyframes: list, cfg: MappingConfig) -> float:
    total = 0.0
    for frame, pose in keyframes:
        spec = MappingLossSpec(frame.color, frame.depth, cfg.lambda_color,
                               cfg.lambda_depth, cfg.lambda_ssim)
        ri = render_internals(gaussians, inverse(pose), frame.intrinsics)
        loss, *_ = spec(ri.color, ri.depth_norm, ri.alpha)
        total += loss
    reg, _ = scale_regularizer(gaussians.scales)
    return total / max(len(keyframes), 1) + cfg.lambda_reg * reg


def fine_refine(global_map: GlobalMap, keyframes: list, iters: int,
                cfg: MappingConfig, seed: int = 0):
    """Optimize the merged map with the mapping losses over randomly sampled
    keyframes (seeded, uniform across the pooled set), then prune Gaussians
    whose opacity fell below the threshold.

    keyframes: pooled (Frame, SE3Pose) pairs from all agents.
    Returns (GlobalMap, RefineStats)."""
    stats = RefineStats()
    gs = global_map.gaussians.copy()
    owners = list(global_map.owner_ids)
    if len(gs) == 0 or not keyframes:
        return GlobalMap(gs, owners), stats
    rng = np.random.Generator(np.random.PCG64(seed))
    stats.loss_before = _full_set_loss(gs, keyframes, cfg)
    for _ in range(iters):
        frame, pose = keyframes[int(rng.integers(len(keyframes)))]
        spec = MappingLossSpec(frame.color, frame.depth, cfg.lambda_color,
                               cfg.lambda_depth, cfg.lambda_ssim)
        g = render_gradients(gs, inverse(pose), frame.intrinsics, spec)
        reg_val, reg_grad = scale_regularizer(gs.scales)
        stats.per_iter_loss.append(g.loss + cfg.lambda_reg * reg_val)
        gs = GaussianSet(
            gs.means - cfg.lr_mean * g.d_mean,
            gs.quats,
            np.clip(gs.scales - cfg.lr_scale * (g.d_scale + cfg.lambda_reg * reg_grad),
                    SCALE_MIN, SCALE_MAX),
            np.clip(gs.opacities - cfg.lr_opacity * g.d_opacity, 1e-4, 1.0),
            np.clip(gs.colors - cfg.lr_color * g.d_color, 0.0, 1.0),
            validate=False)
    stats.loss_after = _full_set_loss(gs, keyframes, cfg)
    keep = gs.opacities >= cfg.opacity_prune
    stats.pruned = int((~keep).sum())
    gs = gs.select(keep)
    owners = [o for o, k in zip(owners, keep) if k]
    return GlobalMap(gs, owners), stats
