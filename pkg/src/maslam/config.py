"""Configuration dataclasses for mapping, tracking, loop closure, and full
runs, plus the flat key-value config file loader.

Key names in config files mirror the hyperparameter names used throughout
(lambda_c, lr_rot, lr_trans, iter_t, iter_m, submap_interval, theta_feature,
theta_sample, alpha_thre, o_thre, ...).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .fileio import read_config


class UnknownConfigKey(ValueError):
    pass


@dataclass
class MappingConfig:
    theta_sample: int = 1500            # seed count per sub-map / densify pass
    theta_submap: int = 50              # frames per sub-map
    lambda_color: float = 1.0
    lambda_depth: float = 1.0
    lambda_reg: float = 1.0
    lambda_ssim: float = 0.2            # SSIM weight inside the color loss
    alpha_thre: float = 0.98            # densify where rendered alpha is below
    depth_discrepancy_factor: float = 40.0
    opacity_prune: float = 0.1          # o_thre
    iter_m: int = 100
    new_gaussian_opacity: float = 0.5
    max_seed_scale: float = 0.06        # cap on nearest-neighbor seed scales
    # fixed step sizes per parameter group
    lr_mean: float = 0.05
    lr_scale: float = 0.02
    lr_color: float = 100.0
    lr_opacity: float = 100.0


@dataclass
class TrackingConfig:
    # coarse-to-fine: (voxel size m, max correspondence distance m, iterations)
    scales: tuple = ((0.16, 0.32, 30), (0.08, 0.16, 20), (0.04, 0.08, 15))
    sigma: float = 0.968                # geometric weight in the joint ICP loss
    lambda_c: float = 0.95              # color weight in the refinement loss
    lr_rot: float = 2e-4
    lr_trans: float = 2e-3
    iter_t: int = 60
    inlier_depth_factor: float = 50.0
    alpha_exponent: float = 3.0
    normal_k: int = 16                  # k-NN size for normal estimation
    gradient_k: int = 15                # k-NN size for intensity gradients


@dataclass
class LoopConfig:
    theta_feature: float = 0.35
    theta_time: int = 300               # min same-agent frame separation; tuned, not from source data
    descriptor_size: int = 32           # thumbnail side; descriptor dim = size^2
    registration_voxel: float = 0.05
    fpfh_radius_normal: float = 0.10
    fpfh_radius_feature: float = 0.25
    ransac_iters: int = 4000
    ransac_inlier_dist: float = 0.08
    ransac_min_inlier_ratio: float = 0.1
    icp_max_dist: float = 0.08
    icp_iters: int = 50
    icp_min_overlap: float = 0.3
    seed: int = 0


@dataclass
class RunConfig:
    """Full multi-agent run: scene, noise, pipeline switches, sub-configs."""

    scene: str = "room2"
    frames_per_agent: int = 150
    seed: int = 1
    depth_sigma: float = 0.0
    pose_drift: float = 0.0             # per-frame odometry twist sigma
    tracking_mode: str = "full"         # full | odometry
    pose_init: str = "icp"              # icp | constant
    loop_closure: bool = True
    loop_constraint_source: str = "anchor_cloud"   # anchor_cloud | gaussian_means
    pgo_mode: str = "final"             # final | per_submap
    merge_iters: int = 300
    mapping: MappingConfig = field(default_factory=MappingConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    loops: LoopConfig = field(default_factory=LoopConfig)


_BOOL_TRUE = {"on", "true", "1", "yes"}
_BOOL_FALSE = {"off", "false", "0", "no"}

# config-file key -> (target object attribute path, type)
_KEY_MAP = {
    "scene": ("scene", str),
    "frames_per_agent": ("frames_per_agent", int),
    "seed": ("seed", int),
    "depth_sigma": ("depth_sigma", float),
    "pose_drift": ("pose_drift", float),
    "tracking_mode": ("tracking_mode", str),
    "pose_init": ("pose_init", str),
    "loop_closure": ("loop_closure", bool),
    "loop_constraint_source": ("loop_constraint_source", str),
    "pgo_mode": ("pgo_mode", str),
    "merge_iters": ("merge_iters", int),
    # mapping
    "theta_sample": ("mapping.theta_sample", int),
    "submap_interval": ("mapping.theta_submap", int),
    "lambda_color": ("mapping.lambda_color", float),
    "lambda_depth": ("mapping.lambda_depth", float),
    "lambda_reg": ("mapping.lambda_reg", float),
    "lambda_ssim": ("mapping.lambda_ssim", float),
    "alpha_thre": ("mapping.alpha_thre", float),
    "depth_discrepancy_factor": ("mapping.depth_discrepancy_factor", float),
    "o_thre": ("mapping.opacity_prune", float),
    "iter_m": ("mapping.iter_m", int),
    "new_gaussian_opacity": ("mapping.new_gaussian_opacity", float),
    "lr_mean": ("mapping.lr_mean", float),
    "lr_scale": ("mapping.lr_scale", float),
    "lr_color": ("mapping.lr_color", float),
    "lr_opacity": ("mapping.lr_opacity", float),
    # tracking
    "sigma": ("tracking.sigma", float),
    "lambda_c": ("tracking.lambda_c", float),
    "lr_rot": ("tracking.lr_rot", float),
    "lr_trans": ("tracking.lr_trans", float),
    "iter_t": ("tracking.iter_t", int),
    "inlier_depth_factor": ("tracking.inlier_depth_factor", float),
    "alpha_exponent": ("tracking.alpha_exponent", float),
    # loop closure
    "theta_feature": ("loops.theta_feature", float),
    "theta_time": ("loops.theta_time", int),
    "registration_voxel": ("loops.registration_voxel", float),
    "fpfh_radius_normal": ("loops.fpfh_radius_normal", float),
    "fpfh_radius_feature": ("loops.fpfh_radius_feature", float),
    "ransac_iters": ("loops.ransac_iters", int),
    "ransac_inlier_dist": ("loops.ransac_inlier_dist", float),
    "icp_max_dist": ("loops.icp_max_dist", float),
    "ransac_seed": ("loops.seed", int),
}

_CHOICES = {
    "tracking_mode": {"full", "odometry"},
    "pose_init": {"icp", "constant"},
    "loop_constraint_source": {"anchor_cloud", "gaussian_means"},
    "pgo_mode": {"final", "per_submap"},
}


def _parse_bool(key: str, raw: str) -> bool:
    low = raw.lower()
    if low in _BOOL_TRUE:
        return True
    if low in _BOOL_FALSE:
        return False
    raise UnknownConfigKey(f"config key '{key}': cannot parse boolean from {raw!r}")


def run_config_from_dict(values: dict[str, str]) -> RunConfig:
    cfg = RunConfig()
    for key, raw in values.items():
        if key not in _KEY_MAP:
            raise UnknownConfigKey(f"unknown config key '{key}'")
        path, typ = _KEY_MAP[key]
        try:
            value = _parse_bool(key, raw) if typ is bool else typ(raw)
        except ValueError as exc:
            raise UnknownConfigKey(f"config key '{key}': bad value {raw!r}") from exc
        if key in _CHOICES and value not in _CHOICES[key]:
            raise UnknownConfigKey(
                f"config key '{key}': {value!r} not in {sorted(_CHOICES[key])}")
        target = cfg
        *parents, attr = path.split(".")
        for p in parents:
            target = getattr(target, p)
        setattr(target, attr, value)
    return cfg


def load_run_config(path) -> RunConfig:
    return run_config_from_dict(read_config(path))


def run_config_to_dict(cfg: RunConfig) -> dict[str, str]:
    """Flat key-value view of a RunConfig (inverse of run_config_from_dict)."""
    out: dict[str, str] = {}
    for key, (path, typ) in _KEY_MAP.items():
        target = cfg
        *parents, attr = path.split(".")
        for p in parents:
            target = getattr(target, p)
        value = getattr(target, attr)
        if typ is bool:
            out[key] = "on" if value else "off"
        else:
            out[key] = str(value)
    return out
