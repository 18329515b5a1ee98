"""Command-line interface.

Subcommands: generate (scene -> frames on disk), run (full multi-agent
pipeline), evaluate (run dir -> metrics + render report), merge (sub-map dir
-> global map), render (map + trajectory -> images), export-graph (g2o).
Every command exits 0 on success and prints one machine-parseable
"error: ..." line on failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import (RunConfig, UnknownConfigKey, load_run_config,
                     run_config_to_dict)
from .evaluation import (ate_rmse, depth_l1, psnr, rotation_error_deg, ssim,
                         write_metrics)
from .fileio import (MalformedHeader, TruncatedPayload, read_tum, write_config,
                     write_pfm, write_ppm, write_tum)
from .geometry import inverse
from .mapping import (GLOBAL_MAP_AGENT_ID, SubMap, read_submap, write_submap)
from .merging import coarse_merge, fine_refine
from .pipeline import run_system
from .posegraph import PoseGraph, export_g2o, import_g2o
from .renderer import GaussianSet, rasterize
from .scenes import build_scene
from .world import generate_sequences


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if getattr(args, "scene", None):
        cfg.scene = args.scene
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _make_bundle(cfg: RunConfig):
    scene = build_scene(cfg.scene, cfg.frames_per_agent)
    return generate_sequences(scene, depth_sigma=cfg.depth_sigma,
                              pose_drift=cfg.pose_drift, seed=cfg.seed)


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    bundle = _make_bundle(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.txt", run_config_to_dict(cfg))
    for a in range(bundle.agents):
        adir = out / f"agent{a}"
        adir.mkdir(exist_ok=True)
        for t in range(bundle.frames_per_agent):
            f = bundle.frame(a, t)
            write_ppm(adir / f"color_{t:05d}.ppm", f.color)
            write_pfm(adir / f"depth_{t:05d}.pfm", f.depth)
        write_tum(out / f"agent{a}_gt.tum", bundle.gt_trajectory(a))
        write_tum(out / f"agent{a}_odometry.tum", bundle.odometry_trajectory(a))
    print(f"generated {bundle.agents} agents x {bundle.frames_per_agent} frames "
          f"in {out}")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    bundle = _make_bundle(cfg)
    result, agent_outputs = run_system(bundle, cfg, endpoint=args.endpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.txt", run_config_to_dict(cfg))
    for a in sorted(result.trajectories):
        write_tum(out / f"agent{a}_est.tum", result.trajectories[a])
        write_tum(out / f"agent{a}_raw.tum", result.raw_trajectories[a])
        write_tum(out / f"agent{a}_gt.tum", bundle.gt_trajectory(a))
    gmap = result.global_map
    container = SubMap(agent_id=GLOBAL_MAP_AGENT_ID, seq=0,
                       gaussians=gmap.gaussians,
                       anchor_cloud=_empty_anchor(),
                       anchor_frame_index=0, keyframe_poses=[], keyframe_indices=[])
    write_submap(out / "global_map.msub", container)
    if result.graph is not None:
        export_g2o(out / "graph.g2o", result.graph)
    print(f"run complete: {len(result.trajectories)} agents, "
          f"{len(gmap.gaussians)} map Gaussians, {result.loop_edges} loop edges "
          f"-> {out}")
    return 0


def _empty_anchor():
    from .geometry import PointCloud
    return PointCloud(np.zeros((0, 3)), np.zeros(0))


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run_dir)
    cfg = load_run_config(run_dir / "config.txt")
    bundle = _make_bundle(cfg)
    metrics: dict = {}
    ates_with, ates_without = [], []
    for a in range(bundle.agents):
        gt = bundle.gt_trajectory(a)
        _, est = read_tum(run_dir / f"agent{a}_est.tum")
        _, raw = read_tum(run_dir / f"agent{a}_raw.tum")
        with_lc = ate_rmse(est, gt)
        without_lc = ate_rmse(raw, gt)
        metrics[f"ate_with_lc_cm_agent{a}"] = with_lc
        metrics[f"ate_without_lc_cm_agent{a}"] = without_lc
        metrics[f"rot_err_deg_agent{a}"] = rotation_error_deg(est, gt)
        ates_with.append(with_lc)
        ates_without.append(without_lc)
    metrics["ate_with_lc_cm"] = float(np.mean(ates_with))
    metrics["ate_without_lc_cm"] = float(np.mean(ates_without))

    container = read_submap(run_dir / "global_map.msub")
    gaussians = container.gaussians
    render_dir = run_dir / "renders"
    render_dir.mkdir(exist_ok=True)
    psnrs, ssims, depth_errs = [], [], []
    stride = max(1, bundle.frames_per_agent // args.eval_views)
    for a in range(bundle.agents):
        _, est = read_tum(run_dir / f"agent{a}_est.tum")
        for t in range(0, bundle.frames_per_agent, stride):
            frame = bundle.frame(a, t)
            out_img = rasterize(gaussians, inverse(est[t]), frame.intrinsics)
            psnrs.append(psnr(out_img.color, frame.color))
            ssims.append(ssim(out_img.color, frame.color))
            depth_errs.append(depth_l1(out_img.depth, frame.depth))
            write_ppm(render_dir / f"agent{a}_kf{t:05d}.ppm", out_img.color)
            write_pfm(render_dir / f"agent{a}_kf{t:05d}_depth.pfm", out_img.depth)
    metrics["psnr_db"] = float(np.mean(psnrs))
    metrics["ssim"] = float(np.mean(ssims))
    metrics["depth_l1_cm"] = float(np.mean(depth_errs))

    # held-out novel views: poses halfway between frame samples
    nv_psnrs, nv_ssims, nv_depth = [], [], []
    for a in range(bundle.agents):
        for t in range(0, bundle.frames_per_agent - 1, stride):
            pose = bundle.scene.gt_pose(a, t + 0.5)
            from .world import raycast_frame
            gt_frame = raycast_frame(bundle.scene, pose, bundle.intrinsics)
            out_img = rasterize(gaussians, inverse(pose), bundle.intrinsics)
            nv_psnrs.append(psnr(out_img.color, gt_frame.color))
            nv_ssims.append(ssim(out_img.color, gt_frame.color))
            nv_depth.append(depth_l1(out_img.depth, gt_frame.depth))
            write_ppm(render_dir / f"agent{a}_nv{t:05d}.ppm", out_img.color)
    metrics["novel_psnr_db"] = float(np.mean(nv_psnrs))
    metrics["novel_ssim"] = float(np.mean(nv_ssims))
    metrics["novel_depth_l1_cm"] = float(np.mean(nv_depth))
    metrics["n_map_gaussians"] = len(gaussians)

    write_metrics(run_dir / "metrics.txt", metrics)
    for k, v in metrics.items():
        print(f"{k} = {v}")
    return 0


def cmd_merge(args) -> int:
    files = sorted(Path(args.submaps).glob("*.msub"))
    if not files:
        print("error: no .msub files found", file=sys.stderr)
        return 1
    submaps = [read_submap(f) for f in files]
    gmap = coarse_merge(submaps)
    if args.config and args.iters > 0:
        cfg = load_run_config(args.config)
        bundle = _make_bundle(cfg)
        keyframes = []
        for sm in submaps:
            for idx, pose in zip(sm.keyframe_indices, sm.keyframe_poses):
                keyframes.append((bundle.frame(sm.agent_id, idx), pose))
        gmap, _ = fine_refine(gmap, keyframes, args.iters, cfg.mapping,
                              seed=cfg.seed)
    container = SubMap(agent_id=GLOBAL_MAP_AGENT_ID, seq=0, gaussians=gmap.gaussians,
                       anchor_cloud=_empty_anchor(), anchor_frame_index=0,
                       keyframe_poses=[], keyframe_indices=[])
    write_submap(args.out, container)
    print(f"merged {len(submaps)} sub-maps -> {len(gmap.gaussians)} Gaussians "
          f"in {args.out}")
    return 0


def cmd_render(args) -> int:
    container = read_submap(args.map)
    _, poses = read_tum(args.poses)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .world import default_intrinsics
    K = default_intrinsics()
    for i, pose in enumerate(poses):
        img = rasterize(container.gaussians, inverse(pose), K)
        write_ppm(out / f"view_{i:05d}.ppm", img.color)
        write_pfm(out / f"view_{i:05d}_depth.pfm", img.depth)
        write_pfm(out / f"view_{i:05d}_alpha.pfm", img.alpha)
    print(f"rendered {len(poses)} views to {out}")
    return 0


def cmd_export_graph(args) -> int:
    if args.run_dir:
        graph = import_g2o(Path(args.run_dir) / "graph.g2o")
    else:
        files = sorted(Path(args.submaps).glob("*.msub"))
        if not files:
            print("error: no .msub files found", file=sys.stderr)
            return 1
        submaps = [read_submap(f) for f in files]
        graph = PoseGraph()
        from .geometry import relative
        for sm in sorted(submaps, key=lambda s: s.submap_id):
            graph.add_node(sm.submap_id, sm.anchor_pose())
        for sm in sorted(submaps, key=lambda s: s.submap_id):
            prev = (sm.agent_id, sm.seq - 1)
            if prev in graph.nodes:
                graph.add_edge(prev, sm.submap_id,
                               relative(graph.nodes[prev], sm.anchor_pose()))
    export_g2o(args.out, graph)
    print(f"exported {len(graph.nodes)} vertices, {len(graph.edges)} edges "
          f"to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maslam",
                                description="multi-agent splat-map SLAM")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize frame streams to disk")
    g.add_argument("--config")
    g.add_argument("--scene")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="full multi-agent pipeline")
    r.add_argument("--config")
    r.add_argument("--scene")
    r.add_argument("--seed", type=int)
    r.add_argument("--endpoint", default="inproc",
                   help='"inproc" or a host (loopback sockets)')
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("evaluate", help="metrics for a finished run")
    e.add_argument("--run-dir", required=True)
    e.add_argument("--eval-views", type=int, default=10,
                   help="evaluation views per agent")
    e.set_defaults(func=cmd_evaluate)

    m = sub.add_parser("merge", help="merge a directory of .msub files")
    m.add_argument("--submaps", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--config", help="enables fine refinement")
    m.add_argument("--iters", type=int, default=0)
    m.set_defaults(func=cmd_merge)

    v = sub.add_parser("render", help="render a map along a trajectory")
    v.add_argument("--map", required=True)
    v.add_argument("--poses", required=True)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_render)

    x = sub.add_parser("export-graph", help="emit a g2o pose graph")
    x.add_argument("--run-dir")
    x.add_argument("--submaps")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_graph)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UnknownConfigKey as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MalformedHeader, TruncatedPayload) as exc:
        print(f"error: malformed file: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
