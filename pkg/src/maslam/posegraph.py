"""SE(3) pose graph: nodes are sub-map anchor poses, edges carry measured
relative transforms with information matrices. Gauss-Newton optimization on
left-multiplied node twists with analytic Jacobians (inverse right Jacobian
times adjoint), gauge fixed at the first node; step halving keeps the
objective non-increasing.

Node keys are (agent id, sub-map seq) tuples; g2o text export/import uses
their sorted order for integer ids.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (SE3Pose, Twist, compose, inverse, se3_adjoint, se3_exp,
                       se3_log, se3_right_jacobian_inverse)


class SingularSystem(RuntimeError):
    pass


class MissingCorrection(KeyError):
    pass


@dataclass
class PoseGraphEdge:
    i: tuple
    j: tuple
    measured: SE3Pose           # expected value of inverse(T_i) * T_j
    information: np.ndarray = None
    kind: str = "odometry"      # odometry | loop

    def __post_init__(self):
        if self.information is None:
            self.information = np.eye(6)
        self.information = np.asarray(self.information, dtype=np.float64).reshape(6, 6)
        ev = np.linalg.eigvalsh(0.5 * (self.information + self.information.T))
        if ev.min() < -1e-9:
            raise ValueError("information matrix must be PSD")


@dataclass
class PoseGraph:
    nodes: dict = field(default_factory=dict)       # key -> SE3Pose
    edges: list = field(default_factory=list)

    def add_node(self, key, pose: SE3Pose) -> None:
        self.nodes[key] = pose

    def add_edge(self, i, j, measured: SE3Pose, information=None,
                 kind: str = "odometry") -> None:
        if i not in self.nodes or j not in self.nodes:
            raise KeyError("edge endpoints must be existing nodes")
        self.edges.append(PoseGraphEdge(i, j, measured, information, kind))

    def sorted_keys(self) -> list:
        return sorted(self.nodes.keys())


def edge_residual(edge: PoseGraphEdge, nodes: dict) -> Twist:
    """log(measured^-1 * (T_i^-1 * T_j))."""
    rel = compose(inverse(nodes[edge.i]), nodes[edge.j])
    return se3_log(compose(inverse(edge.measured), rel))


def graph_objective(graph: PoseGraph, nodes: dict | None = None) -> float:
    nodes = graph.nodes if nodes is None else nodes
    total = 0.0
    for e in graph.edges:
        r = edge_residual(e, nodes).vector()
        total += float(r @ e.information @ r)
    return total


@dataclass
class PGOStats:
    objective_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def optimize_pose_graph(graph: PoseGraph, fixed_key=None, max_iters: int = 50,
                        tol: float = 1e-10):
    """Gauss-Newton over all non-fixed node poses.

    Returns (corrections dict key -> SE3Pose, PGOStats); each correction
    satisfies T_opt = correction * T_initial."""
    keys = graph.sorted_keys()
    if not keys:
        return {}, PGOStats(converged=True)
    if fixed_key is None:
        fixed_key = keys[0]
    if fixed_key not in graph.nodes:
        raise KeyError(f"fixed node {fixed_key} not in graph")
    index = {k: n for n, k in enumerate(keys)}
    n = len(keys)
    nodes = dict(graph.nodes)
    initial = dict(graph.nodes)
    fixed_idx = index[fixed_key]
    free = np.ones(6 * n, dtype=bool)
    free[6 * fixed_idx:6 * fixed_idx + 6] = False

    stats = PGOStats()
    F = graph_objective(graph, nodes)
    stats.objective_trace.append(F)
    moved = {k: False for k in keys}
    if F <= 1e-24:     # already consistent: exact-identity corrections
        stats.converged = True
        return {k: SE3Pose.identity() for k in keys}, stats
    for it in range(max_iters):
        H = np.zeros((6 * n, 6 * n))
        b = np.zeros(6 * n)
        for e in graph.edges:
            r = edge_residual(e, nodes).vector()
            Jr_inv = se3_right_jacobian_inverse(Twist.from_vector(r))
            B = Jr_inv @ se3_adjoint(inverse(nodes[e.j]))
            Ji, Jj = -B, B
            ii, jj = 6 * index[e.i], 6 * index[e.j]
            JiW = Ji.T @ e.information
            JjW = Jj.T @ e.information
            H[ii:ii + 6, ii:ii + 6] += JiW @ Ji
            H[jj:jj + 6, jj:jj + 6] += JjW @ Jj
            H[ii:ii + 6, jj:jj + 6] += JiW @ Jj
            H[jj:jj + 6, ii:ii + 6] += JjW @ Ji
            b[ii:ii + 6] -= JiW @ r
            b[jj:jj + 6] -= JjW @ r
        Hf = H[np.ix_(free, free)]
        bf = b[free]
        delta = None
        for damping in (0.0, 1e-8):
            try:
                sol = np.linalg.solve(Hf + damping * np.eye(Hf.shape[0]), bf)
                if np.all(np.isfinite(sol)):
                    delta = sol
                    break
            except np.linalg.LinAlgError:
                continue
        if delta is None:
            raise SingularSystem(
                f"normal equations singular at iteration {it} "
                f"({len(graph.edges)} edges, {n} nodes)")
        full = np.zeros(6 * n)
        full[free] = delta

        alpha = 1.0
        improved = False
        for _ in range(20):
            trial = {}
            for k in keys:
                d = alpha * full[6 * index[k]:6 * index[k] + 6]
                trial[k] = compose(se3_exp(Twist.from_vector(d)), nodes[k])
            F_try = graph_objective(graph, trial)
            if F_try <= F:
                improved = True
                break
            alpha *= 0.5
        stats.iterations = it + 1
        if not improved:
            stats.converged = True
            break
        dF = F - F_try
        nodes = trial
        for k in keys:
            if np.any(full[6 * index[k]:6 * index[k] + 6] != 0.0):
                moved[k] = True
        F = F_try
        stats.objective_trace.append(F)
        if abs(dF) < tol:
            stats.converged = True
            break
    corrections = {k: compose(nodes[k], inverse(initial[k])) if moved[k]
                   else SE3Pose.identity() for k in keys}
    return corrections, stats


def apply_corrections(corrections: dict, submaps: list, trajectories: dict):
    """Rigidly update each sub-map (keyframe poses, Gaussian means and
    orientations; colors untouched) and every trajectory pose by the owning
    sub-map's correction.

    trajectories: agent id -> list of per-frame SE3Pose (camera -> world).
    Frames are owned by the sub-map whose anchor frame index is the largest
    one not beyond the frame. Returns corrected trajectories; sub-maps are
    updated in place."""
    for sm in submaps:
        if sm.submap_id not in corrections:
            raise MissingCorrection(f"no correction for sub-map {sm.submap_id}")
    by_agent: dict = {}
    for sm in submaps:
        by_agent.setdefault(sm.agent_id, []).append(sm)
    for sms in by_agent.values():
        sms.sort(key=lambda s: s.seq)

    for sm in submaps:
        corr = corrections[sm.submap_id]
        sm.keyframe_poses = [compose(corr, p) for p in sm.keyframe_poses]
        sm.gaussians = sm.gaussians.transformed(corr)

    corrected = {}
    for agent, poses in trajectories.items():
        sms = by_agent.get(agent, [])
        starts = [sm.anchor_frame_index for sm in sms]
        out = []
        for f, pose in enumerate(poses):
            owner = None
            for sm, start in zip(sms, starts):
                if start <= f:
                    owner = sm
                else:
                    break
            if owner is None and sms:
                owner = sms[0]
            corr = corrections[owner.submap_id] if owner else SE3Pose.identity()
            out.append(compose(corr, pose))
        corrected[agent] = out
    return corrected


# ---------------------------------------------------------------------------
# g2o text format
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def export_g2o(path: str | Path, graph: PoseGraph) -> None:
    keys = graph.sorted_keys()
    ids = {k: n for n, k in enumerate(keys)}
    lines = []
    for k in keys:
        p = graph.nodes[k]
        w, x, y, z = p.q
        tx, ty, tz = p.t
        lines.append("VERTEX_SE3:QUAT " + " ".join(
            [str(ids[k])] + [_fmt(v) for v in (tx, ty, tz, x, y, z, w)]))
    for e in graph.edges:
        p = e.measured
        w, x, y, z = p.q
        tx, ty, tz = p.t
        info = e.information
        upper = [info[r, c] for r in range(6) for c in range(r, 6)]
        lines.append("EDGE_SE3:QUAT " + " ".join(
            [str(ids[e.i]), str(ids[e.j])]
            + [_fmt(v) for v in (tx, ty, tz, x, y, z, w)]
            + [_fmt(v) for v in upper]))
    Path(path).write_text("\n".join(lines) + "\n")


def import_g2o(path: str | Path) -> PoseGraph:
    """Parse into a graph whose node keys are the integer vertex ids."""
    graph = PoseGraph()
    for raw in Path(path).read_text().splitlines():
        parts = raw.split()
        if not parts:
            continue
        if parts[0] == "VERTEX_SE3:QUAT":
            vid = int(parts[1])
            tx, ty, tz, qx, qy, qz, qw = (float(v) for v in parts[2:9])
            graph.add_node(vid, SE3Pose(np.array([qw, qx, qy, qz]),
                                        np.array([tx, ty, tz])))
        elif parts[0] == "EDGE_SE3:QUAT":
            i, j = int(parts[1]), int(parts[2])
            tx, ty, tz, qx, qy, qz, qw = (float(v) for v in parts[3:10])
            upper = [float(v) for v in parts[10:31]]
            info = np.zeros((6, 6))
            n = 0
            for r in range(6):
                for c in range(r, 6):
                    info[r, c] = info[c, r] = upper[n]
                    n += 1
            graph.add_edge(i, j, SE3Pose(np.array([qw, qx, qy, qz]),
                                         np.array([tx, ty, tz])),
                           information=info)
    return graph
