"""Multi-agent orchestration: per-agent tracking+mapping loops, the
centralized server (descriptor store, loop constraints, pose graph,
corrections, merging), and the two transports (in-process and TCP sockets)
carrying the same framed protocol.

In-process runs execute agents round-robin one sub-map interval at a time,
fixing the message interleaving; with pgo_mode=final the results are
interleaving-invariant, so socket runs reproduce them.
"""

from __future__ import annotations

import logging
import socket
import threading
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .descriptors import DescriptorStore, detect_loops, extract_descriptor
from .geometry import SE3Pose, compose, relative
from .mapping import SubMap, densify, optimize_submap, seed_submap, select_dispatch
from .merging import GlobalMap, RefineStats, coarse_merge, fine_refine
from .posegraph import (PoseGraph, apply_corrections, graph_objective,
                        optimize_pose_graph)
from .protocol import (Ack, BadMagic, CrcMismatch, DescriptorUpload, Hello,
                       LengthOverflow, MalformedPayload, PoseCorrections,
                       Shutdown, SubMapUpload, TruncatedFrame, VersionMismatch,
                       decode, encode, read_frame)
from .registration import RegistrationFailed, estimate_loop_constraint
from .renderer import GaussianSet, rendered_opacity_per_gaussian
from .tracking import initialize_pose, prepare_tracking_cloud, refine_pose
from .world import SequenceBundle
from .geometry import inverse

log = logging.getLogger("maslam")


# ---------------------------------------------------------------------------
# Agent
# ---------------------------------------------------------------------------


@dataclass
class AgentOutputs:
    trajectory: list = field(default_factory=list)    # per-frame camera->world
    low_confidence_frames: list = field(default_factory=list)


class AgentRunner:
    """Processes one RGB-D stream: tracks, maintains the active sub-map,
    and ships completed sub-maps plus descriptors to the server."""

    def __init__(self, agent_id: int, bundle: SequenceBundle, cfg: RunConfig,
                 transport):
        self.agent_id = agent_id
        self.bundle = bundle
        self.cfg = cfg
        self.transport = transport
        self.active: SubMap | None = None
        self.retained: list = []          # (owner_seq, GaussianSet)
        self.kf_frames: dict = {}
        self.next_seq = 0
        self.out = AgentOutputs()
        self._prev_frame = None
        self._prev_cloud = None
        self._anchor_traj_index: dict = {}   # seq -> frame index of its anchor

    def _send(self, msg) -> list:
        replies = self.transport.exchange(msg)
        for r in replies:
            if isinstance(r, PoseCorrections):
                self._rebase(r)
        return replies

    def _rebase(self, msg: PoseCorrections) -> None:
        """Apply the latest own-sub-map correction to all local state so the
        agent continues in the server's corrected world frame."""
        if not msg.corrections:
            return
        _seq, corr = max(msg.corrections, key=lambda c: c[0])
        self.out.trajectory = [compose(corr, p) for p in self.out.trajectory]
        if self.active is not None:
            self.active.keyframe_poses = [compose(corr, p)
                                          for p in self.active.keyframe_poses]
            self.active.gaussians = self.active.gaussians.transformed(corr)
        self.retained = [(owner, g.transformed(corr)) for owner, g in self.retained]

    def _background(self) -> GaussianSet | None:
        if not self.retained:
            return None
        return GaussianSet.concat([g for _, g in self.retained])

    def _render_context(self) -> GaussianSet:
        sets = [] if self.active is None else [self.active.gaussians]
        sets += [g for _, g in self.retained]
        return GaussianSet.concat(sets) if sets else GaussianSet.empty()

    def _track(self, frame, t: int) -> SE3Pose:
        if self.cfg.tracking_mode == "odometry":
            return self.bundle.odometry_pose(self.agent_id, t)
        prev_pose = self.out.trajectory[-1]
        cloud_t = prepare_tracking_cloud(frame, self.cfg.tracking)
        if self.cfg.pose_init == "icp":
            init = initialize_pose(frame, self._prev_frame, prev_pose,
                                   self.cfg.tracking, cloud_t=cloud_t,
                                   cloud_prev=self._prev_cloud)
            pose0 = init.pose
            if init.low_confidence:
                self.out.low_confidence_frames.append(t)
        else:
            pose0 = prev_pose
        self._prev_cloud = cloud_t
        res = refine_pose(self._render_context(), frame, pose0, self.cfg.tracking)
        if res.all_masked:
            self.out.low_confidence_frames.append(t)
        return res.pose

    def _start_submap(self, frame, pose: SE3Pose, rng) -> None:
        self.active = seed_submap(frame, pose, self.cfg.mapping, rng,
                                  agent_id=self.agent_id, seq=self.next_seq)
        self._anchor_traj_index[self.next_seq] = frame.index
        self.kf_frames = {frame.index: frame}
        self.next_seq += 1

    def _finish_submap(self, next_frame, next_pose) -> None:
        """Split the finished sub-map (and older retained sets) by rendered
        opacity in the next first view; ship the invisible part."""
        finished = self.active
        dispatch_set, retain_set, _ = select_dispatch(finished, next_frame, next_pose)
        pose_cw = inverse(next_pose)
        supplements = []
        new_retained = []
        for owner_seq, gset in self.retained:
            vis = rendered_opacity_per_gaussian(gset, pose_cw, next_frame.intrinsics)
            gone = vis == 0.0
            if gone.any():
                supplements.append((owner_seq, gset.select(gone)))
            if (~gone).any():
                new_retained.append((owner_seq, gset.select(~gone)))
        if len(retain_set):
            new_retained.append((finished.seq, retain_set))
        self.retained = new_retained
        self._upload(finished, dispatch_set, supplements)
        self.active = None

    def _upload(self, finished: SubMap, dispatch_set: GaussianSet,
                supplements: list) -> None:
        desc = extract_descriptor(
            self.kf_frames[finished.anchor_frame_index], self.agent_id,
            finished.seq, self.cfg.loops.descriptor_size)
        self._send(DescriptorUpload(self.agent_id, desc))
        odom_rel = None
        if finished.seq > 0:
            prev_anchor = self.out.trajectory[self._anchor_traj_index[finished.seq - 1]]
            this_anchor = self.out.trajectory[self._anchor_traj_index[finished.seq]]
            odom_rel = relative(prev_anchor, this_anchor)
        shipped = SubMap(finished.agent_id, finished.seq, dispatch_set,
                         finished.anchor_cloud, finished.anchor_frame_index,
                         list(finished.keyframe_poses),
                         list(finished.keyframe_indices), dispatched=True)
        self._send(SubMapUpload(self.agent_id, shipped, supplements, odom_rel))

    def run_stepped(self):
        """Generator: yields after the Hello and after every sub-map upload,
        so a scheduler can interleave agents deterministically."""
        cfg = self.cfg
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([cfg.seed, self.agent_id, 0xA9E17])))
        self._send(Hello(self.agent_id))
        yield
        theta = cfg.mapping.theta_submap
        for t in range(self.bundle.frames_per_agent):
            frame = self.bundle.frame(self.agent_id, t)
            if t == 0:
                pose = self.bundle.odometry_pose(self.agent_id, 0)
                self.out.trajectory.append(pose)
                self._start_submap(frame, pose, rng)
            else:
                pose = self._track(frame, t)
                self.out.trajectory.append(pose)
                if t % theta == 0:
                    self._finish_submap(frame, pose)
                    self._start_submap(frame, pose, rng)
                    yield
                else:
                    self.kf_frames[frame.index] = frame
                    self.active.keyframe_poses.append(pose)
                    self.active.keyframe_indices.append(frame.index)
                    densify(self.active, frame, pose, cfg.mapping, rng,
                            background=self._background())
            keyframes = [(self.kf_frames[i], p) for i, p in
                         zip(self.active.keyframe_indices,
                             self.active.keyframe_poses)]
            optimize_submap(self.active, keyframes, cfg.mapping,
                            background=self._background())
            if cfg.tracking_mode == "full":
                self._prev_frame = frame
                if self._prev_cloud is None:
                    self._prev_cloud = prepare_tracking_cloud(frame, cfg.tracking)
        finished = self.active
        supplements = [(owner, g) for owner, g in self.retained if len(g)]
        self.retained = []
        self._upload(finished, finished.gaussians, supplements)
        self.active = None
        self._send(Shutdown(self.agent_id))
        yield

    def run(self) -> AgentOutputs:
        for _ in self.run_stepped():
            pass
        return self.out


# ---------------------------------------------------------------------------
# Server
# ---------------------------------------------------------------------------


@dataclass
class ServerResult:
    trajectories: dict = field(default_factory=dict)      # corrected, per agent
    raw_trajectories: dict = field(default_factory=dict)  # as reported
    global_map: GlobalMap | None = None
    corrections: dict = field(default_factory=dict)
    graph: PoseGraph | None = None
    refine_stats: RefineStats | None = None
    loop_edges: int = 0
    dropped_edges: int = 0
    objective_before: float = 0.0
    objective_after: float = 0.0


class Server:
    """Single-consumer server state; every mutation happens inside handle(),
    one message at a time."""

    def __init__(self, cfg: RunConfig, keyframe_provider=None):
        self.cfg = cfg
        self.store = DescriptorStore()
        self.submaps: dict = {}            # (agent, seq) -> SubMap
        self.supplement_pool: dict = {}    # (agent, seq) -> [GaussianSet]
        self.odometry_rels: dict = {}      # (agent, seq) -> SE3Pose from seq-1
        self.candidates: set = set()       # canonical (earlier, later) pairs
        self.constraint_cache: dict = {}   # pair -> SE3Pose | None (failed)
        self.last_seq: dict = {}
        self.done: set = set()
        self.agents: set = set()
        self.keyframe_provider = keyframe_provider
        self.result: ServerResult | None = None

    def handle(self, msg) -> list:
        if isinstance(msg, Hello):
            self.agents.add(msg.agent_id)
            return [Ack(msg.agent_id, msg.kind, 0)]
        if isinstance(msg, DescriptorUpload):
            found = detect_loops(self.store, msg.descriptor, self.cfg.loops)
            if self.cfg.loop_closure:
                for cand in found:
                    self.candidates.add(tuple(sorted(cand.pair)))
            return [Ack(msg.agent_id, msg.kind, msg.descriptor.submap_seq)]
        if isinstance(msg, SubMapUpload):
            return self._handle_submap(msg)
        if isinstance(msg, Shutdown):
            self.done.add(msg.agent_id)
            return []
        raise ValueError(f"server cannot handle {type(msg)!r}")

    def _handle_submap(self, msg: SubMapUpload) -> list:
        agent, seq = msg.submap.agent_id, msg.submap.seq
        expected = self.last_seq.get(agent, -1) + 1
        if seq != expected:
            log.warning("agent %d sub-map %d out of order (expected %d); dropped",
                        agent, seq, expected)
            return [Ack(agent, msg.kind, seq)]
        self.last_seq[agent] = seq
        self.submaps[(agent, seq)] = msg.submap
        if msg.odometry_rel is not None:
            self.odometry_rels[(agent, seq)] = msg.odometry_rel
        for owner_seq, gset in msg.supplements:
            self.supplement_pool.setdefault((agent, owner_seq), []).append(gset)
        replies = []
        if self.cfg.pgo_mode == "per_submap" and self.cfg.loop_closure \
                and len(self.submaps) >= 2:
            corrections = self._optimize_and_update()
            own = sorted((k[1], c) for k, c in corrections.items() if k[0] == agent)
            if own:
                replies.append(PoseCorrections(agent, own))
        replies.append(Ack(agent, msg.kind, seq))
        return replies

    def drop_agent(self, agent_id: int) -> None:
        """Mid-run disconnect: uploads are atomic per message, so there is no
        partial sub-map to unwind; the agent just stops contributing."""
        self.done.add(agent_id)

    # -- loop closure ----------------------------------------------------------

    def _measured_constraint(self, pair):
        """Cached loop-constraint registration for a canonical pair."""
        if pair in self.constraint_cache:
            return self.constraint_cache[pair]
        earlier, later = pair
        try:
            T_meas, _ = estimate_loop_constraint(
                self.submaps[earlier], self.submaps[later], self.cfg.loops,
                self.cfg.loop_constraint_source)
        except RegistrationFailed as exc:
            log.info("loop %s-%s rejected: %s", earlier, later, exc)
            T_meas = None
        self.constraint_cache[pair] = T_meas
        return T_meas

    def _build_graph(self) -> tuple[PoseGraph, int]:
        graph = PoseGraph()
        for key in sorted(self.submaps):
            graph.add_node(key, self.submaps[key].anchor_pose())
        for key in sorted(self.submaps):
            agent, seq = key
            prev = (agent, seq - 1)
            if seq == 0 or prev not in self.submaps:
                continue
            rel = self.odometry_rels.get(key)
            if rel is None:
                rel = relative(self.submaps[prev].anchor_pose(),
                               self.submaps[key].anchor_pose())
            graph.add_edge(prev, key, rel, kind="odometry")
        dropped = 0
        if self.cfg.loop_closure:
            for pair in sorted(self.candidates):
                earlier, later = pair
                if earlier not in self.submaps or later not in self.submaps:
                    continue
                T_meas = self._measured_constraint(pair)
                if T_meas is None:
                    dropped += 1
                    continue
                # measured maps the earlier anchor frame into the later one:
                # edge residual wants T_ij = inv(T_i) T_j with i=later, j=earlier
                graph.add_edge(later, earlier, T_meas, kind="loop")
        return graph, dropped

    def _optimize_and_update(self) -> dict:
        graph, _ = self._build_graph()
        corrections, _ = optimize_pose_graph(graph)
        submaps = [self.submaps[k] for k in sorted(self.submaps)]
        apply_corrections(corrections, submaps, {})
        return corrections

    # -- finalization ----------------------------------------------------------

    def finalize(self) -> ServerResult:
        """All agents done: final PGO, corrections, coarse merge + refine."""
        result = ServerResult()
        submap_keys = sorted(self.submaps)
        for key in submap_keys:
            extra = self.supplement_pool.pop(key, [])
            if extra:
                sm = self.submaps[key]
                sm.gaussians = GaussianSet.concat([sm.gaussians] + extra)

        raw_traj = self._assemble_trajectories()
        result.raw_trajectories = {a: list(t) for a, t in raw_traj.items()}

        graph, result.dropped_edges = self._build_graph()
        result.graph = graph
        result.loop_edges = sum(1 for e in graph.edges if e.kind == "loop")
        if len(graph.nodes) >= 2:
            result.objective_before = graph_objective(graph)
            corrections, stats = optimize_pose_graph(graph)
            result.objective_after = stats.objective_trace[-1]
        else:
            corrections = {k: SE3Pose.identity() for k in graph.nodes}
        result.corrections = corrections
        submaps = [self.submaps[k] for k in submap_keys]
        result.trajectories = apply_corrections(corrections, submaps, raw_traj)

        gmap = coarse_merge(submaps)
        keyframes = self.keyframe_provider() if self.keyframe_provider else []
        if keyframes and self.cfg.merge_iters > 0 and len(gmap.gaussians):
            gmap, result.refine_stats = fine_refine(
                gmap, keyframes, self.cfg.merge_iters, self.cfg.mapping,
                seed=self.cfg.seed)
        result.global_map = gmap
        self.result = result
        return result

    def _assemble_trajectories(self) -> dict:
        out: dict = {}
        for (agent, _seq), sm in sorted(self.submaps.items()):
            poses = out.setdefault(agent, {})
            for idx, pose in zip(sm.keyframe_indices, sm.keyframe_poses):
                poses[idx] = pose
        return {agent: [poses[i] for i in sorted(poses)]
                for agent, poses in out.items()}


# ---------------------------------------------------------------------------
# Transports and drivers
# ---------------------------------------------------------------------------


class InProcTransport:
    """Direct function-call transport; the codec is still exercised."""

    def __init__(self, server: Server):
        self.server = server

    def exchange(self, msg) -> list:
        replies = self.server.handle(decode(encode(msg)))
        return [decode(encode(r)) for r in replies]

    def close(self) -> None:
        pass


class SocketTransport:
    def __init__(self, host: str, port: int):
        self.sock = socket.create_connection((host, port))
        self.rfile = self.sock.makefile("rb")

    def exchange(self, msg) -> list:
        self.sock.sendall(encode(msg))
        if isinstance(msg, Shutdown):
            return []
        replies = []
        while True:
            reply = decode(read_frame(self.rfile))
            replies.append(reply)
            if isinstance(reply, Ack):
                return replies

    def close(self) -> None:
        self.rfile.close()
        self.sock.close()


def _keyframe_provider(bundle: SequenceBundle, server: Server):
    """Keyframes for global refinement, resolved against the (corrected)
    sub-map poses stored on the server."""

    def provide():
        frames = []
        for (agent, _seq), sm in sorted(server.submaps.items()):
            for idx, pose in zip(sm.keyframe_indices, sm.keyframe_poses):
                frames.append((bundle.frame(agent, idx), pose))
        return frames

    return provide


def run_inprocess(bundle: SequenceBundle, cfg: RunConfig):
    """Full run with an in-process server; agents advance round-robin one
    sub-map interval at a time. Returns (ServerResult, {agent: outputs})."""
    server = Server(cfg)
    server.keyframe_provider = _keyframe_provider(bundle, server)
    agents = [AgentRunner(a, bundle, cfg, InProcTransport(server))
              for a in range(bundle.agents)]
    steppers = [agent.run_stepped() for agent in agents]
    alive = [True] * len(agents)
    while any(alive):
        for k, stepper in enumerate(steppers):
            if not alive[k]:
                continue
            try:
                next(stepper)
            except StopIteration:
                alive[k] = False
    result = server.finalize()
    return result, {a.agent_id: a.out for a in agents}


def _client_loop(server: Server, lock: threading.Lock, conn) -> None:
    rfile = conn.makefile("rb")
    agent_id = None
    try:
        while True:
            try:
                frame_bytes = read_frame(rfile)
            except (TruncatedFrame, BadMagic, LengthOverflow, ConnectionError,
                    OSError):
                if agent_id is not None:
                    with lock:
                        server.drop_agent(agent_id)
                return
            try:
                msg = decode(frame_bytes)
            except VersionMismatch:
                log.warning("protocol version mismatch; closing connection")
                return
            except (CrcMismatch, MalformedPayload) as exc:
                log.warning("frame skipped: %s", exc)
                continue
            agent_id = msg.agent_id
            with lock:
                replies = server.handle(msg)
            for r in replies:
                conn.sendall(encode(r))
            if isinstance(msg, Shutdown):
                return
    finally:
        rfile.close()
        conn.close()


def run_sockets(bundle: SequenceBundle, cfg: RunConfig, host: str = "127.0.0.1"):
    """Same run over loopback TCP: one reader thread per agent connection,
    handler serialized by a lock. Returns (ServerResult, {agent: outputs})."""
    server = Server(cfg)
    server.keyframe_provider = _keyframe_provider(bundle, server)
    lock = threading.Lock()
    listener = socket.create_server((host, 0))
    port = listener.getsockname()[1]
    n_agents = bundle.agents
    handler_threads: list = []

    def accept_loop():
        for _ in range(n_agents):
            conn, _addr = listener.accept()
            th = threading.Thread(target=_client_loop, args=(server, lock, conn),
                                  daemon=True)
            th.start()
            handler_threads.append(th)

    accept_thread = threading.Thread(target=accept_loop, daemon=True)
    accept_thread.start()

    agents = [AgentRunner(a, bundle, cfg, SocketTransport(host, port))
              for a in range(n_agents)]
    agent_threads = [threading.Thread(target=agent.run) for agent in agents]
    for th in agent_threads:
        th.start()
    for th in agent_threads:
        th.join()
    accept_thread.join()
    for th in handler_threads:
        th.join()
    listener.close()
    for agent in agents:
        agent.transport.close()
    result = server.finalize()
    return result, {a.agent_id: a.out for a in agents}


def run_system(bundle: SequenceBundle, cfg: RunConfig, endpoint: str = "inproc"):
    """Dispatch on endpoint: the token "inproc" or "host:port" semantics
    (loopback sockets on an ephemeral port when a host is given)."""
    if endpoint == "inproc":
        return run_inprocess(bundle, cfg)
    host = endpoint.split(":")[0] if ":" in endpoint else endpoint
    return run_sockets(bundle, cfg, host=host)
