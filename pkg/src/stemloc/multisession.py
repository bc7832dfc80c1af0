"""Multi-session map alignment: cross-session constraints + pose-graph refinement.

Each session contributes odometry edges from its reported (possibly drifted)
poses; scenes of later sessions are localized against the database of earlier
ones and accepted as constraints when the overlap ratio clears the gate. The
optimized graph re-anchors every session in one frame, and all trees merge
into a single global database.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .evaluation import EvalConfig, pose_error
from .global_db import GlobalTreeDb
from .model import Payload, Pose, SceneInventory
from .pipeline import PipelineConfig, SceneDatabase, build_scene_record
from .pose_graph import PoseGraph, PoseGraphEdge, constraints_from_localization, optimize
from .scene_assembly import AssemblyConfig, assemble

SESSION_STRIDE = 1_000_000  # node id block per session


@dataclass
class SessionData:
    """One mission: payload stream (reported poses) plus ground-truth poses."""

    name: str
    payloads: list[Payload]
    true_poses: dict[int, Pose]  # payload index -> true pose


@dataclass
class MultisessionReport:
    ate_pre: float
    ate_post: float
    are_pre: float
    are_post: float
    n_constraints: int
    n_false_constraints: int
    chi2: float
    iterations: int
    n_nodes: int
    warnings: list[str] = field(default_factory=list)
    session_names: list[str] = field(default_factory=list)


def node_id(session: int, scene_index: int) -> int:
    return session * SESSION_STRIDE + scene_index


def umeyama_se3(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Rigid 3D fit dst ~ R @ src + t (no scale), reflection-guarded."""
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    S = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ S @ U.T
    return Pose(R, cd - R @ cs)


def trajectory_errors(estimated: dict[int, Pose], truth: dict[int, Pose]) -> tuple[float, float]:
    """(ATE rmse meters, ARE mean degrees) after one global rigid alignment."""
    ids = sorted(estimated)
    est_p = np.stack([estimated[i].translation for i in ids])
    true_p = np.stack([truth[i].translation for i in ids])
    align = umeyama_se3(est_p, true_p)
    aligned = est_p @ align.rotation.T + align.translation
    ate = float(np.sqrt(np.mean(np.sum((aligned - true_p) ** 2, axis=1))))
    angles = []
    for i in ids:
        _, re = pose_error(Pose(align.rotation @ estimated[i].rotation,
                                np.zeros(3)), Pose(truth[i].rotation, np.zeros(3)))
        angles.append(re)
    return ate, float(np.mean(angles))


def assemble_session_scenes(payloads: list[Payload], cfg: AssemblyConfig) -> list[SceneInventory]:
    """All scenes whose window fits inside the payload stream."""
    half = (cfg.window_size - 1) // 2
    indices = [p.index for p in payloads]
    lo, hi = min(indices), max(indices)
    return [assemble(payloads, t, cfg) for t in range(lo + half, hi - half + 1)]


def run_multisession(sessions: list[SessionData], assembly_cfg: AssemblyConfig,
                     pipe_cfg: PipelineConfig, eval_cfg: EvalConfig = EvalConfig(),
                     seed: int = 0, max_iters: int = 50
                     ) -> tuple[MultisessionReport, dict[int, Pose], GlobalTreeDb, PoseGraph]:
    """Align all sessions into session 0's frame and merge the tree database.

    Returns the report, optimized node poses, the merged global database, and
    the optimized pose graph (nodes updated in place).
    """
    warnings: list[str] = []
    all_scenes: dict[int, SceneInventory] = {}
    nodes: dict[int, Pose] = {}
    truth: dict[int, Pose] = {}
    edges: list[PoseGraphEdge] = []

    per_session_scenes: list[list[SceneInventory]] = []
    for payloads in (s.payloads for s in sessions):
        per_session_scenes.append(assemble_session_scenes(payloads, assembly_cfg))

    for s, (session, scenes) in enumerate(zip(sessions, per_session_scenes)):
        prev = None
        for scene in scenes:
            nid = node_id(s, scene.index)
            all_scenes[nid] = scene
            nodes[nid] = scene.pose
            truth[nid] = session.true_poses[scene.index]
            if prev is not None:
                meas = nodes[prev].inverse().compose(scene.pose)
                edges.append(PoseGraphEdge(prev, nid, meas))
            prev = nid

    # cross-session constraints: later sessions query the growing database
    database = SceneDatabase(pipe_cfg)
    loc_results = []
    for s, scenes in enumerate(per_session_scenes):
        if s > 0:
            n_before = len(loc_results)
            for scene in scenes:
                record = build_scene_record(scene, pipe_cfg)
                q_seed = int(np.random.default_rng([seed, s, scene.index]).integers(2**31))
                results, _ = database.query_record(record, seed=q_seed)
                # every verified candidate may carry a constraint; the overlap
                # gate in constraints_from_localization filters weak ones
                for res in results:
                    loc_results.append((node_id(s, scene.index), res.candidate_index, res))
            if len(loc_results) == n_before:
                warnings.append(f"session {sessions[s].name}: no localization results")
        for scene in scenes:
            # re-index scenes by node id so database indices stay globally unique
            reindexed = SceneInventory(index=node_id(s, scene.index), pose=scene.pose,
                                       trees=scene.trees)
            database.add_scene(reindexed)

    constraint_edges = constraints_from_localization(loc_results, pipe_cfg.verify)
    n_false = 0
    for e in constraint_edges:
        true_rel = truth[e.from_id].inverse().compose(truth[e.to_id])
        te, _ = pose_error(e.measurement, true_rel)
        if te > eval_cfg.te_thresh:
            n_false += 1
    edges.extend(constraint_edges)

    anchor = node_id(0, per_session_scenes[0][0].index)
    graph = PoseGraph(nodes=nodes, edges=edges, anchored=anchor)

    # fail soft when a session is unreachable from the anchor: optimize the
    # anchored component and leave the rest at their reported poses
    try:
        graph.validate()
        connected_graph = graph
        detached: set[int] = set()
    except ValueError:
        adjacency: dict[int, set[int]] = {i: set() for i in nodes}
        for e in edges:
            adjacency[e.from_id].add(e.to_id)
            adjacency[e.to_id].add(e.from_id)
        seen = {anchor}
        stack = [anchor]
        while stack:
            for nxt in adjacency[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        detached = set(nodes) - seen
        warnings.append(f"{len(detached)} nodes disconnected from the anchor; left unoptimized")
        connected_graph = PoseGraph(
            nodes={i: nodes[i] for i in seen},
            edges=[e for e in edges if e.from_id in seen and e.to_id in seen],
            anchored=anchor)

    ate_pre, are_pre = trajectory_errors(nodes, truth)
    optimized, chi2, iterations = optimize(connected_graph, max_iters=max_iters)
    final_poses = dict(nodes)
    final_poses.update(optimized)
    ate_post, are_post = trajectory_errors(final_poses, truth)

    merged = GlobalTreeDb(merge_radius=assembly_cfg.merge_radius)
    for nid in sorted(all_scenes):
        merged.insert_scene(all_scenes[nid], final_poses[nid])

    report = MultisessionReport(
        ate_pre=ate_pre, ate_post=ate_post, are_pre=are_pre, are_post=are_post,
        n_constraints=len(constraint_edges), n_false_constraints=n_false,
        chi2=chi2, iterations=iterations, n_nodes=len(nodes),
        warnings=warnings, session_names=[s.name for s in sessions])
    optimized_graph = PoseGraph(nodes=final_poses, edges=edges, anchored=anchor)
    return report, final_poses, merged, optimized_graph
