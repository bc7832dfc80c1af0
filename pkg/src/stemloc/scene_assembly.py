"""Windowed scene assembly from payload streams, with duplicate-tree merging."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Payload, Pose, SceneInventory, TreeObservation, canonicalize_axis

DBH_MERGE_GATE = 0.2  # meters; trees with larger DBH difference are never merged


class WindowOutOfRange(Exception):
    """A window index has no payload in the input sequence."""


@dataclass(frozen=True)
class AssemblyConfig:
    window_size: int = 3
    merge_radius: float = 0.5
    min_trees: int = 8
    candidate_min_obs: int = 2

    def __post_init__(self):
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValueError("window_size must be odd and >= 1")
        if self.merge_radius <= 0:
            raise ValueError("merge_radius must be positive")


@dataclass
class _Cluster:
    # obs_count-weighted accumulators for one merged tree
    position: np.ndarray
    axis: np.ndarray
    dbh: float
    weight: float
    obs_count: int
    is_candidate: bool

    def absorb(self, tree: TreeObservation):
        w = max(tree.obs_count, 1)
        total = self.weight + w
        self.position = (self.position * self.weight + tree.position * w) / total
        self.axis = self.axis * self.weight + tree.axis * w
        self.axis = canonicalize_axis(self.axis)
        self.dbh = (self.dbh * self.weight + tree.dbh * w) / total
        self.weight = total
        self.obs_count += tree.obs_count


def _matches(cluster: _Cluster, position: np.ndarray, dbh: float, merge_radius: float) -> bool:
    d2 = (cluster.position[0] - position[0]) ** 2 + (cluster.position[1] - position[1]) ** 2
    return d2 < merge_radius**2 and abs(cluster.dbh - dbh) < DBH_MERGE_GATE


def _merge_trees(trees: list[TreeObservation], merge_radius: float) -> list[_Cluster]:
    """Greedy single-linkage merge in input order, then a fixup pass so no two
    surviving clusters of the same kind sit within the merge gate of each other."""
    clusters: list[_Cluster] = []
    for tree in trees:
        target = None
        for c in clusters:
            if c.is_candidate == tree.is_candidate and _matches(c, tree.position, tree.dbh, merge_radius):
                target = c
                break
        if target is None:
            clusters.append(_Cluster(
                position=tree.position.copy(),
                axis=tree.axis.copy(),
                dbh=tree.dbh,
                weight=float(max(tree.obs_count, 1)),
                obs_count=tree.obs_count,
                is_candidate=tree.is_candidate,
            ))
        else:
            target.absorb(tree)

    # weighted means can drift two clusters into the gate; merge until stable
    changed = True
    while changed:
        changed = False
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                a, b = clusters[i], clusters[j]
                if a.is_candidate == b.is_candidate and _matches(a, b.position, b.dbh, merge_radius):
                    total = a.weight + b.weight
                    a.position = (a.position * a.weight + b.position * b.weight) / total
                    a.axis = canonicalize_axis(a.axis * a.weight + b.axis * b.weight)
                    a.dbh = (a.dbh * a.weight + b.dbh * b.weight) / total
                    a.weight = total
                    a.obs_count += b.obs_count
                    del clusters[j]
                    changed = True
                    break
            if changed:
                break
    return clusters


def assemble(payloads: list[Payload], center_index: int, cfg: AssemblyConfig) -> SceneInventory:
    """Transform every tree in the window into the center frame and merge duplicates.

    Window indices refer to payload .index values; all of them must be present.
    """
    by_index = {p.index: p for p in payloads}
    half = (cfg.window_size - 1) // 2
    window = range(center_index - half, center_index + half + 1)
    missing = [u for u in window if u not in by_index]
    if missing:
        raise WindowOutOfRange(f"window indices {missing} not present in payload list")

    center_pose = by_index[center_index].pose
    center_inv = center_pose.inverse()

    transformed: list[TreeObservation] = []
    for u in window:
        payload = by_index[u]
        rel = center_inv.compose(payload.pose)  # frame u -> frame t
        transformed.extend(t.transformed(rel) for t in payload.trees)

    clusters = _merge_trees(transformed, cfg.merge_radius)
    trees = tuple(
        TreeObservation(
            id=i,
            axis=c.axis,
            position=c.position,
            dbh=c.dbh,
            obs_count=c.obs_count,
            is_candidate=c.is_candidate,
        )
        for i, c in enumerate(clusters)
    )
    return SceneInventory(index=center_index, pose=center_pose, trees=trees)


def supplement_candidates(scene: SceneInventory, candidates: list[TreeObservation],
                          cfg: AssemblyConfig) -> SceneInventory:
    """Top up a sparse scene with candidate stems, best-observed first.

    Candidates must already be expressed in the scene frame. No-op when the
    scene has at least min_trees reconstructed (non-candidate) trees.
    """
    n_real = sum(1 for t in scene.trees if not t.is_candidate)
    if n_real >= cfg.min_trees:
        return scene

    eligible = [c for c in candidates if c.obs_count >= cfg.candidate_min_obs]
    eligible.sort(key=lambda c: (-c.obs_count, c.id))

    next_id = max((t.id for t in scene.trees), default=-1) + 1
    added: list[TreeObservation] = []
    for cand in eligible:
        if len(scene.trees) + len(added) >= cfg.min_trees:
            break
        added.append(TreeObservation(
            id=next_id,
            axis=cand.axis,
            position=cand.position,
            dbh=cand.dbh,
            obs_count=cand.obs_count,
            is_candidate=True,
        ))
        next_id += 1
    if not added:
        return scene
    return SceneInventory(index=scene.index, pose=scene.pose, trees=scene.trees + tuple(added))
