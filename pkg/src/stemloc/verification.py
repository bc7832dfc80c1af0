"""Two-step geometric verification and 6-DoF relative pose composition.

A candidate is first aligned to the query in the plane using matched-triangle
hypotheses scored on centroid agreement, then refined on one-to-one tree
center pairs together with a robust vertical offset from base heights. The
final score is the overlap ratio |M| / (|T_Q| + |T_C| - |M|); the full 6-DoF
transform folds the two scenes' roll/pitch corrections around the planar
estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .alignment import AlignmentResult, ProjectedScene
from .model import Pose, rot_z
from .triangles import TriangleDescriptor, TriangleSet


class DegenerateConfiguration(Exception):
    """Point sets carry no rotational information (rank-0 cross-covariance)."""


class NoValidHypothesis(Exception):
    """Coarse alignment found no transform supported by the centroid pairs."""


class InsufficientPairs(Exception):
    """Too few gated tree pairs survive to refine the alignment."""


@dataclass(frozen=True)
class VerifyConfig:
    centroid_inlier_tol: float = 0.5
    planar_gate: float = 0.4
    dbh_gate: float = 0.2
    dz_inlier_tol: float = 0.3
    min_refine_pairs: int = 2
    ransac_iters: int = 200
    overlap_accept: float = 0.2
    max_pairs_per_key: int = 16

    def __post_init__(self):
        for name in ("centroid_inlier_tol", "planar_gate", "dbh_gate", "dz_inlier_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class PlanarTransform:
    """Proper planar rigid transform: 2x2 rotation plus 2D translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(2, 2))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(2))

    @staticmethod
    def identity() -> "PlanarTransform":
        return PlanarTransform(np.eye(2), np.zeros(2))

    @staticmethod
    def from_angle(theta: float, translation=(0.0, 0.0)) -> "PlanarTransform":
        c, s = math.cos(theta), math.sin(theta)
        return PlanarTransform(np.array([[c, -s], [s, c]]), translation)

    @property
    def angle(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def apply(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=float) @ self.rotation.T + self.translation

    def compose(self, other: "PlanarTransform") -> "PlanarTransform":
        return PlanarTransform(self.rotation @ other.rotation,
                               self.rotation @ other.translation + self.translation)


@dataclass(frozen=True)
class LocalizationResult:
    """Verified match: planar + vertical transform, matched trees, overlap score."""

    candidate_index: int
    transform_4dof: Pose
    transform_6dof: Pose
    matched_pairs: tuple[tuple[int, int], ...]
    overlap: float
    n_query_trees: int
    n_cand_trees: int


def svd_align_2d(src, dst) -> PlanarTransform:
    """Least-squares planar rigid fit dst ~ R @ src + t.

    Centroid subtraction, 2x2 cross-covariance SVD, reflection guard forcing
    det(R) = +1 (optimal proper rotation even for mirrored inputs).
    """
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    if len(src) != len(dst):
        raise ValueError("point sets must have equal length")
    if len(src) < 2:
        raise ValueError("at least two point pairs are required")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    if np.abs(H).max() < 1e-15:
        raise DegenerateConfiguration("cross-covariance is rank-0 (coincident points)")
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, d if d != 0 else 1.0]) @ U.T
    return PlanarTransform(R, cd - R @ cs)


def _batch_planar_fit(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form proper-rotation fits for (H, n, 2) point-set batches.

    Per batch entry the optimal angle maximizes cos(t)*sum(x.y) +
    sin(t)*sum(x cross y) over the centered pairs; identical to the SVD route
    with its reflection guard.
    """
    cs = src.mean(axis=1, keepdims=True)
    cd = dst.mean(axis=1, keepdims=True)
    X = src - cs
    Y = dst - cd
    s_dot = np.einsum("hij,hij->h", X, Y)
    s_cross = np.einsum("hi,hi->h", X[:, :, 0], Y[:, :, 1]) - np.einsum(
        "hi,hi->h", X[:, :, 1], Y[:, :, 0])
    theta = np.arctan2(s_cross, s_dot)
    c, s = np.cos(theta), np.sin(theta)
    R = np.empty((len(theta), 2, 2))
    R[:, 0, 0] = c
    R[:, 0, 1] = -s
    R[:, 1, 0] = s
    R[:, 1, 1] = c
    t = cd[:, 0, :] - np.einsum("hab,hb->ha", R, cs[:, 0, :])
    return R, t


_SCORE_SUBSAMPLE = 128  # centroid pairs used to rank hypotheses on large match sets


def _coarse_core(q_verts: np.ndarray, c_verts: np.ndarray,
                 q_cent: np.ndarray, c_cent: np.ndarray,
                 cfg: VerifyConfig, seed: int) -> tuple[PlanarTransform, int]:
    m = len(q_cent)
    if m == 0:
        raise NoValidHypothesis("no matched triangle pairs")
    if m <= cfg.ransac_iters:
        hyp_idx = np.arange(m)
    else:
        rng = np.random.default_rng(seed)
        hyp_idx = np.sort(rng.choice(m, size=cfg.ransac_iters, replace=False))

    R_h, t_h = _batch_planar_fit(q_verts[hyp_idx], c_verts[hyp_idx])

    # rank hypotheses on a centroid-pair subsample, then count the winner in full
    if m > _SCORE_SUBSAMPLE:
        rng = np.random.default_rng(seed + 1)
        score_idx = np.sort(rng.choice(m, size=_SCORE_SUBSAMPLE, replace=False))
    else:
        score_idx = np.arange(m)
    moved = np.matmul(q_cent[score_idx], R_h.transpose(0, 2, 1)) + t_h[:, None, :]
    err2 = np.sum((c_cent[score_idx][None, :, :] - moved) ** 2, axis=2)
    counts = (err2 < cfg.centroid_inlier_tol**2).sum(axis=1)
    best = int(np.argmax(counts))

    best_moved = q_cent @ R_h[best].T + t_h[best]
    mask = np.sum((c_cent - best_moved) ** 2, axis=1) < cfg.centroid_inlier_tol**2
    n_in = int(mask.sum())

    if n_in < 2 and m >= 2:
        raise NoValidHypothesis(f"best hypothesis supported by {n_in} centroid pair(s)")

    transform = PlanarTransform(R_h[best], t_h[best])
    if n_in >= 2:
        try:
            transform = svd_align_2d(q_cent[mask], c_cent[mask])
        except DegenerateConfiguration:
            pass  # coincident centroids: keep the vertex-fit hypothesis
    return transform, n_in


def coarse_planar_align(matches: list[tuple[TriangleDescriptor, TriangleDescriptor]],
                        cfg: VerifyConfig = VerifyConfig(), seed: int = 0
                        ) -> tuple[PlanarTransform, int]:
    """Hypothesize-and-score planar alignment from matched triangle pairs.

    Each hypothesis fits the three vertex pairs of one matched triangle
    (canonical side-order correspondence); it is scored by how many matched
    centroids it brings within centroid_inlier_tol. The winner's inlier
    centroids are refit with svd_align_2d when at least two are distinct.
    A single matched pair is accepted on its own vertex fit.
    """
    if not matches:
        raise NoValidHypothesis("no matched triangle pairs")
    q_verts = np.stack([a.vertices for a, _ in matches])
    c_verts = np.stack([b.vertices for _, b in matches])
    q_cent = np.stack([a.centroid for a, _ in matches])
    c_cent = np.stack([b.centroid for _, b in matches])
    return _coarse_core(q_verts, c_verts, q_cent, c_cent, cfg, seed)


def _greedy_pairs(moved_q: np.ndarray, q_dbh: np.ndarray,
                  c_centers: np.ndarray, c_dbh: np.ndarray,
                  cfg: VerifyConfig, c_tree: cKDTree | None = None) -> list[tuple[int, int]]:
    """One-to-one nearest-first pairing under the planar and DBH gates."""
    nq = len(moved_q)
    if nq == 0 or len(c_centers) == 0:
        return []
    if c_tree is None:
        c_tree = cKDTree(c_centers)
    hits_list = c_tree.query_ball_point(moved_q, r=cfg.planar_gate)
    counts = np.fromiter((len(h) for h in hits_list), dtype=np.int64, count=nq)
    total = int(counts.sum())
    if total == 0:
        return []
    qi_all = np.repeat(np.arange(nq), counts)
    cj_all = np.concatenate([np.asarray(h, dtype=np.int64) for h in hits_list if h])
    dist = np.linalg.norm(moved_q[qi_all] - c_centers[cj_all], axis=1)
    ok = (dist < cfg.planar_gate) & (np.abs(q_dbh[qi_all] - c_dbh[cj_all]) < cfg.dbh_gate)
    qi_all, cj_all, dist = qi_all[ok], cj_all[ok], dist[ok]
    order = np.lexsort((cj_all, qi_all, dist))  # nearest first, stable tie order

    used_q = np.zeros(nq, dtype=bool)
    used_c = np.zeros(len(c_centers), dtype=bool)
    pairs: list[tuple[int, int]] = []
    for k in order:
        qi, cj = int(qi_all[k]), int(cj_all[k])
        if used_q[qi] or used_c[cj]:
            continue
        used_q[qi] = True
        used_c[cj] = True
        pairs.append((qi, cj))
    pairs.sort()
    return pairs


def refine_alignment(query: ProjectedScene, cand: ProjectedScene,
                     coarse: PlanarTransform, cfg: VerifyConfig = VerifyConfig(),
                     seed: int = 0) -> tuple[PlanarTransform, float, list[tuple[int, int]]]:
    """Pair trees under the coarse transform, solve the vertical offset, refit.

    The vertical offset is the candidate-minus-query base-height difference,
    estimated by one-point consensus over the paired trees and refined as the
    inlier mean; the surviving pairs feed a second planar SVD fit. Returns the
    composed full planar transform, the offset, and the final matched id pairs
    recomputed once under the refined transform.
    """
    c_tree = cKDTree(cand.centers) if len(cand.centers) else None
    moved = coarse.apply(query.centers)
    pairs = _greedy_pairs(moved, query.dbhs, cand.centers, cand.dbhs, cfg, c_tree)
    if len(pairs) < cfg.min_refine_pairs:
        raise InsufficientPairs(f"{len(pairs)} gated pair(s)")
    qi = np.array([p[0] for p in pairs])
    cj = np.array([p[1] for p in pairs])

    offsets = cand.base_heights[cj] - query.base_heights[qi]
    n = len(offsets)
    if n <= cfg.ransac_iters:
        hyp = np.arange(n)
    else:
        rng = np.random.default_rng(seed)
        hyp = rng.choice(n, size=cfg.ransac_iters, replace=False)
    inlier_mask = np.abs(offsets[None, :] - offsets[hyp, None]) < cfg.dz_inlier_tol
    counts = inlier_mask.sum(axis=1)
    best = int(np.argmax(counts))
    keep = inlier_mask[best]
    if int(counts[best]) < cfg.min_refine_pairs:
        raise InsufficientPairs(f"{int(counts[best])} pair(s) agree on a vertical offset")
    dz = float(offsets[keep].mean())

    fit = svd_align_2d(moved[qi[keep]], cand.centers[cj[keep]])
    refined = fit.compose(coarse)

    final_pairs = _greedy_pairs(refined.apply(query.centers), query.dbhs,
                                cand.centers, cand.dbhs, cfg, c_tree)
    id_pairs = [(int(query.ids[a]), int(cand.ids[b])) for a, b in final_pairs]
    return refined, dz, id_pairs


def _pose_4dof(planar: PlanarTransform, dz: float) -> Pose:
    R = rot_z(planar.angle)
    t = np.array([planar.translation[0], planar.translation[1], dz])
    return Pose(R, t)


def _pose_6dof(pose_4dof: Pose, align_q: AlignmentResult, align_c: AlignmentResult) -> Pose:
    t_aq = Pose.from_rotation(align_q.correction)
    t_ac = Pose.from_rotation(align_c.correction)
    return t_ac.inverse().compose(pose_4dof).compose(t_aq)


def compose_6dof(best: LocalizationResult, align_q: AlignmentResult,
                 align_c: AlignmentResult) -> Pose:
    """Fold the pure-rotation alignment corrections around the 4-DoF transform."""
    return _pose_6dof(best.transform_4dof, align_q, align_c)


@dataclass(frozen=True)
class SceneBundle:
    """What verification needs to know about one scene."""

    projected: ProjectedScene
    triangles: TriangleSet

    @property
    def scene_index(self) -> int:
        return self.projected.scene_index


def _matched_arrays(query: TriangleSet, cand: TriangleSet,
                    cfg: VerifyConfig) -> tuple[np.ndarray, np.ndarray]:
    """Row indices of all cross pairs under each shared key, capped per key.

    Row ranges per key are contiguous in a TriangleSet, so the dominant
    one-triangle-per-key case pairs up without any per-key work.
    """
    qk, q_start, q_count = query.key_groups
    ck, c_start, c_count = cand.key_groups
    _, qi, ci = np.intersect1d(qk, ck, assume_unique=True, return_indices=True)
    if len(qi) == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    nq, nc = q_count[qi], c_count[ci]
    simple = (nq == 1) & (nc == 1)
    q_sel = [q_start[qi[simple]]]
    c_sel = [c_start[ci[simple]]]
    for k in np.flatnonzero(~simple):
        rows_q = np.arange(q_start[qi[k]], q_start[qi[k]] + nq[k])
        rows_c = np.arange(c_start[ci[k]], c_start[ci[k]] + nc[k])
        q_sel.append(np.repeat(rows_q, nc[k])[:cfg.max_pairs_per_key])
        c_sel.append(np.tile(rows_c, nq[k])[:cfg.max_pairs_per_key])
    return np.concatenate(q_sel), np.concatenate(c_sel)


def verify_candidates(query: SceneBundle, candidates: list[SceneBundle],
                      cfg: VerifyConfig = VerifyConfig(), seed: int = 0
                      ) -> list[LocalizationResult]:
    """Run coarse + refined verification per candidate and rank by overlap.

    Candidates that fail either stage are dropped; an empty list is the
    no-match outcome. Deterministic under a fixed seed (per-candidate RNG
    streams are derived from (seed, candidate index)).
    """
    results: list[LocalizationResult] = []
    nq = query.projected.n_trees
    for cand in candidates:
        sub_seed = int(np.random.default_rng([seed, cand.scene_index]).integers(2**31))
        q_idx, c_idx = _matched_arrays(query.triangles, cand.triangles, cfg)
        try:
            if len(q_idx) == 0:
                raise NoValidHypothesis("no shared keys")
            coarse, _ = _coarse_core(
                query.triangles.vertices[q_idx], cand.triangles.vertices[c_idx],
                query.triangles.centroids[q_idx], cand.triangles.centroids[c_idx],
                cfg, sub_seed)
            refined, dz, id_pairs = refine_alignment(
                query.projected, cand.projected, coarse, cfg, seed=sub_seed)
        except (NoValidHypothesis, InsufficientPairs, DegenerateConfiguration):
            continue
        nc = cand.projected.n_trees
        n_m = len(id_pairs)
        overlap = n_m / (nq + nc - n_m) if (nq + nc - n_m) > 0 else 0.0
        pose4 = _pose_4dof(refined, dz)
        pose6 = _pose_6dof(pose4, query.projected.alignment, cand.projected.alignment)
        results.append(LocalizationResult(
            candidate_index=cand.scene_index,
            transform_4dof=pose4,
            transform_6dof=pose6,
            matched_pairs=tuple(id_pairs),
            overlap=overlap,
            n_query_trees=nq,
            n_cand_trees=nc,
        ))
    results.sort(key=lambda r: (-r.overlap, r.candidate_index))
    return results
