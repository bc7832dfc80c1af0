"""Roll/pitch correction from stem axes and consistent 2D projection.

A scene observed from a tilted viewpoint projects to distorted inter-tree
geometry. Since stems grow roughly along one shared direction, a rotation
that best aligns the observed axes with the vertical reference recovers a
viewpoint-independent local frame, up to an irrelevant yaw that we gauge-fix
to zero. The objective is sign-blind in the axes (stems are undirected):

    minimize over rotations  sum_j (1 - |e_z . (R a_j)|)^2
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import SceneInventory, TreeObservation, exp_so3, remove_yaw, rot_z

_EZ = np.array([0.0, 0.0, 1.0])


class NoConvergence(Exception):
    """Gauss-Newton refinement failed to settle within the iteration budget."""


@dataclass(frozen=True)
class AlignCfg:
    ransac_iters: int = 100
    angle_tol_deg: float = 5.0
    max_gn_iters: int = 60
    gn_tol: float = 1e-10  # relative objective decrease treated as converged
    max_tilt_deg: float = 60.0  # axes tilted further are never sampled as hypotheses
    seed: int = 0


@dataclass(frozen=True)
class AlignmentResult:
    """Zero-yaw correction rotation plus the fit diagnostics."""

    correction: np.ndarray = field(default_factory=lambda: np.eye(3))
    inlier_ids: tuple[int, ...] = ()
    residual: float = 0.0
    degenerate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "correction", np.asarray(self.correction, dtype=float))
        object.__setattr__(self, "inlier_ids", tuple(self.inlier_ids))


def _objective(R: np.ndarray, axes: np.ndarray) -> float:
    z = np.abs(axes @ R.T[:, 2])
    return float(np.sum((1.0 - z) ** 2))


def _minimal_zero_yaw_to_ez(axis: np.ndarray) -> np.ndarray:
    """Smallest rotation taking axis to e_z, with the yaw gauge removed.

    Stripping yaw afterwards keeps the mapping exact: e_z is fixed by
    z-rotations, so Rz(-psi) R still sends the axis onto e_z.
    """
    a = axis / math.sqrt(axis @ axis)
    c = float(np.clip(a[2], -1.0, 1.0))
    k = np.array([a[1], -a[0], 0.0])  # a x e_z
    kn = math.sqrt(k[0] * k[0] + k[1] * k[1])
    if kn < 1e-12:
        return np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    R = exp_so3(k / kn * math.acos(c))
    return remove_yaw(R)


def _batch_zero_yaw_to_ez(axes: np.ndarray) -> np.ndarray:
    """Vectorized _minimal_zero_yaw_to_ez over (h, 3) unit axes with z > 0."""
    h = len(axes)
    c = np.clip(axes[:, 2], -1.0, 1.0)
    theta = np.arccos(c)
    k = np.stack([axes[:, 1], -axes[:, 0], np.zeros(h)], axis=1)  # axis x e_z
    kn = np.linalg.norm(k, axis=1)
    safe = kn > 1e-12
    k_unit = np.where(safe[:, None], k / np.where(safe, kn, 1.0)[:, None], 0.0)

    K = np.zeros((h, 3, 3))
    K[:, 0, 1] = -k_unit[:, 2]
    K[:, 0, 2] = k_unit[:, 1]
    K[:, 1, 0] = k_unit[:, 2]
    K[:, 1, 2] = -k_unit[:, 0]
    K[:, 2, 0] = -k_unit[:, 1]
    K[:, 2, 1] = k_unit[:, 0]
    s = np.sin(theta)[:, None, None]
    v = (1.0 - np.cos(theta))[:, None, None]
    R = np.eye(3)[None] + s * K + v * (K @ K)
    R[~safe] = np.eye(3)

    psi = np.arctan2(R[:, 1, 0], R[:, 0, 0])
    cz, sz = np.cos(-psi), np.sin(-psi)
    Rz = np.zeros((h, 3, 3))
    Rz[:, 0, 0] = cz
    Rz[:, 0, 1] = -sz
    Rz[:, 1, 0] = sz
    Rz[:, 1, 1] = cz
    Rz[:, 2, 2] = 1.0
    return Rz @ R


def _objective_w(w: np.ndarray, axes: np.ndarray) -> float:
    return float(np.sum((1.0 - np.abs(axes @ w)) ** 2))


def _cross3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.array([a[1] * b[2] - a[2] * b[1],
                     a[2] * b[0] - a[0] * b[2],
                     a[0] * b[1] - a[1] * b[0]])


def _tangent_basis(w: np.ndarray) -> np.ndarray:
    """3x2 orthonormal basis of the plane perpendicular to unit w."""
    helper = np.array([1.0, 0.0, 0.0]) if abs(w[0]) <= 0.9 else np.array([0.0, 1.0, 0.0])
    b1 = _cross3(w, helper)
    b1 /= math.sqrt(b1 @ b1)
    b2 = _cross3(w, b1)
    return np.stack([b1, b2], axis=1)


def _gauss_newton(R0: np.ndarray, axes: np.ndarray, cfg: AlignCfg) -> tuple[np.ndarray, float]:
    """Iteratively refine the estimated up-direction on the unit sphere.

    The objective depends on the rotation only through w = R^T e_z (because
    e_z^T R a = w . a), so the two free parameters live in w's tangent plane.
    The per-axis residual 1 - |a . w| has a Jacobian that itself vanishes
    linearly at alignment, making the plain normal equations underestimate the
    curvature and oscillate; the sphere-constraint term sum(r * c) restores
    the exact Hessian, which for this objective costs nothing extra.
    """
    w = R0[2].copy()  # third row of R is (R^T e_z)^T
    if w[2] < 0:
        w = -w
    obj = _objective_w(w, axes)
    for _ in range(cfg.max_gn_iters):
        c = axes @ w
        s = np.where(c >= 0, 1.0, -1.0)
        r = 1.0 - np.abs(c)
        B = _tangent_basis(w)
        P = axes @ B  # rows are tangent-plane projections of the axes
        g = P.T @ (r * s)  # solves H delta = g (negative objective gradient)
        H = P.T @ P + float(np.sum(r * s * c)) * np.eye(2)
        # keep the step a descent direction when far from the optimum
        tr, det = H[0, 0] + H[1, 1], H[0, 0] * H[1, 1] - H[0, 1] * H[1, 0]
        eig_min = tr / 2.0 - math.sqrt(max(tr * tr / 4.0 - det, 0.0))
        if eig_min <= 1e-12:
            H = H + (1e-9 - eig_min) * np.eye(2)
        try:
            delta = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        step = 1.0
        obj_new = obj
        w_new = w
        for _ in range(24):
            w_try = w + B @ (delta * step)
            w_try /= np.linalg.norm(w_try)
            obj_try = _objective_w(w_try, axes)
            if obj_try <= obj:
                w_new, obj_new = w_try, obj_try
                break
            step *= 0.5
        else:
            break  # no direction reduces the objective: local minimum
        decrease = obj - obj_new
        w, obj = w_new, obj_new
        if decrease <= cfg.gn_tol * max(obj, 1e-300) or decrease <= 1e-18:
            break
    else:
        raise NoConvergence(
            f"objective {obj:.3e} still decreasing after {cfg.max_gn_iters} iterations")
    return _minimal_zero_yaw_to_ez(w), obj


def estimate_axis_alignment(trees: list[TreeObservation], cfg: AlignCfg = AlignCfg()) -> AlignmentResult:
    """RANSAC + Gauss-Newton fit of the zero-yaw rotation aligning stem axes to e_z.

    Returns an identity correction flagged degenerate when no usable hypothesis
    exists (e.g. every axis is near-horizontal), so callers degrade to
    no-correction instead of failing.
    """
    if len(trees) == 0:
        raise ValueError("at least one tree is required")

    ids = np.array([t.id for t in trees])
    axes = np.stack([t.axis for t in trees])
    rng = np.random.default_rng(cfg.seed)

    cos_tol = math.cos(math.radians(cfg.angle_tol_deg))
    cos_max_tilt = math.cos(math.radians(cfg.max_tilt_deg))

    usable = np.flatnonzero(np.abs(axes @ _EZ) >= cos_max_tilt)
    if usable.size == 0:
        return AlignmentResult(np.eye(3), (), _objective(np.eye(3), axes), degenerate=True)

    if usable.size <= cfg.ransac_iters:
        sel = usable
    else:
        sel = rng.choice(usable, size=cfg.ransac_iters, replace=False)
    R_h = _batch_zero_yaw_to_ez(axes[sel])
    # |e_z . (R a_j)| for every axis under every hypothesis
    dots = np.abs(axes @ R_h[:, 2, :].T)
    counts = (dots >= cos_tol).sum(axis=0)
    best = int(np.argmax(counts))
    best_R = R_h[best]
    best_inliers = dots[:, best] >= cos_tol

    inlier_axes = axes[best_inliers]
    R_opt, residual = _gauss_newton(best_R, inlier_axes, cfg)
    R_opt = remove_yaw(R_opt)
    return AlignmentResult(
        correction=R_opt,
        inlier_ids=tuple(int(i) for i in ids[best_inliers]),
        residual=residual,
        degenerate=False,
    )


@dataclass(frozen=True)
class ProjectedScene:
    """Stem centers projected onto the corrected horizontal plane.

    Parallel arrays indexed by tree: ids, 2D centers, base heights (corrected
    z), and DBH values.
    """

    scene_index: int
    ids: np.ndarray
    centers: np.ndarray
    base_heights: np.ndarray
    dbhs: np.ndarray
    alignment: AlignmentResult

    def __post_init__(self):
        object.__setattr__(self, "ids", np.asarray(self.ids, dtype=int).reshape(-1))
        object.__setattr__(self, "centers", np.asarray(self.centers, dtype=float).reshape(-1, 2))
        object.__setattr__(self, "base_heights", np.asarray(self.base_heights, dtype=float).reshape(-1))
        object.__setattr__(self, "dbhs", np.asarray(self.dbhs, dtype=float).reshape(-1))
        n = len(self.ids)
        if not (len(self.centers) == len(self.base_heights) == len(self.dbhs) == n):
            raise ValueError("ids, centers, base_heights and dbhs must have equal length")

    @property
    def n_trees(self) -> int:
        return len(self.ids)


def project(scene: SceneInventory, alignment: AlignmentResult) -> ProjectedScene:
    """Rotate stem positions by the correction and split into 2D center + base height."""
    n = scene.n_trees
    if n == 0:
        return ProjectedScene(scene.index, np.empty(0, dtype=int), np.empty((0, 2)),
                              np.empty(0), np.empty(0), alignment)
    positions = np.stack([t.position for t in scene.trees])
    rotated = positions @ alignment.correction.T
    return ProjectedScene(
        scene_index=scene.index,
        ids=np.array([t.id for t in scene.trees]),
        centers=rotated[:, :2],
        base_heights=rotated[:, 2],
        dbhs=np.array([t.dbh for t in scene.trees]),
        alignment=alignment,
    )
