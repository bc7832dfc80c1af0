"""Gauss-Newton pose-graph optimization over rigid 3D poses.

Nodes are world poses; edges are relative-pose measurements with 6x6
information weights. The per-edge residual splits into the translation part
and the rotation logarithm of meas^-1 * x_from^-1 * x_to, stacked as
[translation(3), rotation(3)]. One anchor node is held fixed. Dense normal
equations below a node threshold, sparse Cholesky above it; step halving
keeps the objective monotone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .model import Pose, log_so3, exp_so3, skew, matrix_to_quat, quat_to_matrix
from .verification import LocalizationResult, VerifyConfig

DENSE_NODE_LIMIT = 600


class SingularSystem(Exception):
    """Normal equations are rank-deficient (under-constrained graph)."""


@dataclass
class PoseGraphEdge:
    from_id: int
    to_id: int
    measurement: Pose
    information: np.ndarray = field(default_factory=lambda: np.eye(6))

    def __post_init__(self):
        self.information = np.asarray(self.information, dtype=float).reshape(6, 6)


@dataclass
class PoseGraph:
    nodes: dict[int, Pose]
    edges: list[PoseGraphEdge]
    anchored: int

    def validate(self):
        if self.anchored not in self.nodes:
            raise ValueError(f"anchor {self.anchored} is not a node")
        adjacency: dict[int, list[int]] = {i: [] for i in self.nodes}
        for e in self.edges:
            if e.from_id not in self.nodes or e.to_id not in self.nodes:
                raise ValueError(f"edge {e.from_id}->{e.to_id} references unknown node")
            adjacency[e.from_id].append(e.to_id)
            adjacency[e.to_id].append(e.from_id)
        seen = {self.anchored}
        stack = [self.anchored]
        while stack:
            for nxt in adjacency[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        if len(seen) != len(self.nodes):
            missing = sorted(set(self.nodes) - seen)
            raise ValueError(f"nodes {missing[:8]} not connected to the anchor")


def _jr_inv(w: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of the rotation logarithm."""
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * K + (1.0 / 12.0) * (K @ K)
    theta = min(theta, math.pi - 1e-9)
    coef = 1.0 / theta**2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * K + coef * (K @ K)


def edge_residual(x_from: Pose, x_to: Pose, meas: Pose) -> np.ndarray:
    """[translation error, rotation-log error] of meas^-1 * x_from^-1 * x_to."""
    err = meas.inverse().compose(x_from.inverse()).compose(x_to)
    return np.concatenate([err.translation, log_so3(err.rotation)])


def edge_jacobians(x_from: Pose, x_to: Pose, meas: Pose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual plus its Jacobians w.r.t. the two node perturbations.

    Node update convention: R <- exp(d_theta) R, t <- t + d_t, with state
    ordering [d_t, d_theta] matching the residual ordering.
    """
    r = edge_residual(x_from, x_to, meas)
    A = meas.rotation.T @ x_from.rotation.T
    B = _jr_inv(r[3:]) @ x_to.rotation.T
    J_from = np.zeros((6, 6))
    J_to = np.zeros((6, 6))
    J_from[:3, :3] = -A
    J_from[:3, 3:] = A @ skew(x_to.translation - x_from.translation)
    J_from[3:, 3:] = -B
    J_to[:3, :3] = A
    J_to[3:, 3:] = B
    return r, J_from, J_to


def _chi2(graph_nodes: dict[int, Pose], edges: list[PoseGraphEdge]) -> float:
    total = 0.0
    for e in edges:
        r = edge_residual(graph_nodes[e.from_id], graph_nodes[e.to_id], e.measurement)
        total += float(r @ e.information @ r)
    return total


def _solve_normal_equations(H_blocks, b, n_vars: int, dense: bool) -> np.ndarray:
    if dense:
        H = np.zeros((6 * n_vars, 6 * n_vars))
        for (bi, bj), blk in H_blocks.items():
            H[6 * bi:6 * bi + 6, 6 * bj:6 * bj + 6] += blk
        try:
            L = np.linalg.cholesky(H)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem("normal equations are not positive definite") from exc
        y = scipy.linalg.solve_triangular(L, -b, lower=True)
        return scipy.linalg.solve_triangular(L.T, y, lower=False)
    rows, cols, vals = [], [], []
    for (bi, bj), blk in H_blocks.items():
        r0, c0 = 6 * bi, 6 * bj
        for a in range(6):
            for c in range(6):
                rows.append(r0 + a)
                cols.append(c0 + c)
                vals.append(blk[a, c])
    H = scipy.sparse.csc_matrix((vals, (rows, cols)), shape=(6 * n_vars, 6 * n_vars))
    try:
        solver = scipy.sparse.linalg.splu(H)
    except RuntimeError as exc:
        raise SingularSystem("sparse factorization failed") from exc
    delta = solver.solve(-b)
    if not np.all(np.isfinite(delta)):
        raise SingularSystem("sparse solve produced non-finite update")
    return delta


def optimize(graph: PoseGraph, max_iters: int = 50, tol: float = 1e-9,
             history: list | None = None) -> tuple[dict[int, Pose], float, int]:
    """Gauss-Newton with step halving; chi^2 never increases across iterations.

    Pass a list as `history` to collect the accepted chi^2 sequence.
    """
    graph.validate()
    poses = dict(graph.nodes)
    var_ids = [i for i in sorted(poses) if i != graph.anchored]
    var_index = {nid: k for k, nid in enumerate(var_ids)}
    n_vars = len(var_ids)
    chi2 = _chi2(poses, graph.edges)
    if history is not None:
        history.append(chi2)
    if n_vars == 0 or not graph.edges:
        return poses, chi2, 0

    dense = len(poses) <= DENSE_NODE_LIMIT
    iterations = 0
    for _ in range(max_iters):
        H_blocks: dict[tuple[int, int], np.ndarray] = {}
        b = np.zeros(6 * n_vars)
        for e in graph.edges:
            r, J_from, J_to = edge_jacobians(poses[e.from_id], poses[e.to_id], e.measurement)
            omega = e.information
            for nid_a, J_a in ((e.from_id, J_from), (e.to_id, J_to)):
                if nid_a == graph.anchored:
                    continue
                ia = var_index[nid_a]
                b[6 * ia:6 * ia + 6] += J_a.T @ omega @ r
                for nid_b, J_b in ((e.from_id, J_from), (e.to_id, J_to)):
                    if nid_b == graph.anchored:
                        continue
                    ib = var_index[nid_b]
                    key = (ia, ib)
                    blk = J_a.T @ omega @ J_b
                    if key in H_blocks:
                        H_blocks[key] += blk
                    else:
                        H_blocks[key] = blk

        delta = _solve_normal_equations(H_blocks, b, n_vars, dense)

        step = 1.0
        accepted = False
        for _ in range(20):
            trial = dict(poses)
            for nid in var_ids:
                k = var_index[nid]
                dt = delta[6 * k:6 * k + 3] * step
                dw = delta[6 * k + 3:6 * k + 6] * step
                old = poses[nid]
                trial[nid] = Pose(exp_so3(dw) @ old.rotation, old.translation + dt)
            chi2_new = _chi2(trial, graph.edges)
            if chi2_new <= chi2:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        decrease = chi2 - chi2_new
        poses, chi2 = trial, chi2_new
        iterations += 1
        if history is not None:
            history.append(chi2)
        if decrease <= tol * max(chi2, 1e-12):
            break
    return poses, chi2, iterations


# nominal 1-sigma accuracy of a verified match: 0.1 m translation, 1 degree rotation
CONSTRAINT_BASE_INFORMATION = np.diag([100.0, 100.0, 100.0] + [math.degrees(1.0) ** 2] * 3)


def constraints_from_localization(results: list[tuple[int, int, LocalizationResult]],
                                  cfg: VerifyConfig = VerifyConfig(),
                                  base_information: np.ndarray | None = None
                                  ) -> list[PoseGraphEdge]:
    """Edges for results whose overlap clears the acceptance threshold.

    The 6-DoF transform maps query-frame into candidate-frame coordinates, so
    the edge runs candidate -> query; the diagonal base information (default:
    the nominal accuracy of a verified match) is scaled by the overlap ratio.
    """
    base = CONSTRAINT_BASE_INFORMATION if base_information is None else np.asarray(base_information)
    edges = []
    for query_node, cand_node, res in results:
        if res.overlap > cfg.overlap_accept:
            edges.append(PoseGraphEdge(
                from_id=cand_node,
                to_id=query_node,
                measurement=res.transform_6dof,
                information=base * res.overlap,
            ))
    return edges


def write_graph_text(graph: PoseGraph) -> str:
    """Vertex/edge text form: VERTEX_SE3:QUAT and EDGE_SE3:QUAT records."""
    lines = []
    for nid in sorted(graph.nodes):
        p = graph.nodes[nid]
        qx, qy, qz, qw = matrix_to_quat(p.rotation)
        t = p.translation
        lines.append("VERTEX_SE3:QUAT %d %.12g %.12g %.12g %.12g %.12g %.12g %.12g"
                     % (nid, t[0], t[1], t[2], qx, qy, qz, qw))
    lines.append(f"FIX {graph.anchored}")
    for e in graph.edges:
        qx, qy, qz, qw = matrix_to_quat(e.measurement.rotation)
        t = e.measurement.translation
        upper = [e.information[i, j] for i in range(6) for j in range(i, 6)]
        lines.append("EDGE_SE3:QUAT %d %d %.12g %.12g %.12g %.12g %.12g %.12g %.12g "
                     % (e.from_id, e.to_id, t[0], t[1], t[2], qx, qy, qz, qw)
                     + " ".join("%.12g" % v for v in upper))
    return "\n".join(lines) + "\n"


def parse_graph_text(text: str) -> PoseGraph:
    nodes: dict[int, Pose] = {}
    edges: list[PoseGraphEdge] = []
    anchored: int | None = None
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        try:
            if tag == "VERTEX_SE3:QUAT":
                nid = int(parts[1])
                vals = [float(v) for v in parts[2:9]]
                nodes[nid] = Pose(quat_to_matrix(*vals[3:7]), vals[:3])
            elif tag == "EDGE_SE3:QUAT":
                a, bb = int(parts[1]), int(parts[2])
                vals = [float(v) for v in parts[3:10]]
                upper = [float(v) for v in parts[10:31]]
                info = np.zeros((6, 6))
                k = 0
                for i in range(6):
                    for j in range(i, 6):
                        info[i, j] = info[j, i] = upper[k]
                        k += 1
                edges.append(PoseGraphEdge(a, bb, Pose(quat_to_matrix(*vals[3:7]), vals[:3]), info))
            elif tag == "FIX":
                anchored = int(parts[1])
            else:
                raise ValueError(f"unknown record {tag}")
        except (IndexError, ValueError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
    if anchored is None:
        anchored = min(nodes) if nodes else 0
    return PoseGraph(nodes=nodes, edges=edges, anchored=anchored)
