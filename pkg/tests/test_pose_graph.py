import math

import numpy as np
import pytest

from stemloc.model import Pose, exp_so3, rot_z, rotation_angle
from stemloc.pose_graph import (PoseGraph, PoseGraphEdge, SingularSystem,
                                constraints_from_localization, edge_jacobians,
                                edge_residual, optimize, parse_graph_text,
                                write_graph_text)
from stemloc.verification import LocalizationResult, VerifyConfig


def rand_pose(rng, sr=0.6, st=2.0):
    return Pose(exp_so3(rng.normal(0, sr, 3)), rng.normal(0, st, 3))


def exact_edge(a, b, poses, info=None):
    meas = poses[a].inverse().compose(poses[b])
    return PoseGraphEdge(a, b, meas, np.eye(6) if info is None else info)


def test_chain_recovers_ground_truth(rng):
    truth = {0: Pose(), 1: rand_pose(rng), 2: rand_pose(rng)}
    edges = [exact_edge(0, 1, truth), exact_edge(1, 2, truth)]
    init = {0: truth[0], 1: rand_pose(rng), 2: rand_pose(rng)}
    g = PoseGraph(nodes=init, edges=edges, anchored=0)
    opt, chi2, _ = optimize(g)
    assert chi2 < 1e-12
    for i in truth:
        assert np.abs(opt[i].translation - truth[i].translation).max() < 1e-8
        assert rotation_angle(opt[i].rotation.T @ truth[i].rotation) < 1e-8


def test_single_node_no_edges():
    g = PoseGraph(nodes={0: Pose()}, edges=[], anchored=0)
    opt, chi2, iters = optimize(g)
    assert chi2 == 0.0
    assert iters == 0
    assert np.array_equal(opt[0].rotation, np.eye(3))


def test_disconnected_rejected():
    g = PoseGraph(nodes={0: Pose(), 1: Pose()}, edges=[], anchored=0)
    with pytest.raises(ValueError):
        optimize(g)


def test_unknown_edge_endpoint_rejected():
    g = PoseGraph(nodes={0: Pose()}, edges=[PoseGraphEdge(0, 7, Pose())], anchored=0)
    with pytest.raises(ValueError):
        optimize(g)


def test_jacobians_match_finite_differences(rng):
    eps = 1e-6
    worst = 0.0
    for _ in range(100):
        xi, xj, m = rand_pose(rng, 0.8), rand_pose(rng, 0.8), rand_pose(rng, 0.8)
        _, Ji, Jj = edge_jacobians(xi, xj, m)

        def perturb(p, d):
            return Pose(exp_so3(d[3:]) @ p.rotation, p.translation + d[:3])

        for k in range(6):
            d = np.zeros(6)
            d[k] = eps
            col_i = (edge_residual(perturb(xi, d), xj, m)
                     - edge_residual(perturb(xi, -d), xj, m)) / (2 * eps)
            col_j = (edge_residual(xi, perturb(xj, d), m)
                     - edge_residual(xi, perturb(xj, -d), m)) / (2 * eps)
            worst = max(worst, np.abs(Ji[:, k] - col_i).max(), np.abs(Jj[:, k] - col_j).max())
    assert worst < 1e-4


def ate(poses, truth):
    errs = [np.linalg.norm(poses[i].translation - truth[i].translation) for i in truth]
    return math.sqrt(np.mean(np.square(errs)))


def test_noisy_loop_with_exact_closures():
    # circular trajectory; odometry noise accumulates, 10 exact loop edges
    rng = np.random.default_rng(1)
    n = 100
    radius = 150.0
    sigma_t, sigma_r = 0.1, math.radians(0.5)
    truth = {}
    for i in range(n):
        ang = 2 * math.pi * i / n
        truth[i] = Pose(rot_z(ang), [radius * math.cos(ang), radius * math.sin(ang), 0.0])
    odom_info = np.diag([1 / sigma_t**2] * 3 + [1 / sigma_r**2] * 3)
    edges = []
    init = {0: truth[0]}
    cur = truth[0]
    for i in range(n - 1):
        rel = truth[i].inverse().compose(truth[i + 1])
        noisy = Pose(exp_so3(rng.normal(0, sigma_r, 3)) @ rel.rotation,
                     rel.translation + rng.normal(0, sigma_t, 3))
        edges.append(PoseGraphEdge(i, i + 1, noisy, odom_info))
        cur = cur.compose(noisy)
        init[i + 1] = cur
    for k in range(10):  # exact loop closures across the ring
        a = k * 10
        b = (a + 37) % n
        edges.append(exact_edge(a, b, truth, info=np.eye(6) * 1e6))
    g = PoseGraph(nodes=init, edges=edges, anchored=0)
    history = []
    opt, chi2, iters = optimize(g, history=history)
    from stemloc.multisession import trajectory_errors
    ate_pre, _ = trajectory_errors(init, truth)
    ate_post, _ = trajectory_errors(opt, truth)
    assert ate_post <= 0.1 * ate_pre
    assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))  # monotone chi2


def test_gauge_invariance(rng):
    truth = {i: rand_pose(rng) for i in range(6)}
    edges = [exact_edge(i, i + 1, truth) for i in range(5)]
    edges.append(exact_edge(0, 5, truth))
    init = {i: Pose(exp_so3(rng.normal(0, 0.05, 3)) @ truth[i].rotation,
                    truth[i].translation + rng.normal(0, 0.1, 3)) for i in range(6)}
    init[0] = truth[0]
    base, _, _ = optimize(PoseGraph(nodes=dict(init), edges=edges, anchored=0))

    G = rand_pose(rng)
    moved_init = {i: G.compose(p) for i, p in init.items()}
    moved, _, _ = optimize(PoseGraph(nodes=moved_init, edges=edges, anchored=0))
    for i in range(6):
        expect = G.compose(base[i])
        assert np.abs(moved[i].translation - expect.translation).max() < 1e-6
        assert rotation_angle(moved[i].rotation.T @ expect.rotation) < 1e-6


def test_singular_system():
    # zero information leaves a node unconstrained
    g = PoseGraph(nodes={0: Pose(), 1: Pose(np.eye(3), [1, 0, 0])},
                  edges=[PoseGraphEdge(0, 1, Pose(np.eye(3), [1.5, 0, 0]), np.zeros((6, 6)))],
                  anchored=0)
    with pytest.raises(SingularSystem):
        optimize(g)


def _result(overlap, pose=None):
    return LocalizationResult(
        candidate_index=0, transform_4dof=pose or Pose(),
        transform_6dof=pose or Pose(), matched_pairs=(), overlap=overlap,
        n_query_trees=10, n_cand_trees=10)


def test_constraint_gating():
    cfg = VerifyConfig(overlap_accept=0.2)
    results = [(1, 0, _result(0.19)), (2, 0, _result(1.0)), (3, 0, _result(0.21))]
    edges = constraints_from_localization(results, cfg)
    assert len(edges) == 2  # strictly above the threshold only
    assert {e.to_id for e in edges} == {2, 3}
    # overlap scales the information
    full = [e for e in edges if e.to_id == 2][0]
    partial = [e for e in edges if e.to_id == 3][0]
    assert np.allclose(full.information, partial.information / 0.21 * 1.0)


def test_constraint_direction():
    pose = Pose(rot_z(0.3), [1.0, 2.0, 0.5])
    edges = constraints_from_localization([(7, 3, _result(0.9, pose))])
    e = edges[0]
    assert (e.from_id, e.to_id) == (3, 7)
    assert np.array_equal(e.measurement.rotation, pose.rotation)


def test_mixed_filter_count(rng):
    cfg = VerifyConfig()
    results = [(i, 0, _result(float(rng.uniform(0, 1)))) for i in range(50)]
    edges = constraints_from_localization(results, cfg)
    assert len(edges) == sum(1 for _, _, r in results if r.overlap > cfg.overlap_accept)


def test_graph_text_round_trip(rng):
    nodes = {i: rand_pose(rng) for i in range(4)}
    edges = [exact_edge(0, 1, nodes), exact_edge(1, 2, nodes),
             exact_edge(2, 3, nodes, info=np.diag([1, 2, 3, 4, 5, 6.0]))]
    g = PoseGraph(nodes=nodes, edges=edges, anchored=2)
    text = write_graph_text(g)
    assert "VERTEX_SE3:QUAT" in text and "EDGE_SE3:QUAT" in text and "FIX 2" in text
    back = parse_graph_text(text)
    assert back.anchored == 2
    assert set(back.nodes) == set(nodes)
    for i in nodes:
        assert np.abs(back.nodes[i].translation - nodes[i].translation).max() < 1e-9
        assert rotation_angle(back.nodes[i].rotation.T @ nodes[i].rotation) < 1e-9
    for ea, eb in zip(edges, back.edges):
        assert (ea.from_id, ea.to_id) == (eb.from_id, eb.to_id)
        assert np.abs(ea.information - eb.information).max() < 1e-9


def test_parse_rejects_garbage():
    with pytest.raises(ValueError):
        parse_graph_text("WHAT 1 2 3\n")
