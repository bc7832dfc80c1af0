import math

import numpy as np
import pytest

from conftest import make_tree
from stemloc.model import Payload, Pose, rot_z
from stemloc.scene_assembly import (DBH_MERGE_GATE, AssemblyConfig, WindowOutOfRange,
                                    assemble, supplement_candidates)


def payload(index, pose, trees):
    return Payload(index=index, pose=pose, trees=tuple(trees))


def test_single_payload_identity_window():
    trees = [make_tree(0, [1, 2, 0]), make_tree(1, [5, 5, 0], dbh=0.5)]
    p = payload(0, Pose.identity(), trees)
    scene = assemble([p], 0, AssemblyConfig(window_size=1))
    assert scene.n_trees == 2
    got = sorted((tuple(t.position), t.dbh) for t in scene.trees)
    want = sorted((tuple(t.position), t.dbh) for t in trees)
    for (gp, gd), (wp, wd) in zip(got, want):
        assert np.allclose(gp, wp) and gd == wd


def test_window_out_of_range():
    p = payload(0, Pose.identity(), [])
    with pytest.raises(WindowOutOfRange):
        assemble([p], 0, AssemblyConfig(window_size=3))


def test_two_payload_merge_center_window():
    world_pt = np.array([3.0, 1.0, 0.2])
    offset = Pose.from_translation([1, 0, 0])
    p0 = payload(0, Pose.identity(), [make_tree(0, world_pt)])
    p1 = payload(1, offset, [make_tree(0, offset.inverse().apply(world_pt))])
    p2 = payload(2, Pose.identity(), [])
    scene = assemble([p0, p1, p2], 1, AssemblyConfig(window_size=3, merge_radius=0.5))
    assert scene.n_trees == 1
    merged = scene.trees[0]
    assert merged.obs_count == 2
    # both map to the same point in frame 1
    assert np.abs(merged.position - offset.inverse().apply(world_pt)).max() < 1e-12


def brute_force_merge(trees, merge_radius):
    """Oracle: repeatedly merge any violating pair until stable."""
    items = [dict(position=np.array(t.position), dbh=t.dbh, w=max(t.obs_count, 1),
                  obs=t.obs_count) for t in trees]
    changed = True
    while changed:
        changed = False
        for i in range(len(items)):
            for j in range(i + 1, len(items)):
                a, b = items[i], items[j]
                d = np.hypot(*(a["position"][:2] - b["position"][:2]))
                if d < merge_radius and abs(a["dbh"] - b["dbh"]) < DBH_MERGE_GATE:
                    w = a["w"] + b["w"]
                    a["position"] = (a["position"] * a["w"] + b["position"] * b["w"]) / w
                    a["dbh"] = (a["dbh"] * a["w"] + b["dbh"] * b["w"]) / w
                    a["obs"] += b["obs"]
                    a["w"] = w
                    del items[j]
                    changed = True
                    break
            if changed:
                break
    return items


def test_disjoint_trees_survive_against_oracle(rng):
    # 3 payloads x 5 well-separated trees, no merges expected
    cfg = AssemblyConfig(window_size=3, merge_radius=0.5)
    payloads = []
    all_world = []
    for u in range(3):
        trees = []
        for k in range(5):
            pt = np.array([u * 20.0 + k * 4.0, k * 3.0, 0.0])
            all_world.append(pt)
            trees.append(make_tree(k, pt, dbh=0.2 + 0.05 * k))
        payloads.append(payload(u, Pose.identity(), trees))
    scene = assemble(payloads, 1, cfg)
    assert scene.n_trees == 15
    oracle = brute_force_merge([t for p in payloads for t in p.trees], cfg.merge_radius)
    assert len(oracle) == 15


def test_merge_matches_brute_force_oracle(rng):
    cfg = AssemblyConfig(window_size=3, merge_radius=0.5)
    payloads = []
    for u in range(3):
        trees = [make_tree(k, np.append(rng.uniform(0, 12, 2), 0.0),
                           dbh=float(rng.uniform(0.2, 0.6)))
                 for k in range(8)]
        payloads.append(payload(u, Pose.identity(), trees))
    scene = assemble(payloads, 1, cfg)
    oracle = brute_force_merge([t for p in payloads for t in p.trees], cfg.merge_radius)
    assert scene.n_trees == len(oracle)
    total_obs = sum(t.obs_count for p in payloads for t in p.trees)
    assert sum(t.obs_count for t in scene.trees) == total_obs


def test_no_close_pairs_invariant(rng):
    cfg = AssemblyConfig(window_size=3, merge_radius=0.8)
    for trial in range(20):
        payloads = []
        for u in range(3):
            trees = [make_tree(k, np.append(rng.uniform(0, 10, 2), 0.0),
                               dbh=float(rng.uniform(0.25, 0.4)))
                     for k in range(6)]
            payloads.append(payload(u, Pose.identity(), trees))
        scene = assemble(payloads, 1, cfg)
        real = [t for t in scene.trees if not t.is_candidate]
        for i in range(len(real)):
            for j in range(i + 1, len(real)):
                d = np.hypot(*(real[i].position[:2] - real[j].position[:2]))
                close = d < cfg.merge_radius
                similar = abs(real[i].dbh - real[j].dbh) < DBH_MERGE_GATE
                assert not (close and similar)


def test_permutation_independence_with_gap_condition(rng):
    # clusters separated by > 2 * merge_radius merge identically in any order
    cfg = AssemblyConfig(window_size=3, merge_radius=0.5)
    base_pts = [np.array([5.0 * k, 0.0, 0.0]) for k in range(6)]
    payloads = []
    for u in range(3):
        trees = [make_tree(k, pt + rng.normal(0, 0.05, 3), dbh=0.3) for k, pt in enumerate(base_pts)]
        payloads.append(payload(u, Pose.identity(), trees))
    ref = assemble(payloads, 1, cfg)
    perm = [payloads[2], payloads[0], payloads[1]]
    out = assemble(perm, 1, cfg)
    ref_pos = sorted(tuple(np.round(t.position, 6)) for t in ref.trees)
    out_pos = sorted(tuple(np.round(t.position, 6)) for t in out.trees)
    assert len(ref_pos) == len(out_pos)
    for a, b in zip(ref_pos, out_pos):
        assert np.abs(np.array(a) - np.array(b)).max() < 1e-6


def test_rotation_transform_applied():
    # payload observed from a yawed frame maps back into the center frame
    world_pt = np.array([4.0, 0.0, 1.0])
    yawed = Pose(rot_z(math.radians(90)), np.zeros(3))
    p0 = payload(0, Pose.identity(), [make_tree(0, world_pt)])
    p1 = payload(1, yawed, [make_tree(0, yawed.inverse().apply(world_pt))])
    scene = assemble([p0, p1, payload(2, Pose.identity(), [])], 1,
                     AssemblyConfig(window_size=3))
    assert scene.n_trees == 1
    # scene frame is payload 1's yawed frame
    assert np.abs(scene.trees[0].position - yawed.inverse().apply(world_pt)).max() < 1e-12


def test_supplement_threshold_met():
    scene = assemble([payload(0, Pose.identity(),
                              [make_tree(k, [4 * k, 0, 0]) for k in range(5)])],
                     0, AssemblyConfig(window_size=1, min_trees=5))
    out = supplement_candidates(scene, [make_tree(99, [1, 1, 0], obs_count=9)],
                                AssemblyConfig(window_size=1, min_trees=5))
    assert out is scene


def test_supplement_sort_and_take():
    cfg = AssemblyConfig(window_size=1, min_trees=5, candidate_min_obs=3)
    scene = assemble([payload(0, Pose.identity(),
                              [make_tree(0, [0, 0, 0]), make_tree(1, [5, 0, 0])])], 0, cfg)
    candidates = [make_tree(100 + k, [10 + k, 10, 0], obs_count=k + 1, is_candidate=True)
                  for k in range(10)]
    out = supplement_candidates(scene, candidates, cfg)
    added = [t for t in out.trees if t.is_candidate]
    # oracle: descending obs_count, threshold 3, stop at min_trees total
    assert sorted(t.obs_count for t in added) == [8, 9, 10]
    assert out.n_trees == 5
    assert len({t.id for t in out.trees}) == 5


def test_supplement_empty_candidates():
    scene = assemble([payload(0, Pose.identity(), [])], 0, AssemblyConfig(window_size=1))
    out = supplement_candidates(scene, [], AssemblyConfig(window_size=1))
    assert out.n_trees == 0
