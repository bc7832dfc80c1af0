import itertools
import math

import numpy as np
import pytest

from conftest import make_projected
from stemloc.triangles import (QuantizationOverflow, TriConfig, TriangleIndex,
                               build_triangles, fine_retrieve, key_set, make_key,
                               similarity)


def brute_force_triangles(centers, dbhs, cfg):
    """Oracle: exhaustive triple enumeration with the same filters."""
    results = set()
    n = len(centers)
    for i, j, k in itertools.combinations(range(n), 3):
        p = np.array([centers[i], centers[j], centers[k]])
        sides = sorted([np.linalg.norm(p[0] - p[1]), np.linalg.norm(p[1] - p[2]),
                        np.linalg.norm(p[0] - p[2])])
        if sides[0] < cfg.min_side or sides[2] > cfg.max_side:
            continue
        area2 = abs((p[1][0] - p[0][0]) * (p[2][1] - p[0][1])
                    - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]))
        if area2 / sides[2] < cfg.min_height:
            continue
        results.add((i, j, k))
    return results


def test_two_trees_no_triangle():
    assert len(build_triangles(make_projected([[0, 0], [5, 0]]))) == 0


def test_3_4_5_triangle():
    scene = make_projected([[0, 0], [3, 0], [0, 4]])
    tris = build_triangles(scene)
    assert len(tris) == 1
    d = tris[0]
    assert d.sides == (3.0, 4.0, 5.0)
    assert np.allclose(d.centroid, [1.0, 4.0 / 3.0])
    # canonical order: vertex opposite the shortest side first
    assert d.vertex_ids == (2, 1, 0)
    assert np.allclose(d.vertices, [[0, 4], [3, 0], [0, 0]])


def test_knn_full_equals_brute_force(rng):
    cfg = TriConfig(knn=9)
    for _ in range(20):
        centers = rng.uniform(-15, 15, (10, 2))
        scene = make_projected(centers)
        got = {tuple(sorted(t.vertex_ids)) for t in build_triangles(scene, cfg)}
        assert got == brute_force_triangles(centers, None, cfg)


def test_make_key_fields_and_permutation():
    cfg = TriConfig(len_quant=0.2)
    key = make_key([3.0, 4.0, 5.0], cfg)
    assert (key >> 40) & 0xFFFFF == 15
    assert (key >> 20) & 0xFFFFF == 20
    assert key & 0xFFFFF == 25
    # any vertex permutation sorts to the same sides, hence the same key
    scene = make_projected([[0, 0], [3, 0], [0, 4]])
    perm = make_projected([[0, 4], [0, 0], [3, 0]])
    assert build_triangles(scene)[0].key == build_triangles(perm)[0].key


def test_quantization_same_and_boundary():
    cfg = TriConfig(len_quant=0.2)
    assert make_key([3.05, 4.0, 5.0], cfg) == make_key([3.15, 4.0, 5.0], cfg)
    assert make_key([3.19, 4.0, 5.0], cfg) != make_key([3.21, 4.0, 5.0], cfg)


def test_quantization_overflow():
    with pytest.raises(QuantizationOverflow):
        make_key([1.0, 2.0, 2**21], TriConfig(len_quant=0.2, max_side=1e9))


def test_similarity_examples():
    assert similarity({1, 2, 3}, {1, 2, 3}) == 3
    assert similarity({1, 2}, {3, 4}) == 0
    assert similarity({1, 2, 3}, {2, 3, 4, 5}) == 2


def test_similarity_multiplicity_toggle():
    cfg = TriConfig(count_multiplicity=True)
    assert similarity([1, 1, 2], [1, 1, 1, 2], cfg) == 3
    assert similarity([1, 1, 2], [1, 2], TriConfig()) == 2


def test_degenerate_collinear_filtered():
    scene = make_projected([[0, 0], [5, 0], [10, 0.001]])
    assert len(build_triangles(scene)) == 0


def test_side_length_filters():
    cfg = TriConfig(min_side=1.0, max_side=10.0)
    # one side too long
    assert len(build_triangles(make_projected([[0, 0], [8, 0], [0, 8]]), cfg)) == 0
    # one side too short
    assert len(build_triangles(make_projected([[0, 0], [0.5, 0.4], [5, 5]]), cfg)) == 0


def test_output_sorted_and_size_bound(rng):
    cfg = TriConfig(knn=6)
    centers = rng.uniform(-30, 30, (40, 2))
    tris = build_triangles(make_projected(centers), cfg)
    keys = [t.key for t in tris]
    assert keys == sorted(keys)
    n, k = 40, 6
    assert len(tris) <= n * k * (k - 1) // 2


def test_fine_retrieve_self_and_zero(rng):
    cfg = TriConfig()
    index = TriangleIndex()
    scenes = {}
    for i in range(6):
        scene = make_projected(rng.uniform(-20, 20, (12, 2)), index=i)
        ts = build_triangles(scene, cfg)
        index.add_scene(i, ts)
        scenes[i] = ts
    out = fine_retrieve(scenes[2], list(range(6)), index, cfg)
    assert out[0] == 2
    # disjoint: a far-away singleton triangle scene shares nothing
    far = build_triangles(make_projected([[100, 100], [108, 100], [100, 109]], index=99), cfg)
    assert fine_retrieve(far, [i for i in range(6)], index, cfg) == []


def test_fine_retrieve_matches_brute_force(rng):
    cfg = TriConfig(top_m=10)
    index = TriangleIndex()
    key_sets = {}
    base = rng.uniform(-20, 20, (15, 2))
    for i in range(30):
        jitter = rng.normal(0, 0.02 * (i % 7), base.shape)
        ts = build_triangles(make_projected(base + jitter, index=i), cfg)
        index.add_scene(i, ts)
        key_sets[i] = ts.key_set
    q = build_triangles(make_projected(base + rng.normal(0, 0.01, base.shape), index=77), cfg)
    got = fine_retrieve(q, list(range(30)), index, cfg)
    scored = sorted(((-len(q.key_set & key_sets[i]), i) for i in range(30)
                     if len(q.key_set & key_sets[i]) > 0))
    assert got == [i for _, i in scored[:10]]


def test_rigid_invariance_sample(rng):
    from collections import Counter

    cfg = TriConfig()
    kept, total = 0, 0
    for _ in range(50):
        centers = rng.uniform(-20, 20, (15, 2))
        theta = rng.uniform(0, 2 * math.pi)
        R = np.array([[math.cos(theta), -math.sin(theta)],
                      [math.sin(theta), math.cos(theta)]])
        t = rng.uniform(-50, 50, 2)
        a = build_triangles(make_projected(centers), cfg)
        b = build_triangles(make_projected(centers @ R.T + t), cfg)
        # exclude triangles whose any quantized side is boundary-adjacent
        def stable_keys(ts):
            frac = np.abs(ts.sides / cfg.len_quant - np.round(ts.sides / cfg.len_quant))
            ok = (frac > 1e-6).all(axis=1)
            return Counter(int(k) for k in ts.keys[ok])
        ka, kb = stable_keys(a), stable_keys(b)
        total += sum(ka.values())
        kept += sum((ka & kb).values())
    assert kept / total > 0.999


def test_duplicate_scene_index_rejected():
    index = TriangleIndex()
    ts = build_triangles(make_projected([[0, 0], [3, 0], [0, 4]], index=1))
    index.add_scene(1, ts)
    with pytest.raises(ValueError):
        index.add_scene(1, ts)
