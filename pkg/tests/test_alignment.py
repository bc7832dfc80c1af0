import math

import numpy as np
import pytest

from conftest import make_tree
from stemloc.alignment import (AlignCfg, NoConvergence, ProjectedScene,
                               estimate_axis_alignment, project)
from stemloc.model import (Pose, SceneInventory, exp_so3, remove_yaw, rot_x, rot_y,
                           rot_z, yaw_of, rotation_angle)


def trees_with_axes(axes, positions=None):
    out = []
    for i, a in enumerate(axes):
        pos = [i * 3.0, 0.0, 0.0] if positions is None else positions[i]
        out.append(make_tree(i, pos, axis=a))
    return out


def test_already_aligned_axes():
    res = estimate_axis_alignment(trees_with_axes([[0, 0, 1]] * 10))
    assert np.abs(res.correction - np.eye(3)).max() < 1e-12
    assert res.residual < 1e-20
    assert not res.degenerate


def test_known_view_rotation_compensated():
    R_view = rot_x(math.radians(10.0)) @ rot_y(math.radians(-7.0))
    axes = [R_view @ np.array([0, 0, 1.0]) for _ in range(25)]
    res = estimate_axis_alignment(trees_with_axes(axes))
    # compensation: correction equals the zero-yaw part of R_view^-1
    target = remove_yaw(np.linalg.inv(R_view))
    assert rotation_angle(res.correction @ np.linalg.inv(target)) < 1e-6
    assert abs(yaw_of(res.correction)) < 1e-9


def test_outlier_robust_recovery(rng):
    R_view = rot_x(math.radians(9.0)) @ rot_y(math.radians(12.0))
    axes = []
    for i in range(100):
        if i < 80:
            axes.append(R_view @ np.array([0, 0, 1.0]))
        else:
            v = rng.normal(0, 1, 3)
            axes.append(v / np.linalg.norm(v))
    res = estimate_axis_alignment(trees_with_axes(axes), AlignCfg(seed=3))
    target = remove_yaw(np.linalg.inv(R_view))
    err_deg = math.degrees(rotation_angle(res.correction @ np.linalg.inv(target)))
    assert err_deg < 1.0


def test_degenerate_all_horizontal():
    axes = [[1, 0, 0], [0, 1, 0], [math.sqrt(0.5), math.sqrt(0.5), 0]]
    res = estimate_axis_alignment(trees_with_axes(axes))
    assert res.degenerate
    assert np.allclose(res.correction, np.eye(3))


def test_empty_input_rejected():
    with pytest.raises(ValueError):
        estimate_axis_alignment([])


def test_inlier_alignment_quality(rng):
    R_view = rot_x(math.radians(14.0))
    axes = [R_view @ exp_so3([rng.normal(0, 0.01), rng.normal(0, 0.01), 0]) @ np.array([0, 0, 1.0])
            for _ in range(50)]
    cfg = AlignCfg(seed=0)
    res = estimate_axis_alignment(trees_with_axes(axes), cfg)
    corrected = np.stack([res.correction @ a for a in
                          (np.asarray(a) for a in axes)])
    inlier_mask = np.isin(np.arange(50), res.inlier_ids)
    mean_dot = np.abs(corrected[inlier_mask][:, 2]).mean()
    assert mean_dot >= math.cos(math.radians(cfg.angle_tol_deg))


def test_determinism():
    rng = np.random.default_rng(5)
    axes = [exp_so3(rng.normal(0, 0.05, 3)) @ np.array([0, 0, 1.0]) for _ in range(30)]
    trees = trees_with_axes(axes)
    a = estimate_axis_alignment(trees, AlignCfg(seed=9))
    b = estimate_axis_alignment(trees, AlignCfg(seed=9))
    assert np.array_equal(a.correction, b.correction)
    assert a.inlier_ids == b.inlier_ids
    assert a.residual == b.residual


def scene_from_trees(trees, index=0):
    return SceneInventory(index=index, pose=Pose.identity(), trees=tuple(trees))


def test_project_identity():
    from stemloc.alignment import AlignmentResult
    scene = scene_from_trees([make_tree(0, [1, 2, 3])])
    ps = project(scene, AlignmentResult())
    assert np.allclose(ps.centers[0], [1, 2])
    assert ps.base_heights[0] == 3.0
    assert ps.dbhs[0] == 0.3


def test_project_roll_sign_convention():
    # rolling +90 deg about x maps (0,0,5) onto the -y axis
    from stemloc.alignment import AlignmentResult
    scene = scene_from_trees([make_tree(0, [0, 0, 5.0])])
    correction = rot_x(math.radians(90))
    ps = project(scene, AlignmentResult(correction=correction))
    assert np.abs(ps.centers[0] - np.array([0.0, -5.0])).max() < 1e-12
    assert abs(ps.base_heights[0]) < 1e-12


def pairwise_dists(centers):
    d = centers[:, None, :] - centers[None, :, :]
    return np.sqrt((d ** 2).sum(-1))


def test_viewpoint_invariant_distance_matrix(rng):
    # the module's core contract: re-aligned 2D geometry is viewpoint independent
    for trial in range(10):
        n = 25
        positions = np.column_stack([rng.uniform(-20, 20, (n, 2)), rng.uniform(-1, 1, n)])
        axes = [exp_so3([rng.normal(0, 0.03), rng.normal(0, 0.03), 0]) @ np.array([0, 0, 1.0])
                for _ in range(n)]
        trees = [make_tree(i, positions[i], axis=axes[i]) for i in range(n)]
        scene = scene_from_trees(trees)
        ref = project(scene, estimate_axis_alignment(list(trees), AlignCfg(seed=1)))

        R_view = rot_x(rng.uniform(-0.5, 0.5)) @ rot_y(rng.uniform(-0.5, 0.5)) @ rot_z(rng.uniform(0, 6.28))
        view_pose = Pose(R_view)
        rot_trees = [t.transformed(view_pose) for t in trees]
        rot_scene = scene_from_trees(rot_trees)
        out = project(rot_scene, estimate_axis_alignment(list(rot_trees), AlignCfg(seed=1)))

        assert np.abs(pairwise_dists(ref.centers) - pairwise_dists(out.centers)).max() < 1e-4
