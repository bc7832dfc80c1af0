import math

import numpy as np
import pytest

from stemloc.evaluation import (ConfigError, EvalConfig, QueryRecord, records_from_csv,
                                records_to_csv, run_localization_eval,
                                run_place_recognition, run_queries,
                                score_localization, score_place_recognition,
                                timings_to_csv)
from stemloc.model import Pose
from stemloc.multisession import assemble_session_scenes
from stemloc.pipeline import PipelineConfig, SceneDatabase
from stemloc.scene_assembly import AssemblyConfig
from stemloc.simulator import SimConfig, generate_world, make_lawnmower_trajectory, simulate_session


def rec(qi, retrieved, overlap, te, re, tp, hp):
    return QueryRecord(query_index=qi, retrieved_index=retrieved, tdh_distance=0.1,
                       overlap=overlap, te=te, re_deg=re, true_positive=tp,
                       has_positive=hp)


def reference_pr_scorer(records, n_thresholds=200):
    """Independent reimplementation of the place-recognition aggregates."""
    n_pos = sum(1 for r in records if r.has_positive)
    if n_pos == 0:
        return None
    r1 = sum(1 for r in records if r.true_positive) / n_pos
    best_f1 = 0.0
    pts = []
    for tau in np.linspace(0.0, 1.0, n_thresholds):
        tp = fp = 0
        for r in records:
            if r.retrieved_index >= 0 and r.overlap >= tau:
                if r.true_positive:
                    tp += 1
                else:
                    fp += 1
        p = tp / (tp + fp) if tp + fp else 1.0
        rc = tp / n_pos
        if p + rc > 0:
            best_f1 = max(best_f1, 2 * p * rc / (p + rc))
        pts.append((rc, p))
    pts.sort()
    if pts[0][0] > 0:
        pts.insert(0, (0.0, pts[0][1]))
    auc = sum((r1x - r0x) * (p0 + p1) / 2 for (r0x, p0), (r1x, p1) in zip(pts, pts[1:]))
    return r1, best_f1, auc


def test_scorer_against_reference(rng):
    records = []
    for i in range(150):
        hp = bool(rng.uniform() < 0.9)
        retrieved = int(rng.integers(0, 50)) if rng.uniform() < 0.95 else -1
        tp = bool(hp and retrieved >= 0 and rng.uniform() < 0.8)
        overlap = float(rng.uniform(0, 1)) if retrieved >= 0 else 0.0
        te = float(abs(rng.normal(0.1, 0.2))) if retrieved >= 0 else float("nan")
        re = float(abs(rng.normal(0.5, 1.0))) if retrieved >= 0 else float("nan")
        records.append(rec(i, retrieved, overlap, te, re, tp, hp))
    report = score_place_recognition(records)
    r1, f1, auc = reference_pr_scorer(records)
    assert report.aggregates["r_at_1"] == r1
    assert abs(report.aggregates["max_f1"] - f1) < 1e-12
    assert abs(report.aggregates["auc"] - auc) < 1e-12


def reference_loc_scorer(records, te_t=0.5, re_t=5.0):
    succ = [r for r in records
            if r.retrieved_index >= 0 and not math.isnan(r.te)
            and r.te <= te_t and r.re_deg <= re_t]
    tp = [r for r in records if r.true_positive]
    return (len(succ) / len(records),
            (sum(1 for r in tp if r in succ) / len(tp)) if tp else float("nan"),
            float(np.median([r.te for r in succ])) if succ else float("nan"))


def test_loc_scorer_against_reference(rng):
    records = []
    for i in range(200):
        retrieved = int(rng.integers(0, 50)) if rng.uniform() < 0.9 else -1
        tp = bool(retrieved >= 0 and rng.uniform() < 0.7)
        te = float(abs(rng.normal(0.2, 0.3))) if retrieved >= 0 else float("nan")
        re = float(abs(rng.normal(1.0, 3.0))) if retrieved >= 0 else float("nan")
        records.append(rec(i, retrieved, rng.uniform(), te, re, tp, True))
    report = score_localization(records)
    r50, sr, te_med = reference_loc_scorer(records)
    assert report.aggregates["r_at_50"] == r50
    assert report.aggregates["sr"] == sr
    assert (math.isnan(report.aggregates["te_median"]) and math.isnan(te_med)) or \
        abs(report.aggregates["te_median"] - te_med) < 1e-12


def test_te_boundary_inclusive():
    records = [rec(0, 1, 0.9, 0.5, 5.0, True, True)]
    report = score_localization(records)
    assert report.aggregates["r_at_50"] == 1.0  # <= is inclusive on both bounds


def test_no_positives_flag():
    records = [rec(0, 1, 0.3, 1.0, 1.0, False, False)]
    report = score_place_recognition(records)
    assert "no_positives" in report.flags
    assert "auc" not in report.aggregates


def test_csv_round_trip(rng):
    records = [rec(i, int(rng.integers(-1, 5)), float(rng.uniform()),
                   float(rng.uniform()), float(rng.uniform(0, 10)),
                   bool(rng.uniform() < 0.5), bool(rng.uniform() < 0.7))
               for i in range(30)]
    text = records_to_csv(records)
    back = records_from_csv(text)
    assert len(back) == len(records)
    for a, b in zip(records, back):
        assert (a.query_index, a.retrieved_index) == (b.query_index, b.retrieved_index)
        assert a.overlap == b.overlap
        assert a.te == b.te
        assert a.true_positive == b.true_positive
    with pytest.raises(ConfigError):
        records_from_csv("bad,header\n1,2\n")


def _setup_small_eval(noise=False, n_queries=15):
    sim = SimConfig(seed=31, area=(90.0, 90.0), tree_density=350.0,
                    viewpoint_rp_max=6.0 if noise else 0.0,
                    noise_center=0.04 if noise else 0.0,
                    noise_dbh=0.01 if noise else 0.0,
                    noise_base=0.08 if noise else 0.0,
                    dropout_extra=0.15 if noise else 0.0,
                    lean_max=3.0)
    world = generate_world(sim)
    traj = make_lawnmower_trajectory(sim)
    pa, _ = simulate_session(world, traj, sim, session_seed=1)
    pb, _ = simulate_session(world, traj, sim, session_seed=2)
    acfg = AssemblyConfig()
    db_scenes = assemble_session_scenes(pa, acfg)
    q_scenes = assemble_session_scenes(pb, acfg)[:n_queries]
    db = SceneDatabase(PipelineConfig())
    for s in db_scenes:
        db.add_scene(s)
    return db, q_scenes, {p.index: p.pose for p in pb}, {p.index: p.pose for p in pa}


def test_self_retrieval_perfect_metrics():
    db, queries, q_truth, db_truth = _setup_small_eval(noise=False)
    pr = run_place_recognition(db, queries, q_truth, db_truth, EvalConfig(), seed=0)
    assert pr.aggregates["r_at_1"] == 1.0
    assert pr.aggregates["max_f1"] == 1.0
    assert abs(pr.aggregates["auc"] - 1.0) < 1e-9
    loc = run_localization_eval(db, queries, q_truth, db_truth, EvalConfig(), seed=0)
    assert loc.aggregates["r_at_50"] == 1.0
    assert loc.aggregates["sr"] == 1.0
    assert loc.aggregates["te_median"] < 1e-6
    assert loc.aggregates["re_median"] < math.degrees(1e-8) + 1e-6


def test_thread_count_independence():
    db, queries, q_truth, db_truth = _setup_small_eval(noise=True)
    r1 = run_queries(db, queries, q_truth, db_truth, EvalConfig(), seed=7, threads=1)
    r4 = run_queries(db, queries, q_truth, db_truth, EvalConfig(), seed=7, threads=4)
    assert records_to_csv(r1) == records_to_csv(r4)


def test_intra_exclusion_window():
    db, queries, q_truth, db_truth = _setup_small_eval(noise=False, n_queries=10)
    cfg = EvalConfig(exclusion_window=10_000)  # excludes everything
    records = run_queries(db, queries, db_truth, db_truth, cfg, seed=0, intra=True)
    assert all(r.retrieved_index == -1 or r.retrieved_index <= r.query_index - cfg.exclusion_window
               for r in records)
    assert all(not r.has_positive for r in records)


def test_missing_truth_rejected():
    db, queries, q_truth, db_truth = _setup_small_eval(noise=False, n_queries=3)
    with pytest.raises(ConfigError):
        run_queries(db, queries, {}, db_truth, EvalConfig(), seed=0)


def test_timings_csv_shape():
    records = [rec(0, 1, 0.5, 0.1, 0.2, True, True)]
    text = timings_to_csv(records)
    header = text.splitlines()[0].split(",")
    assert header == ["query_index", "describe_ms", "coarse_ms", "fine_ms", "verify_ms"]
