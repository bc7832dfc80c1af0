"""Evaluation drivers and metric scorers for place recognition and localization.

Per-query results are flattened into records that a scorer can consume from
the CSV alone, so every aggregate is independently recomputable from the
audit trail. Stage timings are kept out of the result CSV (they go to a
sibling file) so result files are byte-identical across repeated runs and
thread counts.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import Pose, SceneInventory, log_so3
from .pipeline import SceneDatabase
from .tdh import chi_square


class ConfigError(Exception):
    """Evaluation inputs are malformed or inconsistent."""


@dataclass(frozen=True)
class EvalConfig:
    dist_thresh: float = 10.0  # meters; retrieval counts as correct within this
    exclusion_window: int = 50  # most recent scenes excluded in intra-session mode
    te_thresh: float = 0.5  # meters (inclusive)
    re_thresh_deg: float = 5.0  # degrees (inclusive)
    n_thresholds: int = 200


@dataclass(frozen=True)
class QueryRecord:
    """One query's outcome; the unit of the CSV audit trail."""

    query_index: int
    retrieved_index: int  # -1 when nothing survived verification
    tdh_distance: float  # chi-square to the retrieved scene (nan when none)
    overlap: float  # decision score (0 when none)
    te: float  # meters vs ground truth (nan when none)
    re_deg: float  # degrees vs ground truth (nan when none)
    true_positive: bool
    has_positive: bool
    describe_ms: float = 0.0
    coarse_ms: float = 0.0
    fine_ms: float = 0.0
    verify_ms: float = 0.0

    @property
    def total_ms(self) -> float:
        return self.describe_ms + self.coarse_ms + self.fine_ms + self.verify_ms


RESULT_COLUMNS = ["query_index", "retrieved_index", "tdh_distance", "overlap",
                  "te", "re_deg", "true_positive", "has_positive"]
TIMING_COLUMNS = ["query_index", "describe_ms", "coarse_ms", "fine_ms", "verify_ms"]


def _fmt(x: float) -> str:
    return repr(float(x))  # shortest exact representation, deterministic


def records_to_csv(records: list[QueryRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in records:
        w.writerow([r.query_index, r.retrieved_index, _fmt(r.tdh_distance),
                    _fmt(r.overlap), _fmt(r.te), _fmt(r.re_deg),
                    int(r.true_positive), int(r.has_positive)])
    return buf.getvalue()


def timings_to_csv(records: list[QueryRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIMING_COLUMNS)
    for r in records:
        w.writerow([r.query_index, _fmt(r.describe_ms), _fmt(r.coarse_ms),
                    _fmt(r.fine_ms), _fmt(r.verify_ms)])
    return buf.getvalue()


def records_from_csv(text: str) -> list[QueryRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != RESULT_COLUMNS:
        raise ConfigError("unexpected result CSV header")
    out = []
    for row in rows[1:]:
        out.append(QueryRecord(
            query_index=int(row[0]),
            retrieved_index=int(row[1]),
            tdh_distance=float(row[2]),
            overlap=float(row[3]),
            te=float(row[4]),
            re_deg=float(row[5]),
            true_positive=bool(int(row[6])),
            has_positive=bool(int(row[7])),
        ))
    return out


@dataclass
class EvalReport:
    records: list[QueryRecord]
    aggregates: dict[str, float]
    pr_curve: list[tuple[float, float, float]] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)


def pose_error(est: Pose, truth: Pose) -> tuple[float, float]:
    """Translation error (m) and rotation error (deg) between two poses."""
    te = float(np.linalg.norm(est.translation - truth.translation))
    re = math.degrees(float(np.linalg.norm(log_so3(est.rotation.T @ truth.rotation))))
    return te, re


def run_queries(db: SceneDatabase, queries: list[SceneInventory],
                query_truth: dict[int, Pose], db_truth: dict[int, Pose],
                cfg: EvalConfig = EvalConfig(), seed: int = 0, threads: int = 1,
                intra: bool = False) -> list[QueryRecord]:
    """Full pipeline per query against the database, with ground-truth scoring.

    In intra mode the exclusion window removes the query itself and every
    database scene observed within the last exclusion_window indices before it
    (the database is treated as the query session's own history).
    """
    for q in queries:
        if q.index not in query_truth:
            raise ConfigError(f"missing ground-truth pose for query {q.index}")
    db_indices = sorted(db.records.keys())
    for idx in db_indices:
        if idx not in db_truth:
            raise ConfigError(f"missing ground-truth pose for database scene {idx}")
    db_xy = {idx: db_truth[idx].translation[:2] for idx in db_indices}

    def one(q: SceneInventory) -> QueryRecord:
        if intra:
            exclusions = {idx for idx in db_indices if idx > q.index - cfg.exclusion_window}
        else:
            exclusions = set()
        q_seed = int(np.random.default_rng([seed, q.index]).integers(2**31))
        results, timings, record = db.query_scene(q, seed=q_seed, exclusions=exclusions)

        q_xy = query_truth[q.index].translation[:2]
        has_positive = any(
            np.linalg.norm(q_xy - db_xy[idx]) <= cfg.dist_thresh
            for idx in db_indices if idx not in exclusions)

        if results:
            best = results[0]
            ridx = best.candidate_index
            truth_rel = db_truth[ridx].inverse().compose(query_truth[q.index])
            te, re = pose_error(best.transform_6dof, truth_rel)
            tp = bool(np.linalg.norm(q_xy - db_xy[ridx]) <= cfg.dist_thresh)
            dist = chi_square(record.tdh, db.records[ridx].tdh)
            return QueryRecord(q.index, ridx, dist, best.overlap, te, re, tp,
                               has_positive, timings.describe_ms, timings.coarse_ms,
                               timings.fine_ms, timings.verify_ms)
        return QueryRecord(q.index, -1, float("nan"), 0.0, float("nan"), float("nan"),
                           False, has_positive, timings.describe_ms, timings.coarse_ms,
                           timings.fine_ms, timings.verify_ms)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(one, queries))
    else:
        records = [one(q) for q in queries]
    records.sort(key=lambda r: r.query_index)
    return records


def score_place_recognition(records: list[QueryRecord],
                            cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """R@1, max F1 over a threshold sweep, and PR-curve AUC."""
    n_pos = sum(r.has_positive for r in records)
    if n_pos == 0:
        return EvalReport(records, {"n_queries": len(records), "n_positives": 0},
                          flags=["no_positives"])
    n_tp_top1 = sum(r.true_positive for r in records)
    r_at_1 = n_tp_top1 / n_pos

    thresholds = np.linspace(0.0, 1.0, cfg.n_thresholds)
    curve = []
    max_f1 = 0.0
    for tau in thresholds:
        tp = sum(1 for r in records if r.retrieved_index >= 0 and r.overlap >= tau and r.true_positive)
        fp = sum(1 for r in records if r.retrieved_index >= 0 and r.overlap >= tau and not r.true_positive)
        precision = tp / (tp + fp) if (tp + fp) > 0 else 1.0
        recall = tp / n_pos
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
        max_f1 = max(max_f1, f1)
        curve.append((float(tau), precision, recall))

    pts = sorted((rec, prec) for _, prec, rec in curve)
    if pts and pts[0][0] > 0.0:
        pts.insert(0, (0.0, pts[0][1]))
    auc = 0.0
    for (r0, p0), (r1, p1) in zip(pts, pts[1:]):
        auc += (r1 - r0) * (p0 + p1) / 2.0
    aggregates = {
        "n_queries": len(records),
        "n_positives": n_pos,
        "r_at_1": r_at_1,
        "max_f1": max_f1,
        "auc": auc,
    }
    return EvalReport(records, aggregates, pr_curve=curve)


def score_localization(records: list[QueryRecord],
                       cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """R@50-style success rates and error aggregates over successful cases."""
    def success(r: QueryRecord) -> bool:
        return (r.retrieved_index >= 0 and not math.isnan(r.te)
                and r.te <= cfg.te_thresh and r.re_deg <= cfg.re_thresh_deg)

    succ = [r for r in records if success(r)]
    tp = [r for r in records if r.true_positive]
    tp_succ = [r for r in tp if success(r)]
    tes = np.array([r.te for r in succ])
    res = np.array([r.re_deg for r in succ])
    aggregates = {
        "n_queries": len(records),
        "n_success": len(succ),
        "r_at_50": len(succ) / len(records) if records else float("nan"),
        "sr": len(tp_succ) / len(tp) if tp else float("nan"),
        "te_mean": float(tes.mean()) if len(tes) else float("nan"),
        "te_median": float(np.median(tes)) if len(tes) else float("nan"),
        "re_mean": float(res.mean()) if len(res) else float("nan"),
        "re_median": float(np.median(res)) if len(res) else float("nan"),
    }
    flags = [] if tp else ["no_true_positives"]
    return EvalReport(records, aggregates, flags=flags)


def run_place_recognition(db: SceneDatabase, queries: list[SceneInventory],
                          query_truth: dict[int, Pose], db_truth: dict[int, Pose],
                          cfg: EvalConfig = EvalConfig(), seed: int = 0,
                          threads: int = 1, intra: bool = False) -> EvalReport:
    records = run_queries(db, queries, query_truth, db_truth, cfg, seed, threads, intra)
    return score_place_recognition(records, cfg)


def run_localization_eval(db: SceneDatabase, queries: list[SceneInventory],
                          query_truth: dict[int, Pose], db_truth: dict[int, Pose],
                          cfg: EvalConfig = EvalConfig(), seed: int = 0,
                          threads: int = 1, intra: bool = False) -> EvalReport:
    records = run_queries(db, queries, query_truth, db_truth, cfg, seed, threads, intra)
    return score_localization(records, cfg)


def pr_curve_to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "precision", "recall"])
    for tau, p, r in report.pr_curve:
        w.writerow([_fmt(tau), _fmt(p), _fmt(r)])
    return buf.getvalue()


def aggregates_to_text(report: EvalReport) -> str:
    lines = [f"{k} = {_fmt(v) if isinstance(v, float) else v}"
             for k, v in sorted(report.aggregates.items())]
    for flag in report.flags:
        lines.append(f"flag = {flag}")
    return "\n".join(lines) + "\n"
