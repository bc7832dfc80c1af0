"""Command-line front end: simulation, indexing, evaluation, multi-session demo."""

from __future__ import annotations

import argparse
import os
import statistics
import sys
import time
import traceback

import numpy as np
import scipy

from . import __version__, dataio
from .config import ToolConfig, dump_config, load_config
from .evaluation import (ConfigError, aggregates_to_text, pr_curve_to_csv, records_to_csv,
                         run_queries, score_localization, score_place_recognition,
                         timings_to_csv)
from .global_db import FormatError as DbFormatError
from .global_db import GlobalTreeDb
from .model import SceneInventory
from .multisession import assemble_session_scenes, run_multisession
from .pipeline import SceneDatabase, build_scene_record
from .pose_graph import write_graph_text
from .scene_assembly import WindowOutOfRange
from .simulator import (apply_odometry_drift, generate_world, make_lawnmower_trajectory,
                        simulate_session)

USAGE_ERROR, DATA_ERROR, INTERNAL_ERROR = 1, 2, 3


def _load_cfg(args) -> ToolConfig:
    cfg = ToolConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    return cfg


def _write_manifest(path: str, args, cfg: ToolConfig, extra: dict | None = None):
    """Reproducibility sidecar: command line, seeds, versions, full config."""
    lines = [
        f"command = {' '.join(sys.argv)}",
        f"stemloc_version = {__version__}",
        f"numpy_version = {np.__version__}",
        f"scipy_version = {scipy.__version__}",
        f"python_version = {sys.version.split()[0]}",
        f"seed = {getattr(args, 'seed', 0)}",
    ]
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n# config\n" + dump_config(cfg))


def _session_seed(seed: int, session: int) -> int:
    return int(np.random.default_rng([seed, session]).integers(2**31))


def cmd_simulate(args) -> int:
    cfg = _load_cfg(args)
    sim = cfg.sim
    if args.seed is not None:
        import dataclasses
        sim = dataclasses.replace(sim, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    world = generate_world(sim)
    dataio.write_world(os.path.join(args.out, "world.txt"), world)
    trajectory = make_lawnmower_trajectory(sim)
    for s in range(args.sessions):
        payloads, assoc = simulate_session(world, trajectory, sim,
                                           session_seed=_session_seed(sim.seed, s))
        true_poses = {p.index: p.pose for p in payloads}
        if args.drift > 0 and s >= 1:
            payloads = apply_odometry_drift(payloads, bias_per_step=args.drift,
                                            seed=_session_seed(sim.seed, 1000 + s))
        dataio.write_session(os.path.join(args.out, f"session_{s:02d}"),
                             payloads, assoc, true_poses)
    _write_manifest(os.path.join(args.out, "manifest.txt"), args, cfg,
                    {"n_world_trees": len(world), "n_payloads": len(trajectory),
                     "n_sessions": args.sessions, "drift": args.drift})
    print(f"world: {len(world)} trees; {args.sessions} session(s) x "
          f"{len(trajectory)} payloads -> {args.out}")
    return 0


def cmd_assemble(args) -> int:
    cfg = _load_cfg(args)
    session, _ = dataio.read_session(args.session)
    scenes = assemble_session_scenes(session.payloads, cfg.assembly)
    dataio.write_scenes(args.out, scenes)
    _write_manifest(args.out + ".manifest.txt", args, cfg,
                    {"session": args.session, "n_scenes": len(scenes)})
    print(f"{len(scenes)} scenes -> {args.out}")
    return 0


def cmd_index(args) -> int:
    cfg = _load_cfg(args)
    scenes = dataio.read_scenes(args.scenes)
    t0 = time.perf_counter()
    records = [build_scene_record(s, cfg.pipeline) for s in scenes]
    build_ms = (time.perf_counter() - t0) * 1e3
    n_tri = [len(r.triangles) for r in records]
    n_key = [len(r.triangles.key_set) for r in records]
    lines = [
        f"n_scenes = {len(records)}",
        f"trees_mean = %.2f" % (statistics.mean(r.scene.n_trees for r in records) if records else 0),
        f"triangles_mean = %.2f" % (statistics.mean(n_tri) if n_tri else 0),
        f"keys_mean = %.2f" % (statistics.mean(n_key) if n_key else 0),
        f"build_ms_total = %.3f" % build_ms,
        f"build_ms_per_scene = %.3f" % (build_ms / max(len(records), 1)),
    ]
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    print(text, end="")
    return 0


def _prepare_eval(args, cfg: ToolConfig):
    db_session, _ = dataio.read_session(args.db_session)
    db_scenes = assemble_session_scenes(db_session.payloads, cfg.assembly)
    if args.query_session and args.query_session != args.db_session:
        q_session, _ = dataio.read_session(args.query_session)
        q_scenes = assemble_session_scenes(q_session.payloads, cfg.assembly)
    else:
        q_session, q_scenes = db_session, db_scenes
    db = SceneDatabase(cfg.pipeline)
    for s in db_scenes:
        db.add_scene(s)
    q_truth = {s.index: q_session.true_poses[s.index] for s in q_scenes}
    db_truth = {s.index: db_session.true_poses[s.index] for s in db_scenes}
    return db, q_scenes, q_truth, db_truth


def _run_and_write(args, score_fn_name: str) -> int:
    cfg = _load_cfg(args)
    db, queries, q_truth, db_truth = _prepare_eval(args, cfg)
    records = run_queries(db, queries, q_truth, db_truth, cfg.eval,
                          seed=args.seed, threads=args.threads, intra=args.intra)
    prefix = args.out
    with open(prefix + "_results.csv", "w") as f:
        f.write(records_to_csv(records))
    with open(prefix + "_timings.csv", "w") as f:
        f.write(timings_to_csv(records))
    extra = {"n_queries": len(records), "n_db_scenes": len(db), "threads": args.threads,
             "intra": args.intra}
    if score_fn_name == "records":
        _write_manifest(prefix + "_manifest.txt", args, cfg, extra)
        print(f"{len(records)} query records -> {prefix}_results.csv")
        return 0
    if score_fn_name in ("pr", "both"):
        report = score_place_recognition(records, cfg.eval)
        with open(prefix + "_pr_aggregates.txt", "w") as f:
            f.write(aggregates_to_text(report))
        with open(prefix + "_pr_curve.csv", "w") as f:
            f.write(pr_curve_to_csv(report))
        print(aggregates_to_text(report), end="")
    if score_fn_name in ("loc", "both"):
        report = score_localization(records, cfg.eval)
        with open(prefix + "_loc_aggregates.txt", "w") as f:
            f.write(aggregates_to_text(report))
        print(aggregates_to_text(report), end="")
    _write_manifest(prefix + "_manifest.txt", args, cfg, extra)
    return 0


def cmd_query(args) -> int:
    return _run_and_write(args, "records")


def cmd_eval_pr(args) -> int:
    return _run_and_write(args, "pr")


def cmd_eval_loc(args) -> int:
    return _run_and_write(args, "loc")


def cmd_multisession(args) -> int:
    cfg = _load_cfg(args)
    sessions = []
    for d in args.sessions:
        session, _ = dataio.read_session(d)
        sessions.append(session)
    report, poses, merged_db, graph = run_multisession(
        sessions, cfg.assembly, cfg.pipeline, cfg.eval, seed=args.seed)
    prefix = args.out
    lines = [
        f"n_nodes = {report.n_nodes}",
        f"n_constraints = {report.n_constraints}",
        f"n_false_constraints = {report.n_false_constraints}",
        f"ate_pre = %.6f" % report.ate_pre,
        f"ate_post = %.6f" % report.ate_post,
        f"are_pre = %.6f" % report.are_pre,
        f"are_post = %.6f" % report.are_post,
        f"chi2 = %.6g" % report.chi2,
        f"iterations = {report.iterations}",
    ]
    for w in report.warnings:
        lines.append(f"warning = {w}")
    text = "\n".join(lines) + "\n"
    with open(prefix + "_report.txt", "w") as f:
        f.write(text)
    with open(prefix + "_graph.txt", "w") as f:
        f.write(write_graph_text(graph))
    dataio.write_trajectory(prefix + "_trajectory.txt", poses)
    merged_db.save_file(prefix + "_db.tldb")
    _write_manifest(prefix + "_manifest.txt", args, cfg,
                    {"sessions": " ".join(args.sessions)})
    print(text, end="")
    return 0


def cmd_db(args) -> int:
    db = GlobalTreeDb.load_file(args.file)
    if args.action == "inspect":
        size = os.path.getsize(args.file)
        per_tree = (size - 32) / max(len(db), 1)
        print(f"trees = {len(db)}")
        print(f"merge_radius = {db.merge_radius}")
        print(f"next_id = {db.next_id}")
        print(f"file_bytes = {size}")
        print(f"bytes_per_tree = %.1f" % per_tree)
    else:
        text = db.export_text()
        if args.out:
            with open(args.out, "w") as f:
                f.write(text)
            print(f"{len(db)} trees -> {args.out}")
        else:
            print(text, end="")
    return 0


def cmd_bench(args) -> int:
    import dataclasses

    cfg = _load_cfg(args)
    sim = dataclasses.replace(cfg.sim, seed=args.seed)
    world = generate_world(sim)
    trajectory = make_lawnmower_trajectory(sim)
    payloads, _ = simulate_session(world, trajectory, sim, session_seed=args.seed)
    scenes = assemble_session_scenes(payloads, cfg.assembly)
    # replicate spatial scenes with fresh indices until the target size
    db = SceneDatabase(cfg.pipeline)
    idx = 0
    while len(db) < args.db_size:
        for s in scenes:
            if len(db) >= args.db_size:
                break
            db.add_scene(SceneInventory(index=idx, pose=s.pose, trees=s.trees))
            idx += 1
    rng = np.random.default_rng(args.seed)
    q_idx = rng.choice(len(scenes), size=min(args.queries, len(scenes)), replace=False)
    totals, stages = [], {"describe": [], "coarse": [], "fine": [], "verify": []}
    for qi in q_idx:
        _, timings, _ = db.query_scene(scenes[qi], seed=args.seed)
        totals.append(timings.total_ms)
        stages["describe"].append(timings.describe_ms)
        stages["coarse"].append(timings.coarse_ms)
        stages["fine"].append(timings.fine_ms)
        stages["verify"].append(timings.verify_ms)
    print(f"db_scenes = {len(db)}")
    print(f"queries = {len(totals)}")
    for name, vals in stages.items():
        print(f"{name}_ms_median = %.3f" % statistics.median(vals))
    print(f"total_ms_median = %.3f" % statistics.median(totals))
    print(f"total_ms_mean = %.3f" % statistics.mean(totals))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stemloc",
                                     description="Stem-centric forest localization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=0):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("simulate", help="generate a world and observation sessions")
    common(p)
    p.set_defaults(seed=None)
    p.add_argument("--out", required=True)
    p.add_argument("--sessions", type=int, default=1)
    p.add_argument("--drift", type=float, default=0.0,
                   help="odometry bias m/step applied to sessions >= 1")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("assemble", help="window payloads into scenes")
    common(p)
    p.add_argument("--session", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("index", help="build descriptors for a scenes file")
    common(p)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_index)

    for name, fn, help_text in (
            ("query", cmd_query, "per-query retrieval records"),
            ("eval-pr", cmd_eval_pr, "place-recognition metrics"),
            ("eval-loc", cmd_eval_loc, "localization metrics")):
        p = sub.add_parser(name, help=help_text)
        common(p)
        p.add_argument("--db-session", required=True)
        p.add_argument("--query-session")
        p.add_argument("--intra", action="store_true",
                       help="exclude the most recent scenes (same-session protocol)")
        p.add_argument("--out", required=True, help="output path prefix")
        p.set_defaults(func=fn)

    p = sub.add_parser("multisession", help="align sessions and merge the tree database")
    common(p)
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("sessions", nargs="+")
    p.set_defaults(func=cmd_multisession)

    p = sub.add_parser("db", help="inspect or export a global tree database")
    p.add_argument("action", choices=["inspect", "export"])
    p.add_argument("file")
    p.add_argument("--out")
    p.set_defaults(func=cmd_db)

    p = sub.add_parser("bench", help="latency benchmark against a synthetic database")
    common(p)
    p.add_argument("--db-size", type=int, default=1000)
    p.add_argument("--queries", type=int, default=50)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else USAGE_ERROR
    try:
        return args.func(args)
    except (ConfigError, DbFormatError, dataio.FormatError, WindowOutOfRange,
            FileNotFoundError, NotADirectoryError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except Exception:
        traceback.print_exc()
        return INTERNAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
