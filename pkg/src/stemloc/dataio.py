"""Text-file formats: worlds, payload sessions, assembled scenes, associations.

Tree lines follow the global-database text convention
(id x y z axis_x axis_y axis_z dbh obs_count) with a trailing candidate flag
in session/scene files. Poses serialize as translation + quaternion
(tx ty tz qx qy qz qw). Floats use %.17g so values round-trip exactly.
"""

from __future__ import annotations

import csv
import os

from .model import Payload, Pose, SceneInventory, TreeObservation
from .multisession import SessionData
from .simulator import Association, WorldTree


class FormatError(Exception):
    """Malformed data file."""


F = "%.17g"


def _pose_fields(pose: Pose) -> str:
    qx, qy, qz, qw = pose.quat()
    t = pose.translation
    return " ".join(F % v for v in (t[0], t[1], t[2], qx, qy, qz, qw))


def _parse_pose(parts: list[str]) -> Pose:
    vals = [float(v) for v in parts]
    return Pose.from_quat(vals[:3], *vals[3:7])


def format_tree(t: TreeObservation) -> str:
    return ("%d " % t.id) + " ".join(F % v for v in (
        t.position[0], t.position[1], t.position[2],
        t.axis[0], t.axis[1], t.axis[2], t.dbh)) + " %d %d" % (t.obs_count, int(t.is_candidate))


def parse_tree(line: str) -> TreeObservation:
    parts = line.split()
    if len(parts) not in (9, 10):
        raise FormatError(f"tree line needs 9 or 10 fields, got {len(parts)}")
    return TreeObservation(
        id=int(parts[0]),
        position=[float(parts[1]), float(parts[2]), float(parts[3])],
        axis=[float(parts[4]), float(parts[5]), float(parts[6])],
        dbh=float(parts[7]),
        obs_count=int(parts[8]),
        is_candidate=bool(int(parts[9])) if len(parts) == 10 else False,
    )


def write_world(path, world: list[WorldTree]):
    with open(path, "w") as f:
        for t in world:
            f.write(("%d " % t.id) + " ".join(F % v for v in (
                t.position[0], t.position[1], t.position[2],
                t.axis[0], t.axis[1], t.axis[2], t.dbh)) + " 1\n")


def read_world(path) -> list[WorldTree]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            p = line.split()
            if len(p) < 8:
                raise FormatError(f"world line needs 8+ fields: {line!r}")
            out.append(WorldTree(
                id=int(p[0]),
                position=[float(p[1]), float(p[2]), float(p[3])],
                axis=[float(p[4]), float(p[5]), float(p[6])],
                dbh=float(p[7]),
            ))
    return out


def write_session(directory, payloads: list[Payload], association: Association,
                  true_poses: dict[int, Pose]):
    """Session directory: payloads.txt, truth_poses.txt, association.csv."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "payloads.txt"), "w") as f:
        for p in payloads:
            f.write(f"P {p.index} {_pose_fields(p.pose)}\n")
            for t in p.trees:
                f.write(format_tree(t) + "\n")
    with open(os.path.join(directory, "truth_poses.txt"), "w") as f:
        for idx in sorted(true_poses):
            f.write(f"T {idx} {_pose_fields(true_poses[idx])}\n")
    with open(os.path.join(directory, "association.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["payload_index", "local_tree_id", "world_tree_id"])
        for rec in association.records:
            w.writerow(rec)


def read_session(directory, name: str | None = None) -> tuple[SessionData, Association]:
    payloads: list[Payload] = []
    index = None
    pose = None
    trees: list[TreeObservation] = []

    def flush():
        if index is not None:
            payloads.append(Payload(index=index, pose=pose, trees=tuple(trees)))

    path = os.path.join(directory, "payloads.txt")
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("P "):
                flush()
                parts = line.split()
                if len(parts) != 9:
                    raise FormatError(f"{path}:{lineno}: payload header needs 9 fields")
                index = int(parts[1])
                pose = _parse_pose(parts[2:9])
                trees = []
            else:
                if index is None:
                    raise FormatError(f"{path}:{lineno}: tree line before payload header")
                trees.append(parse_tree(line))
    flush()

    true_poses: dict[int, Pose] = {}
    tpath = os.path.join(directory, "truth_poses.txt")
    with open(tpath) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] != "T" or len(parts) != 9:
                raise FormatError(f"{tpath}:{lineno}: truth line needs 'T idx pose'")
            true_poses[int(parts[1])] = _parse_pose(parts[2:9])

    records = []
    apath = os.path.join(directory, "association.csv")
    if os.path.exists(apath):
        with open(apath, newline="") as f:
            rows = list(csv.reader(f))
        for row in rows[1:]:
            records.append((int(row[0]), int(row[1]), int(row[2])))

    session = SessionData(
        name=name or os.path.basename(os.path.normpath(directory)),
        payloads=payloads,
        true_poses=true_poses,
    )
    return session, Association(tuple(records))


def write_scenes(path, scenes: list[SceneInventory]):
    with open(path, "w") as f:
        for s in scenes:
            f.write(f"S {s.index} {_pose_fields(s.pose)}\n")
            for t in s.trees:
                f.write(format_tree(t) + "\n")


def read_scenes(path) -> list[SceneInventory]:
    scenes: list[SceneInventory] = []
    index = None
    pose = None
    trees: list[TreeObservation] = []

    def flush():
        if index is not None:
            scenes.append(SceneInventory(index=index, pose=pose, trees=tuple(trees)))

    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("S "):
                flush()
                parts = line.split()
                if len(parts) != 9:
                    raise FormatError(f"{path}:{lineno}: scene header needs 9 fields")
                index = int(parts[1])
                pose = _parse_pose(parts[2:9])
                trees = []
            else:
                if index is None:
                    raise FormatError(f"{path}:{lineno}: tree line before scene header")
                trees.append(parse_tree(line))
    flush()
    return scenes


def write_trajectory(path, poses: dict[int, Pose]):
    """One 'VERTEX_SE3:QUAT id tx ty tz qx qy qz qw' line per node."""
    with open(path, "w") as f:
        for nid in sorted(poses):
            f.write(f"VERTEX_SE3:QUAT {nid} {_pose_fields(poses[nid])}\n")
