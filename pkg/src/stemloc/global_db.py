"""Single global tree database across sessions, with compact serialization.

Stores one record per unique world tree; repeated observations of the same
stem merge by observation-weighted averaging, so storage scales with the
number of trees rather than trajectory length. Descriptors are never stored;
they are generated on demand from a local query window.

Binary layout (little-endian): 32-byte header (magic "TLDB", version u16,
reserved u16, tree count u64, merge radius f64, next id u64) followed by one
fixed 64-byte record per tree (id u64, axis 3xf32, position 3xf64, dbh f32,
obs_count u32, flags u32, 8 reserved bytes). Axis and DBH are stored and kept
in float32 so save/load round-trips are exact.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .model import Pose, SceneInventory, TreeObservation, canonicalize_axis

MAGIC = b"TLDB"
VERSION = 1
_HEADER = struct.Struct("<4sHHQdQ")
_RECORD = struct.Struct("<Q3f3dfII8x")
DBH_MERGE_GATE = 0.2
_FLAG_CANDIDATE = 1

_GRID_CELL = 4.0  # meters; spatial hash cell for exact radius/box queries


class FormatError(Exception):
    """Serialized database is malformed (bad magic/version or truncated)."""


@dataclass
class _DbTree:
    id: int
    axis: np.ndarray  # float32, canonical sign
    position: np.ndarray  # float64 world frame
    dbh: float  # float32 value
    obs_count: int
    flags: int

    @property
    def is_candidate(self) -> bool:
        return bool(self.flags & _FLAG_CANDIDATE)

    def to_observation(self) -> TreeObservation:
        return TreeObservation(
            id=self.id,
            axis=self.axis.astype(float),
            position=self.position.copy(),
            dbh=float(self.dbh),
            obs_count=self.obs_count,
            is_candidate=self.is_candidate,
        )


def _f32(x) -> float:
    return float(np.float32(x))


class GlobalTreeDb:
    """World-frame tree collection with merge-on-insert and exact spatial queries."""

    def __init__(self, merge_radius: float = 0.5):
        if merge_radius <= 0:
            raise ValueError("merge_radius must be positive")
        self.merge_radius = float(merge_radius)
        self.next_id = 0
        self._trees: dict[int, _DbTree] = {}
        self._grid: dict[tuple[int, int], list[int]] = {}

    def __len__(self) -> int:
        return len(self._trees)

    def trees(self) -> list[TreeObservation]:
        return [self._trees[i].to_observation() for i in sorted(self._trees)]

    def _cell(self, x: float, y: float) -> tuple[int, int]:
        return (int(math.floor(x / _GRID_CELL)), int(math.floor(y / _GRID_CELL)))

    def _grid_add(self, tree_id: int):
        t = self._trees[tree_id]
        self._grid.setdefault(self._cell(t.position[0], t.position[1]), []).append(tree_id)

    def _grid_remove(self, tree_id: int):
        t = self._trees[tree_id]
        cell = self._cell(t.position[0], t.position[1])
        self._grid[cell].remove(tree_id)
        if not self._grid[cell]:
            del self._grid[cell]

    def radius_query(self, xy, radius: float) -> list[int]:
        """Ids of trees with 2D distance < radius from xy, ascending by distance then id."""
        x, y = float(xy[0]), float(xy[1])
        cx0, cy0 = self._cell(x - radius, y - radius)
        cx1, cy1 = self._cell(x + radius, y + radius)
        hits: list[tuple[float, int]] = []
        r2 = radius * radius
        for cx in range(cx0, cx1 + 1):
            for cy in range(cy0, cy1 + 1):
                for tid in self._grid.get((cx, cy), ()):
                    p = self._trees[tid].position
                    d2 = (p[0] - x) ** 2 + (p[1] - y) ** 2
                    if d2 < r2:
                        hits.append((d2, tid))
        hits.sort()
        return [tid for _, tid in hits]

    def box_query(self, center, half_extent: float) -> list[int]:
        """Ids of trees inside the axis-aligned square, ascending by id."""
        x, y = float(center[0]), float(center[1])
        cx0, cy0 = self._cell(x - half_extent, y - half_extent)
        cx1, cy1 = self._cell(x + half_extent, y + half_extent)
        out = []
        for cx in range(cx0, cx1 + 1):
            for cy in range(cy0, cy1 + 1):
                for tid in self._grid.get((cx, cy), ()):
                    p = self._trees[tid].position
                    if abs(p[0] - x) <= half_extent and abs(p[1] - y) <= half_extent:
                        out.append(tid)
        out.sort()
        return out

    def _insert_observation(self, obs: TreeObservation, world_pose: Pose) -> bool:
        """Insert one tree after transforming it to world frame. True if merged."""
        pos = world_pose.apply(obs.position)
        axis = world_pose.apply_axis(obs.axis)
        dbh = _f32(obs.dbh)

        target = None
        for tid in self.radius_query(pos[:2], self.merge_radius):
            t = self._trees[tid]
            if abs(t.dbh - dbh) < DBH_MERGE_GATE and t.is_candidate == obs.is_candidate:
                target = t
                break
        if target is None:
            tree = _DbTree(
                id=self.next_id,
                axis=np.asarray(axis, dtype=np.float32),
                position=np.asarray(pos, dtype=np.float64),
                dbh=dbh,
                obs_count=obs.obs_count,
                flags=_FLAG_CANDIDATE if obs.is_candidate else 0,
            )
            self._trees[tree.id] = tree
            self._grid_add(tree.id)
            self.next_id += 1
            return False

        w_old = max(target.obs_count, 1)
        w_new = max(obs.obs_count, 1)
        total = w_old + w_new
        self._grid_remove(target.id)
        target.position = (target.position * w_old + pos * w_new) / total
        merged_axis = canonicalize_axis(target.axis.astype(float) * w_old + np.asarray(axis) * w_new)
        target.axis = merged_axis.astype(np.float32)
        target.dbh = _f32((float(target.dbh) * w_old + float(dbh) * w_new) / total)
        target.obs_count += obs.obs_count
        self._grid_add(target.id)
        self._cascade_merge(target.id)
        return True

    def _cascade_merge(self, tid: int):
        # a weighted-mean update can drag a tree into another's merge gate;
        # absorb such neighbors until the no-close-pairs invariant holds again
        while True:
            t = self._trees[tid]
            other = None
            for oid in self.radius_query(t.position[:2], self.merge_radius):
                o = self._trees[oid]
                if (oid != tid and o.is_candidate == t.is_candidate
                        and abs(float(o.dbh) - float(t.dbh)) < DBH_MERGE_GATE):
                    other = o
                    break
            if other is None:
                return
            w_a = max(t.obs_count, 1)
            w_b = max(other.obs_count, 1)
            total = w_a + w_b
            self._grid_remove(tid)
            self._grid_remove(other.id)
            t.position = (t.position * w_a + other.position * w_b) / total
            t.axis = canonicalize_axis(
                t.axis.astype(float) * w_a + other.axis.astype(float) * w_b).astype(np.float32)
            t.dbh = _f32((float(t.dbh) * w_a + float(other.dbh) * w_b) / total)
            t.obs_count += other.obs_count
            del self._trees[other.id]
            self._grid_add(tid)

    def insert_scene(self, scene: SceneInventory, world_pose: Pose) -> tuple[int, int]:
        """Insert a scene's trees given its world pose; returns (inserted, merged)."""
        inserted = merged = 0
        for obs in scene.trees:
            if self._insert_observation(obs, world_pose):
                merged += 1
            else:
                inserted += 1
        return inserted, merged

    def insert_session(self, scenes: list[SceneInventory], session_pose: Pose) -> tuple[int, int]:
        """Insert all scenes of a session mapped through the session-to-world pose."""
        inserted = merged = 0
        for scene in scenes:
            i, m = self.insert_scene(scene, session_pose.compose(scene.pose))
            inserted += i
            merged += m
        return inserted, merged

    def local_scene(self, center, half_extent: float = 30.0, index: int = 0) -> SceneInventory:
        """Trees in the square window around center, re-expressed about it.

        Only x/y shift to the query center; world z is retained. The returned
        scene's pose maps local coordinates back to world.
        """
        if half_extent <= 0:
            raise ValueError("half_extent must be positive")
        shift = np.array([float(center[0]), float(center[1]), 0.0])
        hits = self.box_query(center, half_extent)
        if not hits:
            return SceneInventory(index=index, pose=Pose.from_translation(shift), trees=())
        # stored axes are canonical but float32-rounded; renormalize in one batch
        axes = np.stack([self._trees[tid].axis for tid in hits]).astype(float)
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        trees = tuple(
            TreeObservation._trusted(
                tree_id=new_id,
                axis=axes[new_id],
                position=self._trees[tid].position - shift,
                dbh=float(self._trees[tid].dbh),
                obs_count=self._trees[tid].obs_count,
                is_candidate=self._trees[tid].is_candidate,
            )
            for new_id, tid in enumerate(hits))
        return SceneInventory(index=index, pose=Pose.from_translation(shift), trees=trees)

    def save(self) -> bytes:
        out = [_HEADER.pack(MAGIC, VERSION, 0, len(self._trees), self.merge_radius, self.next_id)]
        for tid in sorted(self._trees):
            t = self._trees[tid]
            out.append(_RECORD.pack(
                t.id,
                float(t.axis[0]), float(t.axis[1]), float(t.axis[2]),
                float(t.position[0]), float(t.position[1]), float(t.position[2]),
                float(t.dbh), t.obs_count, t.flags,
            ))
        return b"".join(out)

    @staticmethod
    def load(data: bytes) -> "GlobalTreeDb":
        if len(data) < _HEADER.size:
            raise FormatError("truncated header")
        magic, version, _, count, merge_radius, next_id = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")
        expected = _HEADER.size + count * _RECORD.size
        if len(data) != expected:
            raise FormatError(f"expected {expected} bytes, got {len(data)}")
        db = GlobalTreeDb(merge_radius=merge_radius)
        db.next_id = next_id
        offset = _HEADER.size
        for _ in range(count):
            (tid, ax, ay, az, px, py, pz, dbh, obs, flags) = _RECORD.unpack_from(data, offset)
            offset += _RECORD.size
            if tid in db._trees:
                raise FormatError(f"duplicate tree id {tid}")
            tree = _DbTree(
                id=tid,
                axis=np.array([ax, ay, az], dtype=np.float32),
                position=np.array([px, py, pz], dtype=np.float64),
                dbh=dbh,
                obs_count=obs,
                flags=flags,
            )
            db._trees[tid] = tree
            db._grid_add(tid)
        return db

    def save_file(self, path):
        with open(path, "wb") as f:
            f.write(self.save())

    @staticmethod
    def load_file(path) -> "GlobalTreeDb":
        with open(path, "rb") as f:
            return GlobalTreeDb.load(f.read())

    def export_text(self) -> str:
        """One tree per line: id x y z axis_x axis_y axis_z dbh obs_count."""
        lines = []
        for tid in sorted(self._trees):
            t = self._trees[tid]
            lines.append("%d %.10g %.10g %.10g %.10g %.10g %.10g %.10g %d" % (
                t.id, t.position[0], t.position[1], t.position[2],
                t.axis[0], t.axis[1], t.axis[2], t.dbh, t.obs_count))
        return "\n".join(lines) + ("\n" if lines else "")

    def equals(self, other: "GlobalTreeDb") -> bool:
        """Field-for-field equality, used by round-trip checks."""
        if (self.merge_radius, self.next_id, len(self)) != (other.merge_radius, other.next_id, len(other)):
            return False
        for tid, t in self._trees.items():
            o = other._trees.get(tid)
            if o is None:
                return False
            if (t.dbh != o.dbh or t.obs_count != o.obs_count or t.flags != o.flags
                    or not np.array_equal(t.axis, o.axis)
                    or not np.array_equal(t.position, o.position)):
                return False
        return True
