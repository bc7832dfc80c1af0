"""Shared domain types: rigid poses and per-tree stem observations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

_EZ = np.array([0.0, 0.0, 1.0])


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def exp_so3(w: np.ndarray) -> np.ndarray:
    """Rotation matrix from a rotation vector (Rodrigues)."""
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        K = skew(w)
        return np.eye(3) + K + 0.5 * (K @ K)
    K = skew(w / theta)
    return np.eye(3) + math.sin(theta) * K + (1.0 - math.cos(theta)) * (K @ K)


def log_so3(R: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix."""
    trace = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = math.acos(trace)
    if theta < 1e-10:
        # first-order approximation near identity
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if math.pi - theta < 1e-6:
        # near pi: extract axis from the symmetric part
        A = (R + np.eye(3)) * 0.5
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        # fix signs from off-diagonals
        k = int(np.argmax(axis))
        if axis[k] > 0:
            for i in range(3):
                if i != k and A[k, i] < 0:
                    axis[i] = -axis[i]
        axis /= np.linalg.norm(axis)
        return theta * axis
    return theta / (2.0 * math.sin(theta)) * np.array(
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
    )


def yaw_of(R: np.ndarray) -> float:
    """Yaw (rotation about e_z) in the R = Rz(yaw) @ R_rollpitch decomposition."""
    return math.atan2(R[1, 0], R[0, 0])


def remove_yaw(R: np.ndarray) -> np.ndarray:
    """Zero-yaw factor of R; left-multiplying Rz(yaw) recovers R."""
    return rot_z(-yaw_of(R)) @ R


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, radians."""
    return float(np.linalg.norm(log_so3(np.asarray(R))))


def canonicalize_axis(axis) -> np.ndarray:
    """Normalize a stem axis and fix its sign (z >= 0, ties broken by x then y).

    Stems are direction lines, not arrows; this picks one representative per line
    so the choice is idempotent and independent of the input sign.
    """
    a = np.asarray(axis, dtype=float)
    n = math.sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])
    if n < 1e-12:
        raise ValueError("axis must be a nonzero vector")
    a = a / n
    if a[2] < 0 or (a[2] == 0 and (a[0] < 0 or (a[0] == 0 and a[1] < 0))):
        a = -a
    return a


def quat_to_matrix(qx: float, qy: float, qz: float, qw: float) -> np.ndarray:
    q = np.array([qx, qy, qz, qw], dtype=float)
    q /= np.linalg.norm(q)
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> tuple[float, float, float, float]:
    """(qx, qy, qz, qw) with qw >= 0."""
    R = np.asarray(R)
    t = np.trace(R)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    if w < 0:
        x, y, z, w = -x, -y, -z, -w
    n = math.sqrt(x * x + y * y + z * z + w * w)
    return (x / n, y / n, z / n, w / n)


@dataclass(frozen=True)
class Pose:
    """Rigid transform: rotation (3x3, det +1) and translation (meters)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_rotation(R: np.ndarray) -> "Pose":
        return Pose(R, np.zeros(3))

    @staticmethod
    def from_translation(t) -> "Pose":
        return Pose(np.eye(3), np.asarray(t, dtype=float))

    @staticmethod
    def from_quat(t, qx: float, qy: float, qz: float, qw: float) -> "Pose":
        return Pose(quat_to_matrix(qx, qy, qz, qw), np.asarray(t, dtype=float))

    def quat(self) -> tuple[float, float, float, float]:
        return matrix_to_quat(self.rotation)

    def compose(self, other: "Pose") -> "Pose":
        """self * other: applying the result equals applying other, then self."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, x) -> np.ndarray:
        """Transform one point or an (n, 3) array of points."""
        x = np.asarray(x, dtype=float)
        return x @ self.rotation.T + self.translation

    def apply_axis(self, axis: np.ndarray) -> np.ndarray:
        """Rotate a stem axis and re-canonicalize its sign."""
        return canonicalize_axis(self.rotation @ np.asarray(axis, dtype=float))

    def orthonormality_error(self) -> float:
        R = self.rotation
        return float(np.linalg.norm(R.T @ R - np.eye(3)))


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def apply(p: Pose, x) -> np.ndarray:
    return p.apply(x)


@dataclass(frozen=True)
class TreeObservation:
    """One reconstructed stem.

    position packs the stem-center x, y with the base height as z (the
    tree-ground contact height). axis is the unit stem direction with the
    sign canonicalized (z >= 0). dbh is the diameter at breast height.
    """

    id: int
    axis: np.ndarray
    position: np.ndarray
    dbh: float
    obs_count: int = 1
    is_candidate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "axis", canonicalize_axis(self.axis))
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        if self.dbh <= 0:
            raise ValueError(f"dbh must be positive, got {self.dbh}")
        if self.obs_count < 0:
            raise ValueError(f"obs_count must be non-negative, got {self.obs_count}")

    @classmethod
    def _trusted(cls, tree_id: int, axis: np.ndarray, position: np.ndarray, dbh: float,
                 obs_count: int, is_candidate: bool) -> "TreeObservation":
        # fast path for producers whose inputs already satisfy the invariants
        t = object.__new__(cls)
        object.__setattr__(t, "id", tree_id)
        object.__setattr__(t, "axis", axis)
        object.__setattr__(t, "position", position)
        object.__setattr__(t, "dbh", dbh)
        object.__setattr__(t, "obs_count", obs_count)
        object.__setattr__(t, "is_candidate", is_candidate)
        return t

    def transformed(self, pose: Pose, new_id: int | None = None) -> "TreeObservation":
        return replace(
            self,
            id=self.id if new_id is None else new_id,
            axis=pose.apply_axis(self.axis),
            position=pose.apply(self.position),
        )


@dataclass(frozen=True)
class Payload:
    """Tree observations extracted from one group of consecutive scans,
    expressed in that group's local frame."""

    index: int
    pose: Pose
    trees: tuple[TreeObservation, ...]

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))


@dataclass(frozen=True)
class SceneInventory:
    """Windowed, merged tree set anchored at a center payload pose."""

    index: int
    pose: Pose
    trees: tuple[TreeObservation, ...]

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))
        ids = [t.id for t in self.trees]
        if len(ids) != len(set(ids)):
            raise ValueError("tree ids must be unique within a scene")

    @property
    def n_trees(self) -> int:
        return len(self.trees)
