"""Ground-truthed synthetic forests, trajectories, and noisy tree observations.

Supplies the data every desk-scale experiment runs on: a Poisson-disc world
of leaning stems over smooth sinusoidal terrain, trajectories across it, and
per-payload observations with configurable detection and noise models. The
association table maps each observed tree back to its world tree, which makes
relative poses and retrieval truth exactly computable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Payload, Pose, TreeObservation, canonicalize_axis, exp_so3, rot_x, rot_y, rot_z


class DensityInfeasible(Exception):
    """Requested density cannot be packed at the minimum spacing."""


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    area: tuple[float, float] = (100.0, 100.0)
    tree_density: float = 400.0  # trees per hectare
    min_spacing: float = 2.0
    dbh_lognormal: tuple[float, float] = (-1.25, 0.3)  # mu, sigma of ln(dbh)
    lean_max: float = 4.0  # degrees
    terrain_amplitude: float = 1.5
    terrain_wavelength: float = 60.0
    sensor_range: float = 25.0
    detect_prob: float = 1.0
    dropout_extra: float = 0.0
    noise_center: float = 0.0
    noise_dbh: float = 0.0
    noise_base: float = 0.0
    noise_axis: float = 0.0  # degrees
    payload_spacing: float = 4.0
    viewpoint_rp_max: float = 0.0  # degrees
    scans_per_payload: int = 10  # metadata only
    shared_scans: int = 2  # metadata only

    def __post_init__(self):
        if self.min_spacing <= 0:
            raise ValueError("min_spacing must be positive")
        for name in ("detect_prob", "dropout_extra"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")


@dataclass(frozen=True)
class WorldTree:
    id: int
    position: np.ndarray  # (x, y, terrain z)
    axis: np.ndarray
    dbh: float

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "axis", canonicalize_axis(self.axis))


@dataclass(frozen=True)
class Trajectory:
    poses: tuple[Pose, ...]
    timestamps: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        object.__setattr__(self, "timestamps", tuple(self.timestamps))
        if len(self.poses) != len(self.timestamps):
            raise ValueError("poses and timestamps must have equal length")

    def __len__(self) -> int:
        return len(self.poses)


def terrain_height(cfg: SimConfig, x, y):
    """Smooth sinusoidal ground height; differentiable and parameter-light."""
    w = 2.0 * math.pi / cfg.terrain_wavelength
    return cfg.terrain_amplitude * np.sin(w * np.asarray(x)) * np.sin(w * np.asarray(y))


def generate_world(cfg: SimConfig) -> list[WorldTree]:
    """Poisson-disc sample stems at the target density, deterministic per seed."""
    rng = np.random.default_rng(cfg.seed)
    width, height = cfg.area
    target = int(round(cfg.tree_density * width * height / 10000.0))
    if target == 0:
        return []

    cell = cfg.min_spacing / math.sqrt(2.0)
    grid: dict[tuple[int, int], list[int]] = {}
    points: list[np.ndarray] = []
    max_attempts = 300 * target + 1000
    spacing2 = cfg.min_spacing**2

    attempts = 0
    while len(points) < target and attempts < max_attempts:
        attempts += 1
        p = rng.uniform((0.0, 0.0), (width, height))
        ix, iy = int(p[0] / cell), int(p[1] / cell)
        ok = True
        for gx in range(ix - 2, ix + 3):
            for gy in range(iy - 2, iy + 3):
                for j in grid.get((gx, gy), ()):
                    d = points[j] - p
                    if d[0] * d[0] + d[1] * d[1] < spacing2:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            grid.setdefault((ix, iy), []).append(len(points))
            points.append(p)
    if len(points) < target:
        raise DensityInfeasible(
            f"placed {len(points)}/{target} trees at spacing {cfg.min_spacing}")

    mu, sigma = cfg.dbh_lognormal
    trees = []
    for i, p in enumerate(points):
        dbh = float(np.clip(rng.lognormal(mu, sigma), 0.05, 1.0))
        lean = math.radians(rng.uniform(0.0, cfg.lean_max))
        azim = rng.uniform(0.0, 2.0 * math.pi)
        axis = rot_z(azim) @ rot_y(lean) @ np.array([0.0, 0.0, 1.0])
        z = float(terrain_height(cfg, p[0], p[1]))
        trees.append(WorldTree(id=i, position=np.array([p[0], p[1], z]), axis=axis, dbh=dbh))
    return trees


def make_lawnmower_trajectory(cfg: SimConfig, margin: float = 12.0,
                              row_spacing: float = 20.0,
                              sensor_height: float = 1.5) -> Trajectory:
    """Serpentine sweep across the area, one pose per payload_spacing.

    Yaw faces the direction of travel; z follows the terrain at sensor height.
    """
    width, height = cfg.area
    xs_lo, xs_hi = margin, width - margin
    poses = []
    y = margin
    direction = 1
    row = 0
    while y <= height - margin + 1e-9:
        x = xs_lo if direction > 0 else xs_hi
        end = xs_hi if direction > 0 else xs_lo
        while (direction > 0 and x <= end + 1e-9) or (direction < 0 and x >= end - 1e-9):
            z = float(terrain_height(cfg, x, y)) + sensor_height
            yaw = 0.0 if direction > 0 else math.pi
            poses.append(Pose(rot_z(yaw), np.array([x, y, z])))
            x += direction * cfg.payload_spacing
        y += row_spacing
        direction = -direction
        row += 1
    return Trajectory(tuple(poses), tuple(float(i) for i in range(len(poses))))


@dataclass(frozen=True)
class Association:
    """Ground-truth links from observed trees back to world trees."""

    records: tuple[tuple[int, int, int], ...]  # (payload_index, local_tree_id, world_tree_id)

    def by_payload(self) -> dict[int, dict[int, int]]:
        out: dict[int, dict[int, int]] = {}
        for p, lid, wid in self.records:
            out.setdefault(p, {})[lid] = wid
        return out


def simulate_session(world: list[WorldTree], trajectory: Trajectory, cfg: SimConfig,
                     session_seed: int = 0) -> tuple[list[Payload], Association]:
    """Observe the world along the trajectory with dropout and sensor noise.

    Each payload pose gets an extra random roll/pitch (bounded by
    viewpoint_rp_max); trees within sensor_range are detected independently
    with probability detect_prob * (1 - dropout_extra) and observed in the
    perturbed sensor frame.
    """
    rng = np.random.default_rng(session_seed)
    positions = np.stack([t.position for t in world]) if world else np.empty((0, 3))
    p_detect = cfg.detect_prob * (1.0 - cfg.dropout_extra)

    payloads: list[Payload] = []
    assoc: list[tuple[int, int, int]] = []
    for u, base_pose in enumerate(trajectory.poses):
        roll = math.radians(rng.uniform(-cfg.viewpoint_rp_max, cfg.viewpoint_rp_max))
        pitch = math.radians(rng.uniform(-cfg.viewpoint_rp_max, cfg.viewpoint_rp_max))
        pose = Pose(base_pose.rotation @ rot_x(roll) @ rot_y(pitch), base_pose.translation)
        inv = pose.inverse()

        trees = []
        if len(world):
            d2 = np.sum((positions[:, :2] - pose.translation[:2]) ** 2, axis=1)
            in_range = np.flatnonzero(d2 <= cfg.sensor_range**2)
        else:
            in_range = np.empty(0, dtype=int)
        local_id = 0
        for wi in in_range:
            if rng.uniform() >= p_detect:
                continue
            wt = world[wi]
            p_local = inv.apply(wt.position)
            if cfg.noise_center > 0:
                p_local[0] += rng.normal(0.0, cfg.noise_center)
                p_local[1] += rng.normal(0.0, cfg.noise_center)
            if cfg.noise_base > 0:
                p_local[2] += rng.normal(0.0, cfg.noise_base)
            axis = inv.rotation @ wt.axis
            if cfg.noise_axis > 0:
                tilt = rng.normal(0.0, math.radians(cfg.noise_axis))
                azim = rng.uniform(0.0, 2.0 * math.pi)
                perp = np.array([math.cos(azim), math.sin(azim), 0.0])
                perp -= perp @ axis * axis
                nrm = np.linalg.norm(perp)
                if nrm > 1e-9:
                    axis = exp_so3(perp / nrm * tilt) @ axis
            dbh = wt.dbh
            if cfg.noise_dbh > 0:
                dbh = max(dbh + rng.normal(0.0, cfg.noise_dbh), 0.011)
            trees.append(TreeObservation(
                id=local_id, axis=canonicalize_axis(axis), position=p_local,
                dbh=float(dbh), obs_count=1))
            assoc.append((u, local_id, wt.id))
            local_id += 1
        payloads.append(Payload(index=u, pose=pose, trees=tuple(trees)))
    return payloads, Association(tuple(assoc))


def apply_odometry_drift(payloads: list[Payload], bias_per_step: float = 0.02,
                         noise_t: float = 0.0, noise_r_deg: float = 0.0,
                         seed: int = 0) -> list[Payload]:
    """Re-report payload poses with accumulated odometric error.

    The relative pose between consecutive payloads is corrupted by a constant
    forward bias plus optional Gaussian noise, then re-chained from the true
    start. Observations stay attached to the true sensor frame, so only the
    reported poses drift.
    """
    if not payloads:
        return []
    rng = np.random.default_rng(seed)
    out = [payloads[0]]
    reported = payloads[0].pose
    for prev, cur in zip(payloads, payloads[1:]):
        rel = prev.pose.inverse().compose(cur.pose)
        t_err = np.array([bias_per_step, 0.0, 0.0])
        if noise_t > 0:
            t_err = t_err + rng.normal(0.0, noise_t, size=3)
        if noise_r_deg > 0:
            r_err = exp_so3(rng.normal(0.0, math.radians(noise_r_deg), size=3))
        else:
            r_err = np.eye(3)
        rel_drifted = Pose(rel.rotation @ r_err, rel.translation + t_err)
        reported = reported.compose(rel_drifted)
        out.append(Payload(index=cur.index, pose=reported, trees=cur.trees))
    return out
