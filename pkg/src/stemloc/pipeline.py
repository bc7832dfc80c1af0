"""End-to-end pipeline: scene -> descriptors -> coarse/fine retrieval -> verification.

Glue shared by the CLI and the experiments: builds per-scene records
(alignment, projection, histogram, triangles) and runs full queries against a
scene database with per-stage timings.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .alignment import AlignCfg, AlignmentResult, ProjectedScene, estimate_axis_alignment, project
from .model import SceneInventory
from .tdh import TdhConfig, TdhDescriptor, build_tdh, rank_chi_square
from .triangles import TriangleSet, TriConfig, build_triangles, fine_retrieve, TriangleIndex
from .verification import LocalizationResult, SceneBundle, VerifyConfig, verify_candidates


@dataclass(frozen=True)
class PipelineConfig:
    align: AlignCfg = AlignCfg()
    tdh: TdhConfig = TdhConfig()
    tri: TriConfig = TriConfig()
    verify: VerifyConfig = VerifyConfig()


@dataclass(frozen=True)
class SceneRecord:
    """Everything derived from one scene that retrieval and verification need."""

    scene: SceneInventory
    projected: ProjectedScene
    tdh: TdhDescriptor
    triangles: TriangleSet

    @property
    def scene_index(self) -> int:
        return self.scene.index

    @property
    def bundle(self) -> SceneBundle:
        return SceneBundle(projected=self.projected, triangles=self.triangles)


def build_scene_record(scene: SceneInventory, cfg: PipelineConfig) -> SceneRecord:
    """Align, project, and describe one scene (empty scenes degrade gracefully)."""
    if scene.n_trees == 0:
        alignment = AlignmentResult(degenerate=True)
    else:
        alignment = estimate_axis_alignment(list(scene.trees), cfg.align)
    projected = project(scene, alignment)
    descriptor = build_tdh(projected, cfg.tdh)
    triangles = build_triangles(projected, cfg.tri)
    return SceneRecord(scene=scene, projected=projected, tdh=descriptor, triangles=triangles)


@dataclass
class QueryTimings:
    describe_ms: float = 0.0
    coarse_ms: float = 0.0
    fine_ms: float = 0.0
    verify_ms: float = 0.0

    @property
    def total_ms(self) -> float:
        return self.describe_ms + self.coarse_ms + self.fine_ms + self.verify_ms


class SceneDatabase:
    """Scene records indexed for coarse + fine retrieval. One writer, many readers."""

    def __init__(self, cfg: PipelineConfig = PipelineConfig()):
        self.cfg = cfg
        self.records: dict[int, SceneRecord] = {}
        self.tri_index = TriangleIndex()
        self._tdh_rows: list[np.ndarray] = []
        self._tdh_indices: list[int] = []
        self._tdh_matrix: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, scene_index: int) -> bool:
        return scene_index in self.records

    def add_record(self, record: SceneRecord):
        idx = record.scene_index
        if idx in self.records:
            raise ValueError(f"scene {idx} already in database")
        self.records[idx] = record
        self.tri_index.add_scene(idx, record.triangles)
        self._tdh_rows.append(record.tdh.flat)
        self._tdh_indices.append(idx)
        self._tdh_matrix = None

    def add_scene(self, scene: SceneInventory) -> SceneRecord:
        record = build_scene_record(scene, self.cfg)
        self.add_record(record)
        return record

    def _matrix(self) -> tuple[np.ndarray, np.ndarray]:
        if self._tdh_matrix is None:
            self._tdh_matrix = (np.stack(self._tdh_rows) if self._tdh_rows
                                else np.empty((0, self.cfg.tdh.n_spatial * self.cfg.tdh.n_sections)))
        return np.asarray(self._tdh_indices), self._tdh_matrix

    def coarse_candidates(self, record: SceneRecord,
                          exclusions: frozenset[int] | set[int] = frozenset()) -> list[int]:
        """Histogram-stage ranking only (the coarse gate), for diagnostics."""
        if not self.records:
            return []
        indices, matrix = self._matrix()
        return rank_chi_square(record.tdh.flat, indices, matrix, self.cfg.tdh.top_k, exclusions)

    def query_record(self, record: SceneRecord, seed: int = 0,
                     exclusions: frozenset[int] | set[int] = frozenset()
                     ) -> tuple[list[LocalizationResult], QueryTimings]:
        """Coarse retrieval, fine retrieval, verification; ranked results + timings."""
        timings = QueryTimings()
        if not self.records:
            return [], timings

        t0 = time.perf_counter()
        indices, matrix = self._matrix()
        coarse = rank_chi_square(record.tdh.flat, indices, matrix,
                                 self.cfg.tdh.top_k, exclusions)
        t1 = time.perf_counter()
        fine = fine_retrieve(record.triangles, coarse, self.tri_index, self.cfg.tri)
        t2 = time.perf_counter()
        bundles = [self.records[idx].bundle for idx in fine]
        results = verify_candidates(record.bundle, bundles, self.cfg.verify, seed=seed)
        t3 = time.perf_counter()

        timings.coarse_ms = (t1 - t0) * 1e3
        timings.fine_ms = (t2 - t1) * 1e3
        timings.verify_ms = (t3 - t2) * 1e3
        return results, timings

    def query_scene(self, scene: SceneInventory, seed: int = 0,
                    exclusions: frozenset[int] | set[int] = frozenset()
                    ) -> tuple[list[LocalizationResult], QueryTimings, SceneRecord]:
        """Full per-query pipeline including descriptor generation."""
        t0 = time.perf_counter()
        record = build_scene_record(scene, self.cfg)
        t1 = time.perf_counter()
        results, timings = self.query_record(record, seed=seed, exclusions=exclusions)
        timings.describe_ms = (t1 - t0) * 1e3
        return results, timings, record
