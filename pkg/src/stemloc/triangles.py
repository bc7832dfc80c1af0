"""2D triangle descriptors over projected stem centers, hashed by side lengths.

Triangles are formed among each tree's k nearest neighbors, canonically
ordered so the ascending side lengths are a permutation-invariant signature,
and hashed by quantized side lengths into a 64-bit key. Scenes compare by the
number of shared keys; the descriptor is invariant to planar rigid motion
because only inter-tree distances enter the key.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .alignment import ProjectedScene

KEY_FIELD_BITS = 20
KEY_QUANT_EPS = 1e-9  # absorbs FP division error so exact multiples land in their bin


class QuantizationOverflow(Exception):
    """A quantized side length does not fit in its key field."""


@dataclass(frozen=True)
class TriConfig:
    knn: int = 6
    min_side: float = 1.0
    max_side: float = 40.0
    len_quant: float = 0.2
    top_m: int = 10
    min_height: float = 0.05  # smallest vertex-to-opposite-side distance kept
    count_multiplicity: bool = False  # similarity over key multisets instead of sets

    def __post_init__(self):
        if self.min_side >= self.max_side:
            raise ValueError("min_side must be below max_side")
        if self.len_quant <= 0:
            raise ValueError("len_quant must be positive")


@dataclass(frozen=True)
class TriangleDescriptor:
    """One triangle: ids and vertices ordered opposite the ascending sides."""

    vertex_ids: tuple[int, int, int]
    vertices: np.ndarray  # (3, 2)
    sides: tuple[float, float, float]  # ascending
    centroid: np.ndarray  # (2,)
    scene_index: int
    key: int

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=float).reshape(3, 2))
        object.__setattr__(self, "centroid", np.asarray(self.centroid, dtype=float).reshape(2))


def _quantize(sides: np.ndarray, cfg: TriConfig) -> np.ndarray:
    q = np.floor(sides / cfg.len_quant + KEY_QUANT_EPS).astype(np.int64)
    if q.size and int(q.max()) >= (1 << KEY_FIELD_BITS):
        raise QuantizationOverflow(
            f"side quantizes to {int(q.max())} >= 2^{KEY_FIELD_BITS}")
    return q


def _pack(q: np.ndarray) -> np.ndarray:
    # shortest side in the top bits keeps keys comparable like the sorted sides
    return (q[..., 0] << (2 * KEY_FIELD_BITS)) | (q[..., 1] << KEY_FIELD_BITS) | q[..., 2]


def make_key(sides_ascending, cfg: TriConfig = TriConfig()) -> int:
    """Pack floor(side / len_quant) per side, shortest in the top bits."""
    q = _quantize(np.asarray(sides_ascending, dtype=float).reshape(3), cfg)
    return int(_pack(q))


class TriangleSet:
    """Columnar triangle collection for one scene.

    Behaves as a sequence of TriangleDescriptor (materialized lazily) while
    keeping vertices/centroids/keys as flat arrays for the hot retrieval and
    verification paths.
    """

    def __init__(self, scene_index: int, vertex_ids: np.ndarray, vertices: np.ndarray,
                 sides: np.ndarray, centroids: np.ndarray, keys: np.ndarray):
        self.scene_index = int(scene_index)
        self.vertex_ids = np.asarray(vertex_ids, dtype=np.int64).reshape(-1, 3)
        self.vertices = np.asarray(vertices, dtype=float).reshape(-1, 3, 2)
        self.sides = np.asarray(sides, dtype=float).reshape(-1, 3)
        self.centroids = np.asarray(centroids, dtype=float).reshape(-1, 2)
        self.keys = np.asarray(keys, dtype=np.int64).reshape(-1)
        if len(self.keys) > 1 and np.any(np.diff(self.keys) < 0):
            order = np.argsort(self.keys, kind="stable")
            self.vertex_ids = self.vertex_ids[order]
            self.vertices = self.vertices[order]
            self.sides = self.sides[order]
            self.centroids = self.centroids[order]
            self.keys = self.keys[order]
        self._key_set: frozenset[int] | None = None
        self._by_key: dict[int, np.ndarray] | None = None
        self._groups: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    @staticmethod
    def empty(scene_index: int) -> "TriangleSet":
        return TriangleSet(scene_index, np.empty((0, 3), dtype=np.int64),
                           np.empty((0, 3, 2)), np.empty((0, 3)),
                           np.empty((0, 2)), np.empty(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.keys)

    def __getitem__(self, i: int) -> TriangleDescriptor:
        if not -len(self) <= i < len(self):
            raise IndexError(i)
        return TriangleDescriptor(
            vertex_ids=tuple(int(v) for v in self.vertex_ids[i]),
            vertices=self.vertices[i],
            sides=tuple(float(s) for s in self.sides[i]),
            centroid=self.centroids[i],
            scene_index=self.scene_index,
            key=int(self.keys[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def key_set(self) -> frozenset[int]:
        if self._key_set is None:
            self._key_set = frozenset(int(k) for k in self.keys)
        return self._key_set

    @property
    def key_groups(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(unique keys ascending, first row offset, row count) per key."""
        if self._groups is None:
            uniq, starts, counts = np.unique(self.keys, return_index=True, return_counts=True)
            self._groups = (uniq, starts, counts)
        return self._groups

    @property
    def by_key(self) -> dict[int, np.ndarray]:
        """Key -> array of triangle row indices, rows ascending."""
        if self._by_key is None:
            uniq, starts, counts = self.key_groups
            self._by_key = {int(k): np.arange(s, s + c)
                            for k, s, c in zip(uniq, starts, counts)}
        return self._by_key


def build_triangles(scene: ProjectedScene, cfg: TriConfig = TriConfig()) -> TriangleSet:
    """Form triangles from each tree and pairs among its k nearest neighbors.

    knn >= n - 1 reproduces exhaustive all-triples enumeration. Triples are
    deduplicated; sides outside [min_side, max_side] or near-collinear shapes
    (smallest height under min_height) are discarded. Output is sorted by
    (key, vertex ids).
    """
    n = scene.n_trees
    if n < 3:
        return TriangleSet.empty(scene.scene_index)
    centers = scene.centers
    ids = scene.ids.astype(np.int64)
    k = min(cfg.knn, n - 1)
    if k < 2:
        return TriangleSet.empty(scene.scene_index)
    tree = cKDTree(centers)
    _, nbr = tree.query(centers, k=k + 1)
    nbr = np.atleast_2d(nbr).astype(np.int64)
    # drop self matches (usually column 0; coincident points may displace it)
    mask = nbr != np.arange(n)[:, None]
    if np.all(mask.sum(axis=1) == k):
        neigh = nbr[mask].reshape(n, k)
    else:
        neigh = np.empty((n, k), dtype=np.int64)
        for i in range(n):
            neigh[i] = nbr[i][mask[i]][:k]

    pair_a, pair_b = np.triu_indices(k, k=1)
    anchors = np.repeat(np.arange(n), len(pair_a))
    triples = np.stack([anchors, neigh[:, pair_a].ravel(), neigh[:, pair_b].ravel()], axis=1)
    triples.sort(axis=1)
    # dedup via integer encoding: much faster than row-wise unique
    codes = (triples[:, 0] * n + triples[:, 1]) * n + triples[:, 2]
    _, first = np.unique(codes, return_index=True)
    triples = triples[np.sort(first)]

    p = centers[triples]  # (T, 3, 2)
    e0 = p[:, 1] - p[:, 2]
    e1 = p[:, 2] - p[:, 0]
    e2 = p[:, 0] - p[:, 1]
    # side j is opposite vertex j
    sides = np.sqrt(np.stack([
        e0[:, 0] * e0[:, 0] + e0[:, 1] * e0[:, 1],
        e1[:, 0] * e1[:, 0] + e1[:, 1] * e1[:, 1],
        e2[:, 0] * e2[:, 0] + e2[:, 1] * e2[:, 1],
    ], axis=1))
    area2 = np.abs(e2[:, 0] * e1[:, 1] - e2[:, 1] * e1[:, 0])
    keep = ((sides.min(axis=1) >= cfg.min_side)
            & (sides.max(axis=1) <= cfg.max_side)
            & (area2 / sides.max(axis=1) >= cfg.min_height))
    triples, p, sides = triples[keep], p[keep], sides[keep]
    if len(triples) == 0:
        return TriangleSet.empty(scene.scene_index)

    tri_ids = ids[triples]
    # ascending sides; exact ties broken by the opposite vertex id
    order = np.argsort(sides + 1j * tri_ids, axis=1)
    sides = np.take_along_axis(sides, order, axis=1)
    tri_ids = np.take_along_axis(tri_ids, order, axis=1)
    p = np.take_along_axis(p, order[:, :, None], axis=1)

    keys = _pack(_quantize(sides, cfg))
    centroids = p.mean(axis=1)
    final = np.lexsort((tri_ids[:, 2], tri_ids[:, 1], tri_ids[:, 0], keys))
    return TriangleSet(scene.scene_index, tri_ids[final], p[final], sides[final],
                       centroids[final], keys[final])


def key_set(triangles) -> frozenset[int]:
    if isinstance(triangles, TriangleSet):
        return triangles.key_set
    return frozenset(t.key for t in triangles)


def similarity(query_keys, cand_keys, cfg: TriConfig = TriConfig()) -> int:
    """Shared-key count between two scenes' key collections."""
    if cfg.count_multiplicity:
        cq, cc = Counter(query_keys), Counter(cand_keys)
        return sum(min(v, cc[k]) for k, v in cq.items() if k in cc)
    if isinstance(query_keys, TriangleSet) and isinstance(cand_keys, TriangleSet):
        return int(len(np.intersect1d(query_keys.key_groups[0], cand_keys.key_groups[0],
                                      assume_unique=True)))
    return len(frozenset(query_keys) & frozenset(cand_keys))


class TriangleIndex:
    """Per-scene triangle sets with their deduplicated key sets."""

    def __init__(self):
        self._sets: dict[int, TriangleSet] = {}

    def add_scene(self, scene_index: int, triangles: TriangleSet):
        if scene_index in self._sets:
            raise ValueError(f"scene {scene_index} already indexed")
        self._sets[scene_index] = triangles

    def __contains__(self, scene_index: int) -> bool:
        return scene_index in self._sets

    def scenes(self) -> list[int]:
        return sorted(self._sets)

    def triangle_set(self, scene_index: int) -> TriangleSet:
        return self._sets[scene_index]

    def keys(self, scene_index: int) -> frozenset[int]:
        return self._sets[scene_index].key_set


def fine_retrieve(query_keys, candidates: list[int], index: TriangleIndex,
                  cfg: TriConfig = TriConfig()) -> list[int]:
    """Up to top_m candidate scenes by descending shared-key similarity.

    Zero-similarity candidates are excluded; ties break by ascending index.
    """
    if isinstance(query_keys, TriangleSet):
        query = query_keys
    else:
        query = frozenset(query_keys)
    scored = []
    for idx in candidates:
        cand = index.triangle_set(idx) if isinstance(query, TriangleSet) else index.keys(idx)
        s = similarity(query, cand, cfg)
        if s > 0:
            scored.append((-s, idx))
    scored.sort()
    return [idx for _, idx in scored[:cfg.top_m]]
