import numpy as np
import pytest

from stemloc.alignment import AlignmentResult, ProjectedScene
from stemloc.model import Pose, TreeObservation


def make_projected(centers, dbhs=None, bases=None, index=0, alignment=None) -> ProjectedScene:
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    n = len(centers)
    return ProjectedScene(
        scene_index=index,
        ids=np.arange(n),
        centers=centers,
        base_heights=np.zeros(n) if bases is None else np.asarray(bases, dtype=float),
        dbhs=np.full(n, 0.3) if dbhs is None else np.asarray(dbhs, dtype=float),
        alignment=alignment or AlignmentResult(),
    )


def make_tree(tree_id, position, dbh=0.3, axis=(0.0, 0.0, 1.0), obs_count=1,
              is_candidate=False) -> TreeObservation:
    return TreeObservation(id=tree_id, axis=np.asarray(axis, dtype=float),
                           position=np.asarray(position, dtype=float), dbh=dbh,
                           obs_count=obs_count, is_candidate=is_candidate)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
