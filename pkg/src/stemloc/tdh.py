"""Tree distribution histogram: the coarse global descriptor and its retrieval.

Each tree votes into radial-distance and DBH bins whose boundaries carry a
small overlap, so a tree sitting near a boundary increments both neighbors
and the descriptor tolerates measurement noise. The raw count matrix is then
smoothed with a 2x2 uniform filter anchored top-left (zero-padded at the high
edges) and flattened; with the default 5 x 8 layout that gives 40 values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CHI2_EPS = 1e-10


class DimensionMismatch(Exception):
    """Histograms of different shapes cannot be compared."""


@dataclass(frozen=True)
class TdhConfig:
    n_spatial: int = 5
    n_sections: int = 8
    r_res: float = 6.0
    w_range: float = 0.5
    r_min: float = 0.05
    r_max: float = 0.85
    w_dbh: float | None = None  # derived from the DBH span unless overridden
    w_dbh_overlap: float = 0.02
    top_k: int = 100

    def __post_init__(self):
        if self.r_min >= self.r_max:
            raise ValueError("r_min must be below r_max")
        if self.w_dbh is None:
            object.__setattr__(self, "w_dbh", (self.r_max - self.r_min) / self.n_sections)
        if self.w_range >= self.r_res / 2:
            raise ValueError("w_range must be below r_res / 2")
        if self.w_dbh_overlap >= self.w_dbh / 2:
            raise ValueError("w_dbh_overlap must be below w_dbh / 2")


@dataclass(frozen=True)
class TdhDescriptor:
    hist: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.hist, dtype=float)
        if h.ndim != 2:
            raise ValueError("hist must be a 2D matrix")
        object.__setattr__(self, "hist", h)

    @property
    def flat(self) -> np.ndarray:
        return self.hist.ravel()


def _overlapped_bin_arrays(values: np.ndarray, origin: float, width: float,
                           overlap: float, n_bins: int) -> list[np.ndarray]:
    """Per tree, the 1-2 bins whose widened interval holds the value.

    Bin i covers [origin + i*w - ov, origin + (i+1)*w + ov); a value within
    `overlap` of a boundary belongs to both neighbors. Returns [primary,
    secondary] bin indices with -1 marking no secondary membership.
    """
    v = values - origin
    base = np.floor(v / width).astype(np.int64)
    below = v - base * width < overlap  # also inside the previous bin
    above = (base + 1) * width - v <= overlap  # also inside the next bin
    secondary = np.where(below, base - 1, np.where(above, base + 1, -1))
    base = np.clip(base, 0, n_bins - 1)
    secondary = np.where((secondary >= 0) & (secondary < n_bins), secondary, -1)
    return [base, secondary]


def smooth_2x2(raw: np.ndarray) -> np.ndarray:
    """Mean of each cell with its right/down/diagonal neighbors, zero-padded."""
    padded = np.zeros((raw.shape[0] + 1, raw.shape[1] + 1))
    padded[:-1, :-1] = raw
    return (padded[:-1, :-1] + padded[1:, :-1] + padded[:-1, 1:] + padded[1:, 1:]) / 4.0


def build_tdh(scene, cfg: TdhConfig = TdhConfig()) -> TdhDescriptor:
    """Histogram the projected scene by radial distance and DBH, then smooth.

    Trees beyond the radial coverage (r >= n_spatial * r_res) are dropped;
    DBH outside [r_min, r_max) is clamped into the edge bins.
    """
    raw = np.zeros((cfg.n_spatial, cfg.n_sections))
    if scene.n_trees == 0:
        return TdhDescriptor(smooth_2x2(raw))
    r = np.hypot(scene.centers[:, 0], scene.centers[:, 1])
    keep = r < cfg.n_spatial * cfg.r_res
    r = r[keep]
    d = scene.dbhs[keep]
    if len(r) == 0:
        return TdhDescriptor(smooth_2x2(raw))

    r_bins = _overlapped_bin_arrays(r, 0.0, cfg.r_res, cfg.w_range, cfg.n_spatial)
    d_bins = _overlapped_bin_arrays(d, cfg.r_min, cfg.w_dbh, cfg.w_dbh_overlap, cfg.n_sections)
    # clamp DBH outside the domain into the edge bins (single membership)
    low, high = d < cfg.r_min, d >= cfg.r_max
    clamped = low | high
    d_bins[0] = np.where(low, 0, np.where(high, cfg.n_sections - 1, d_bins[0]))
    d_bins[1] = np.where(clamped, -1, d_bins[1])

    for rb in r_bins:
        for db in d_bins:
            ok = (rb >= 0) & (db >= 0)
            np.add.at(raw, (rb[ok], db[ok]), 1.0)
    return TdhDescriptor(smooth_2x2(raw))


def chi_square(a: TdhDescriptor, b: TdhDescriptor) -> float:
    """Symmetric chi-square distance between two histograms."""
    if a.hist.shape != b.hist.shape:
        raise DimensionMismatch(f"shape {a.hist.shape} vs {b.hist.shape}")
    x, y = a.flat, b.flat
    return float(np.sum((x - y) ** 2 / (x + y + CHI2_EPS)))


def coarse_retrieve(query: TdhDescriptor, database: list[tuple[int, TdhDescriptor]],
                    cfg: TdhConfig = TdhConfig(),
                    exclusions: frozenset[int] | set[int] = frozenset()) -> list[int]:
    """Up to top_k scene indices, ascending by chi-square distance (ties by index)."""
    if not database:
        return []
    indices = np.array([idx for idx, _ in database])
    mat = np.stack([d.flat for _, d in database])
    return rank_chi_square(query.flat, indices, mat, cfg.top_k, exclusions)


def rank_chi_square(query_flat: np.ndarray, indices: np.ndarray, mat: np.ndarray,
                    top_k: int, exclusions: frozenset[int] | set[int] = frozenset()) -> list[int]:
    """Vectorized ranking core shared with the precomputed-matrix database path."""
    q = query_flat[None, :]
    dists = np.sum((mat - q) ** 2 / (mat + q + CHI2_EPS), axis=1)
    order = np.lexsort((indices, dists))
    out: list[int] = []
    for pos in order:
        idx = int(indices[pos])
        if idx in exclusions:
            continue
        out.append(idx)
        if len(out) >= top_k:
            break
    return out
