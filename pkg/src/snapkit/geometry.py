"""Deterministic geometric primitives: voxel downsampling, nearest-neighbor
lookup, and Fourier positional encodings shared by prompting and decoding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryInputError(ValueError):
    pass


def scene_frame(positions: np.ndarray) -> tuple[np.ndarray, float]:
    """Bounding-box center and scale of a cloud.

    The scale is half the largest bounding-box side, so
    ``(p - center) / scale`` lands in [-1, 1]^3. Degenerate clouds (single
    point) get scale 1 to keep the mapping defined.
    """
    positions = np.asarray(positions, dtype=np.float64)
    lo = positions.min(axis=0)
    hi = positions.max(axis=0)
    center = (lo + hi) / 2.0
    scale = float((hi - lo).max() / 2.0)
    if scale <= 0.0:
        scale = 1.0
    return center, scale


def voxel_downsample(positions: np.ndarray, voxel_size: float
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Collapse each occupied voxel to its most central member point.

    Voxels are ``floor(p / voxel_size)`` cells in absolute coordinates. The
    representative of a cell is the member nearest the cell's centroid, ties
    broken by lowest point index. Returns ``(representatives (K, 3),
    assignment (N,))`` where ``assignment[i]`` indexes the representative of
    point i's voxel. Representatives are ordered by lexicographic cell key,
    which makes the result independent of input point order up to the
    index-based tie break.
    """
    positions = np.asarray(positions)
    if positions.ndim != 2 or positions.shape[1] != 3 or positions.shape[0] < 1:
        raise GeometryInputError(f"positions must be (N>=1, 3), got {positions.shape}")
    if not np.isfinite(positions).all():
        raise GeometryInputError("positions contain non-finite values")
    if voxel_size <= 0:
        raise GeometryInputError("voxel_size must be positive")

    cells = np.floor(positions.astype(np.float64) / voxel_size).astype(np.int64)
    # unique over rows sorts cell keys lexicographically
    _, cell_of_point, counts = np.unique(
        cells, axis=0, return_inverse=True, return_counts=True
    )
    k = counts.shape[0]

    centroids = np.zeros((k, 3), dtype=np.float64)
    np.add.at(centroids, cell_of_point, positions.astype(np.float64))
    centroids /= counts[:, None]

    diff = positions.astype(np.float64) - centroids[cell_of_point]
    d2 = np.einsum("ij,ij->i", diff, diff)
    # per-cell argmin with lowest-index tie break: sort by (cell, d2, index)
    # and keep the first row of each cell group
    n = positions.shape[0]
    order = np.lexsort((np.arange(n), d2, cell_of_point))
    sorted_cells = cell_of_point[order]
    is_first = np.ones(n, dtype=bool)
    is_first[1:] = sorted_cells[1:] != sorted_cells[:-1]
    rep_idx = order[is_first]  # one per cell, in ascending cell order

    representatives = positions[rep_idx]
    assignment = cell_of_point.astype(np.int64)
    return representatives, assignment


def nearest_neighbor(positions: np.ndarray, query: np.ndarray) -> int:
    """Index of the point closest to ``query``; ties go to the lowest index."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 3 or positions.shape[0] < 1:
        raise GeometryInputError("positions must be a nonempty (N, 3) array")
    query = np.asarray(query, dtype=np.float64).reshape(3)
    d2 = np.einsum("ij,ij->i", positions - query, positions - query)
    return int(np.argmin(d2))  # argmin returns the first minimum


@dataclass(frozen=True)
class FourierConfig:
    """Band layout for sinusoidal coordinate encodings.

    Frequencies are geometrically spaced from ``base_frequency`` to
    ``max_frequency``. Output dimension: 3 * 2 * n_bands (+3 when the raw
    normalized input is appended).
    """

    n_bands: int = 6
    base_frequency: float = 1.0
    max_frequency: float = 32.0
    include_input: bool = True

    def __post_init__(self):
        if self.n_bands < 1:
            raise ValueError("n_bands must be >= 1")
        if self.base_frequency <= 0 or self.max_frequency < self.base_frequency:
            raise ValueError("need 0 < base_frequency <= max_frequency")

    @property
    def output_dim(self) -> int:
        return 3 * 2 * self.n_bands + (3 if self.include_input else 0)

    def frequencies(self) -> np.ndarray:
        if self.n_bands == 1:
            return np.array([self.base_frequency])
        return self.base_frequency * (self.max_frequency / self.base_frequency) ** (
            np.arange(self.n_bands) / (self.n_bands - 1)
        )


def fourier_encode(point: np.ndarray, cfg: FourierConfig, scene_scale: float) -> np.ndarray:
    """Sinusoidal encoding of center-relative coordinates.

    ``point`` is expected relative to the scene center (see
    :func:`scene_frame`); dividing by ``scene_scale`` normalizes it to
    [-1, 1]^3 before encoding, so one band layout serves every domain scale.
    Accepts a single 3-vector or an (..., 3) batch.
    """
    if scene_scale <= 0:
        raise GeometryInputError("scene_scale must be positive")
    p = np.asarray(point, dtype=np.float64) / scene_scale
    freqs = cfg.frequencies()
    # angles: (..., n_bands, 3)
    angles = 2.0 * np.pi * freqs.reshape((1,) * (p.ndim - 1) + (-1, 1)) * p[..., None, :]
    parts = [np.sin(angles), np.cos(angles)]
    enc = np.concatenate(parts, axis=-1).reshape(p.shape[:-1] + (-1,))
    if cfg.include_input:
        enc = np.concatenate([p, enc], axis=-1)
    return enc
