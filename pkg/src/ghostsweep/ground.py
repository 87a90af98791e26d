"""Adaptive ground heights and fine ground segmentation.

Coarse ground: every cell's lowest point is clamped into a robust band
``median +/- 3 * MAD`` computed over the lowest points of the surrounding
window, which removes underground outliers (multipath reflections) without
flattening real terrain.

Fine segmentation: for ground cells whose next bin up looks dynamic, the
ground bin is re-binned at a finer vertical resolution; the bottom sub-bins
that hold the bulk of the points are ground, the sparse tail above them is
returned as dynamic.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .grid import EncodedMatrix, GridConfig

_ROW_CHUNK = 64


@dataclass(frozen=True, eq=False)
class GroundField:
    g: np.ndarray
    lowest: np.ndarray      # NaN marks cells without points
    l_min: np.ndarray
    l_max: np.ndarray

    def dump_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "l_k", "l_min", "l_max", "g_k"])
            for i, j in np.argwhere(np.isfinite(self.lowest)):
                w.writerow([int(i), int(j)] + [repr(float(a[i, j])) for a in
                                                (self.lowest, self.l_min, self.l_max, self.g)])


@dataclass(frozen=True)
class FineGrid:
    cell: tuple[int, int]
    counts: tuple[int, ...]
    ground_top_subbin: int


def lowest_heights(xyz: np.ndarray, config: GridConfig) -> np.ndarray:
    """Per-cell minimum z of the raw cloud; NaN where a cell is empty."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    n1, n2 = config.dims
    i, j = config.cell_index(xyz[:, :2])
    inb = (i >= 0) & (i < n1) & (j >= 0) & (j < n2)
    low = np.full(n1 * n2, np.inf)
    np.minimum.at(low, i[inb] * n2 + j[inb], xyz[inb, 2])
    low[np.isinf(low)] = np.nan
    return low.reshape(n1, n2)


def coarse_ground(lowest: np.ndarray, config: GridConfig) -> GroundField:
    """Clamp each cell's lowest height into its window's MAD band.

    Empty cells take their window median; cells whose whole window is empty
    fall back to the config's global z-floor.
    """
    lowest = np.asarray(lowest, dtype=np.float64)
    r = config.mad_window_radius
    n1, n2 = lowest.shape
    padded = np.pad(lowest, r, constant_values=np.nan)
    windows = sliding_window_view(padded, (2 * r + 1, 2 * r + 1))

    med = np.empty_like(lowest)
    mad = np.empty_like(lowest)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)   # all-NaN windows
        for start in range(0, n1, _ROW_CHUNK):
            block = windows[start:start + _ROW_CHUNK].reshape(-1, n2, (2 * r + 1) ** 2)
            m = np.nanmedian(block, axis=-1)
            med[start:start + _ROW_CHUNK] = m
            mad[start:start + _ROW_CHUNK] = np.nanmedian(np.abs(block - m[..., None]), axis=-1)

    l_min = med - 3.0 * mad
    l_max = med + 3.0 * mad
    g = np.minimum(np.maximum(lowest, l_min), l_max)
    empty = np.isnan(lowest)
    g[empty] = med[empty]
    g[np.isnan(g)] = config.z_floor
    return GroundField(g=g, lowest=lowest, l_min=l_min, l_max=l_max)


def ground_from_cloud(xyz: np.ndarray, config: GridConfig) -> GroundField:
    return coarse_ground(lowest_heights(xyz, config), config)


def select_csel(dyn_words: np.ndarray, map_matrix: EncodedMatrix) -> set[tuple[int, int]]:
    """Ground cells (bin 0 occupied) whose bin 1 is flagged potentially dynamic.

    ``dyn_words`` is a dense ``N1 x N2`` word array.
    """
    dyn = np.asarray(dyn_words, dtype=np.uint64)
    sel = ((map_matrix.words & np.uint64(1)) != 0) & ((dyn & np.uint64(2)) != 0)
    return {(int(i), int(j)) for i, j in np.argwhere(sel)}


def ground_top(counts: np.ndarray, ratio: float) -> int:
    """Lowest sub-bin whose cumulative count reaches ``ratio`` of the total."""
    counts = np.asarray(counts)
    cum = np.cumsum(counts)
    return int(np.argmax(cum >= ratio * cum[-1]))


def fine_segment(cell: tuple[int, int], map_matrix: EncodedMatrix,
                 config: GridConfig | None = None) -> tuple[FineGrid, np.ndarray]:
    """Split a ground cell's bin-0 points into ground and near-ground dynamic.

    Returns the sub-bin histogram and the stable indices of the points above
    the ground surface.
    """
    config = config or map_matrix.config
    i, j = cell
    idx = map_matrix.bucket(i, j, 0)
    if len(idx) == 0:
        raise ValueError(f"cell {cell} has an empty ground bin")
    heights = map_matrix.bucket_heights(i, j, 0)
    sub = np.floor(heights / (config.res_h / config.fine_factor)).astype(np.int64)
    sub = np.clip(sub, 0, config.fine_factor - 1)
    counts = np.bincount(sub, minlength=config.fine_factor)
    top = ground_top(counts, config.ground_ratio)
    return FineGrid(cell=(i, j), counts=tuple(int(c) for c in counts),
                    ground_top_subbin=top), idx[sub > top]
