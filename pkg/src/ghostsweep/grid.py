"""Binary-encoded vertical occupancy matrices.

Each cell of an ``N1 x N2`` grid owns one unsigned machine word; bit ``k`` is
set when the ``k``-th vertical bin above the cell's base height holds at
least one point. Points above the top bin fold into the highest bit, points
below the base are skipped (but counted).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from typing import Optional, Union

import numpy as np

from .pointcloud_io import LabeledCloud

WORD_BITS = 64
WORD_DTYPE = np.uint64
ONE = np.uint64(1)


class ConfigMismatch(ValueError):
    pass


@dataclass(frozen=True)
class GridConfig:
    res_g: float = 1.0
    res_h: float = 0.5
    n_bit: int = 64
    origin: tuple[float, float] = (0.0, 0.0)
    dims: tuple[int, int] = (1, 1)
    z_floor: float = 0.0
    mad_window_radius: int = 5
    ground_ratio: float = 0.7
    fine_factor: int = 8
    min_range: float = 0.5
    max_range: float = 80.0

    def __post_init__(self):
        if not (self.res_g > 0 and math.isfinite(self.res_g)):
            raise ValueError(f"res_g must be positive, got {self.res_g}")
        if not (self.res_h > 0 and math.isfinite(self.res_h)):
            raise ValueError(f"res_h must be positive, got {self.res_h}")
        if not 1 <= self.n_bit <= WORD_BITS:
            raise ValueError(f"n_bit must be in [1, {WORD_BITS}], got {self.n_bit}")
        if self.fine_factor < 2:
            raise ValueError("fine_factor must be >= 2")
        if not 0 < self.ground_ratio <= 1:
            raise ValueError("ground_ratio must be in (0, 1]")
        if self.mad_window_radius < 0:
            raise ValueError("mad_window_radius must be >= 0")
        if self.dims[0] < 1 or self.dims[1] < 1:
            raise ValueError("grid dims must be positive")
        if not 0 <= self.min_range < self.max_range:
            raise ValueError("need 0 <= min_range < max_range")

    @property
    def n_cells(self) -> int:
        return self.dims[0] * self.dims[1]

    @property
    def full_mask(self) -> int:
        return (1 << self.n_bit) - 1

    def same_grid(self, other: "GridConfig") -> bool:
        return (self.res_g, self.res_h, self.n_bit, self.origin, self.dims) == (
            other.res_g, other.res_h, other.n_bit, other.origin, other.dims)

    def cell_index(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        i = np.floor((xy[:, 0] - self.origin[0]) / self.res_g).astype(np.int64)
        j = np.floor((xy[:, 1] - self.origin[1]) / self.res_g).astype(np.int64)
        return i, j

    def cell_centers(self, i, j) -> tuple[np.ndarray, np.ndarray]:
        return (self.origin[0] + (np.asarray(i) + 0.5) * self.res_g,
                self.origin[1] + (np.asarray(j) + 0.5) * self.res_g)


def make_grid_config(map_cloud: LabeledCloud, **overrides) -> GridConfig:
    """Derive a grid covering the map's bounding box.

    The origin snaps the box minimum down to a multiple of ``res_g``. Defaults
    are 1.0 m cells, 0.5 m bins, 64-bit words and a ~5 m MAD window.
    """
    if len(map_cloud) == 0:
        raise ValueError("cannot build a grid for an empty map")
    lo, hi = map_cloud.bbox
    if hi[0] <= lo[0] or hi[1] <= lo[1]:
        raise ValueError("degenerate map bounding box (zero extent in x or y)")
    res_g = overrides.pop("res_g", None)
    res_g = 1.0 if res_g is None else float(res_g)
    if not res_g > 0:
        raise ValueError(f"res_g must be positive, got {res_g}")
    x0 = math.floor(lo[0] / res_g) * res_g
    y0 = math.floor(lo[1] / res_g) * res_g
    n1 = int(math.floor((hi[0] - x0) / res_g)) + 1
    n2 = int(math.floor((hi[1] - y0) / res_g)) + 1
    params = dict(res_g=res_g, origin=(x0, y0), dims=(n1, n2), z_floor=float(lo[2]),
                  mad_window_radius=int(math.ceil(5.0 / res_g)))
    known = {f.name for f in fields(GridConfig)}
    unknown = set(overrides) - known
    if unknown:
        raise TypeError(f"unknown grid options: {sorted(unknown)}")
    params.update({k: v for k, v in overrides.items() if v is not None})
    return GridConfig(**params)


GroundLike = Union[float, np.ndarray]


def _ground_array(ground: GroundLike, config: GridConfig) -> np.ndarray:
    if np.isscalar(ground):
        return np.full(config.dims, float(ground))
    g = np.asarray(ground, dtype=np.float64)
    if g.shape != config.dims:
        raise ValueError(f"ground shape {g.shape} does not match grid {config.dims}")
    return g


@dataclass(frozen=True, eq=False)
class EncodedMatrix:
    """Occupancy words plus (for maps) the points behind every set bit.

    Buckets are stored sorted by voxel key ``(i * N2 + j) * n_bit + k``:
    ``entry_keys[e]`` is the voxel of entry ``e``, ``entry_indices[e]`` the
    stable point index and ``entry_heights[e]`` its height above the cell base.
    """

    config: GridConfig
    words: np.ndarray
    ground: np.ndarray
    point_count: np.ndarray
    below_base: int = 0
    out_of_bounds: int = 0
    entry_keys: Optional[np.ndarray] = None
    entry_indices: Optional[np.ndarray] = None
    entry_heights: Optional[np.ndarray] = None

    @property
    def dims(self) -> tuple[int, int]:
        return self.config.dims

    @property
    def has_buckets(self) -> bool:
        return self.entry_keys is not None

    def voxel_key(self, i, j, k):
        return (np.asarray(i, dtype=np.int64) * self.dims[1] + j) * self.config.n_bit + k

    def bucket(self, i: int, j: int, k: int) -> np.ndarray:
        """Stable indices of the map points in voxel ``(i, j, k)``."""
        lo, hi = self._bucket_span(self.voxel_key(i, j, k))
        return self.entry_indices[lo:hi]

    def bucket_heights(self, i: int, j: int, k: int) -> np.ndarray:
        lo, hi = self._bucket_span(self.voxel_key(i, j, k))
        return self.entry_heights[lo:hi]

    def _bucket_span(self, key) -> tuple[int, int]:
        if not self.has_buckets:
            raise ValueError("matrix was encoded without buckets")
        lo = int(np.searchsorted(self.entry_keys, key, side="left"))
        hi = int(np.searchsorted(self.entry_keys, key, side="right"))
        return lo, hi

    def points_in_voxels(self, keys: np.ndarray) -> np.ndarray:
        """Stable indices of all points in the given voxel keys."""
        if not self.has_buckets:
            raise ValueError("matrix was encoded without buckets")
        keys = np.asarray(keys, dtype=np.int64)
        if len(keys) == 0:
            return np.empty(0, dtype=np.int64)
        return self.entry_indices[np.isin(self.entry_keys, keys)]

    def iter_buckets(self):
        """Yield ``((i, j, k), indices)`` for every non-empty voxel."""
        if not self.has_buckets or len(self.entry_keys) == 0:
            return
        uniq, starts = np.unique(self.entry_keys, return_index=True)
        ends = np.append(starts[1:], len(self.entry_keys))
        n_bit, n2 = self.config.n_bit, self.dims[1]
        for key, s, e in zip(uniq.tolist(), starts.tolist(), ends.tolist()):
            cell, k = divmod(key, n_bit)
            i, j = divmod(cell, n2)
            yield (i, j, k), self.entry_indices[s:e]

    def n_bucketed(self) -> int:
        return 0 if self.entry_keys is None else len(self.entry_keys)


def encode(
    xyz: np.ndarray,
    config: GridConfig,
    ground: GroundLike = None,
    indices: Optional[np.ndarray] = None,
    with_buckets: bool = True,
) -> EncodedMatrix:
    """Encode points into a binary occupancy matrix.

    Bin ``k = floor((z - ground[i, j]) / res_h)``; ``k < 0`` is skipped and
    tallied as below-base, ``k >= n_bit`` sets the top bit. Points outside the
    grid footprint are tallied as out-of-bounds. ``ground`` defaults to the
    config's global z-floor.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    if ground is None:
        ground = config.z_floor
    g = _ground_array(ground, config)
    n1, n2 = config.dims
    if indices is None:
        indices = np.arange(len(xyz), dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)

    i, j = config.cell_index(xyz[:, :2])
    inb = (i >= 0) & (i < n1) & (j >= 0) & (j < n2)
    out_of_bounds = int((~inb).sum())
    i, j, z, idx = i[inb], j[inb], xyz[inb, 2], indices[inb]
    height = z - g[i, j]
    k = np.floor(height / config.res_h).astype(np.int64)
    keep = k >= 0
    below_base = int((~keep).sum())
    i, j, k, idx, height = i[keep], j[keep], k[keep], idx[keep], height[keep]
    k = np.minimum(k, config.n_bit - 1)

    cell = i * n2 + j
    words = np.zeros(n1 * n2, dtype=WORD_DTYPE)
    np.bitwise_or.at(words, cell, np.left_shift(ONE, k.astype(WORD_DTYPE)))
    counts = np.bincount(cell, minlength=n1 * n2).astype(np.int64)

    extra = {}
    if with_buckets:
        key = cell * config.n_bit + k
        order = np.argsort(key, kind="stable")
        extra = dict(entry_keys=key[order], entry_indices=idx[order], entry_heights=height[order])
    return EncodedMatrix(config=config, words=words.reshape(n1, n2), ground=g,
                         point_count=counts.reshape(n1, n2), below_base=below_base,
                         out_of_bounds=out_of_bounds, **extra)


def encode_cloud(cloud: LabeledCloud, config: GridConfig, ground: GroundLike = None,
                 with_buckets: bool = True) -> EncodedMatrix:
    return encode(cloud.xyz, config, ground, indices=cloud.indices, with_buckets=with_buckets)


def empty_matrix(config: GridConfig, ground: GroundLike = None) -> EncodedMatrix:
    return encode(np.empty((0, 3)), config, ground)


def merge(a: EncodedMatrix, b: EncodedMatrix) -> EncodedMatrix:
    """Union of two matrices built on the same grid and ground field."""
    if not a.config.same_grid(b.config):
        raise ConfigMismatch("cannot merge matrices with different grid configs")
    if not np.array_equal(a.ground, b.ground):
        raise ConfigMismatch("cannot merge matrices with different ground fields")
    extra = {}
    if a.has_buckets and b.has_buckets:
        keys = np.concatenate([a.entry_keys, b.entry_keys])
        order = np.argsort(keys, kind="stable")
        extra = dict(entry_keys=keys[order],
                     entry_indices=np.concatenate([a.entry_indices, b.entry_indices])[order],
                     entry_heights=np.concatenate([a.entry_heights, b.entry_heights])[order])
    return EncodedMatrix(config=a.config, words=a.words | b.words, ground=a.ground,
                         point_count=a.point_count + b.point_count,
                         below_base=a.below_base + b.below_base,
                         out_of_bounds=a.out_of_bounds + b.out_of_bounds, **extra)


def cells_overlapping(scan, config: GridConfig) -> set[tuple[int, int]]:
    """Grid cells holding at least one scan point."""
    xyz = getattr(scan, "xyz", scan)
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    i, j = config.cell_index(xyz[:, :2])
    inb = (i >= 0) & (i < config.dims[0]) & (j >= 0) & (j < config.dims[1])
    cells = np.unique(np.column_stack([i[inb], j[inb]]), axis=0)
    return {(int(a), int(b)) for a, b in cells}


def word_hex(word: int, n_bit: int) -> str:
    return f"{int(word):0{(n_bit + 3) // 4}x}"


def dump_words_csv(path, words: np.ndarray, n_bit: int,
                   point_count: Optional[np.ndarray] = None) -> None:
    """Write non-zero cell words as ``i, j, hex word, point_count`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "word_hex", "point_count"])
        for i, j in zip(*np.nonzero(words)):
            count = int(point_count[i, j]) if point_count is not None else ""
            w.writerow([int(i), int(j), word_hex(words[i, j], n_bit), count])


def popcount(words) -> int:
    """Total number of set bits across an array of uint64 words."""
    arr = np.ascontiguousarray(np.asarray(words, dtype=WORD_DTYPE)).reshape(-1)
    return int(np.unpackbits(arr.view(np.uint8)).sum())
