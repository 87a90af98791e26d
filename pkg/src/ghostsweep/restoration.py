"""Static restoration: drop potentially dynamic bits a scan could not observe.

Three filters, applied in order:

* range mask - voxels closer than ``min_range`` or beyond ``max_range``;
* height mask - voxels above the scan's viewing cone, derived from the
  steepest ray slope of the scan;
* reverse virtual ray casting (RVRC) - a grid ray from the voxel back to the
  sensor; hitting any voxel the scan saw as occupied means the voxel was
  hidden, so it is protected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .grid import WORD_DTYPE, GridConfig, popcount
from .masks import LOW_MASKS, DecisionCache, DynamicMask


@dataclass(frozen=True, eq=False)
class VisibilityMask:
    slope: float
    cells: np.ndarray
    protected_words: np.ndarray


def max_slope(xyz: np.ndarray, sensor_origin) -> float:
    """Steepest ray slope ``dz / horizontal range`` of the scan, sensor-relative."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    if len(xyz) == 0:
        raise ValueError("empty scan")
    rel = xyz - np.asarray(sensor_origin, dtype=np.float64)
    rho = np.hypot(rel[:, 0], rel[:, 1])
    ok = rho > 1e-9
    if not ok.any():
        return 0.0
    return float(np.max(rel[ok, 2] / rho[ok]))


def _cell_geometry(cells: np.ndarray, sensor_origin, config: GridConfig):
    i, j = np.divmod(np.asarray(cells, dtype=np.int64), config.dims[1])
    cx, cy = config.cell_centers(i, j)
    s = np.hypot(cx - sensor_origin[0], cy - sensor_origin[1])
    return i, j, s


def height_mask(scan, cells: np.ndarray, ground: np.ndarray, config: GridConfig,
                slope: Optional[float] = None) -> VisibilityMask:
    """Protect bins whose bottom lies above ``sensor_z + ceil(k * s)``.

    ``k`` is the scan's maximum ray slope and ``s`` the horizontal distance
    from the sensor to each cell centre.
    """
    origin = np.asarray(scan.sensor_origin, dtype=np.float64)
    k = max_slope(scan.xyz, origin) if slope is None else slope
    cells = np.asarray(cells, dtype=np.int64)
    return VisibilityMask(slope=k, cells=cells,
                          protected_words=cone_protected(origin, k, cells, ground, config))


def cone_protected(origin, slope: float, cells: np.ndarray, ground: np.ndarray,
                   config: GridConfig) -> np.ndarray:
    i, j, s = _cell_geometry(cells, origin, config)
    ceiling = origin[2] + np.ceil(slope * s)
    # first bin with g + b * res_h > ceiling
    b_min = np.floor((ceiling - ground[i, j]) / config.res_h).astype(np.int64) + 1
    b_min = np.clip(b_min, 0, config.n_bit)
    return WORD_DTYPE(config.full_mask) & ~LOW_MASKS[b_min]


def range_mask(sensor_origin, cells: np.ndarray, ground: np.ndarray,
               config: GridConfig) -> np.ndarray:
    """Words of voxels whose centre lies outside ``[min_range, max_range]``."""
    origin = np.asarray(sensor_origin, dtype=np.float64)
    cells = np.asarray(cells, dtype=np.int64)
    if len(cells) == 0:
        return np.empty(0, dtype=WORD_DTYPE)
    i, j, s = _cell_geometry(cells, origin, config)
    zc = ground[i, j][:, None] + (np.arange(config.n_bit) + 0.5) * config.res_h
    d = np.hypot(s[:, None], zc - origin[2])
    out = (d < config.min_range) | (d > config.max_range)
    weights = np.left_shift(np.uint64(1), np.arange(config.n_bit, dtype=WORD_DTYPE))
    return (out.astype(WORD_DTYPE) * weights).sum(axis=1, dtype=WORD_DTYPE)


def _bin_of(z: float, g: float, config: GridConfig) -> int:
    return int(math.floor((z - g) / config.res_h))


def _bin_span_mask(b_lo: int, b_hi: int, n_bit: int) -> int:
    if b_hi < 0:
        return 0
    b_lo = min(max(b_lo, 0), n_bit - 1)
    b_hi = min(b_hi, n_bit - 1)
    return ((1 << (b_hi + 1)) - 1) ^ ((1 << b_lo) - 1)


def traverse(start, end, config: GridConfig):
    """Cells pierced by the xy projection of ``start -> end``.

    Yields ``(i, j, t_in, t_out)`` in order along the segment, with ``t`` the
    segment parameter in ``[0, 1]``. Stops early once the ray leaves the grid.
    """
    n1, n2 = config.dims
    u0 = (start[0] - config.origin[0]) / config.res_g
    v0 = (start[1] - config.origin[1]) / config.res_g
    u1 = (end[0] - config.origin[0]) / config.res_g
    v1 = (end[1] - config.origin[1]) / config.res_g
    i, j = math.floor(u0), math.floor(v0)
    ei, ej = math.floor(u1), math.floor(v1)
    du, dv = u1 - u0, v1 - v0

    if du > 0:
        step_i, t_max_i, t_delta_i = 1, (i + 1 - u0) / du, 1.0 / du
    elif du < 0:
        step_i, t_max_i, t_delta_i = -1, (i - u0) / du, -1.0 / du
    else:
        step_i, t_max_i, t_delta_i = 0, math.inf, math.inf
    if dv > 0:
        step_j, t_max_j, t_delta_j = 1, (j + 1 - v0) / dv, 1.0 / dv
    elif dv < 0:
        step_j, t_max_j, t_delta_j = -1, (j - v0) / dv, -1.0 / dv
    else:
        step_j, t_max_j, t_delta_j = 0, math.inf, math.inf

    t = 0.0
    # the cell count along each axis bounds the walk; guards float drift
    for _ in range(abs(ei - i) + abs(ej - j) + 1):
        if not (0 <= i < n1 and 0 <= j < n2):
            return
        t_next = min(t_max_i, t_max_j, 1.0)
        yield i, j, t, t_next
        if (i, j) == (ei, ej) or t_next >= 1.0:
            return
        if t_max_i < t_max_j:
            i += step_i
            t, t_max_i = t_max_i, t_max_i + t_delta_i
        else:
            j += step_j
            t, t_max_j = t_max_j, t_max_j + t_delta_j


def voxel_center(i: int, j: int, b: int, ground: np.ndarray, config: GridConfig):
    cx, cy = config.cell_centers(i, j)
    return float(cx), float(cy), float(ground[i, j] + (b + 0.5) * config.res_h)


def rvrc(cell_bit: tuple[int, int, int], sensor_origin, scan_words: np.ndarray,
         config: GridConfig, ground: np.ndarray) -> bool:
    """Reverse virtual ray cast from voxel ``(i, j, b)`` to the sensor.

    Returns True when the ray is blocked by a voxel the scan saw as occupied
    (strictly between the start voxel and the sensor's voxel), i.e. the voxel
    must be protected. A ray that reaches the sensor, or leaves the grid
    first, is clear.
    """
    i0, j0, b0 = cell_bit
    n_bit = config.n_bit
    start = voxel_center(i0, j0, b0, ground, config)
    end = (float(sensor_origin[0]), float(sensor_origin[1]), float(sensor_origin[2]))
    si, sj = config.cell_index(np.array(end[:2]))
    si, sj = int(si[0]), int(sj[0])
    n1, n2 = config.dims
    sensor_bin = None
    if 0 <= si < n1 and 0 <= sj < n2:
        sensor_bin = min(_bin_of(end[2], ground[si, sj], config), n_bit - 1)

    z0, dz = start[2], end[2] - start[2]
    for ci, cj, t_in, t_out in traverse(start, end, config):
        occ = int(scan_words[ci, cj])
        if not occ:
            continue
        g = ground[ci, cj]
        za, zb = z0 + t_in * dz, z0 + t_out * dz
        lo, hi = (za, zb) if za <= zb else (zb, za)
        span = _bin_span_mask(_bin_of(lo, g, config), _bin_of(hi, g, config), n_bit)
        if (ci, cj) == (i0, j0):
            span &= ~(1 << b0)
        if (ci, cj) == (si, sj) and sensor_bin is not None and sensor_bin >= 0:
            span &= ~(1 << sensor_bin)
        if occ & span:
            return True
    return False


@dataclass(frozen=True, eq=False)
class ScanContext:
    scan_words: np.ndarray
    sensor_origin: np.ndarray
    ground: np.ndarray
    config: GridConfig
    slope: float


@dataclass
class RestoreStats:
    raw_bits: int = 0
    range_protected: int = 0
    height_protected: int = 0
    cache_protected: int = 0
    cache_dynamic: int = 0
    rvrc_calls: int = 0
    rvrc_blocked: int = 0
    kept_bits: int = 0

    @property
    def restored_bits(self) -> int:
        return self.raw_bits - self.kept_bits


def restore(raw: DynamicMask, ctx: ScanContext,
            cache: Optional[DecisionCache] = None) -> tuple[DynamicMask, RestoreStats]:
    """Clear raw dynamic bits the scan could not have observed.

    With a cache, bits already decided by an earlier scan keep their status and
    skip the ray cast; newly cast bits are recorded in the cache.
    """
    config = ctx.config
    stats = RestoreStats(raw_bits=raw.n_bits())
    if len(raw.cells) == 0:
        return raw, stats

    words = raw.words.copy()
    rng = range_mask(ctx.sensor_origin, raw.cells, ctx.ground, config)
    stats.range_protected = popcount(words & rng)
    words &= ~rng
    cone = cone_protected(ctx.sensor_origin, ctx.slope, raw.cells, ctx.ground, config)
    stats.height_protected = popcount(words & cone)
    words &= ~cone

    n2 = config.dims[1]
    ci, cj = np.divmod(raw.cells, n2)
    keep = np.zeros_like(words)
    if cache is not None:
        c_dyn = cache.dynamic[ci, cj]
        c_prot = cache.protected[ci, cj]
        keep |= words & c_dyn
        stats.cache_dynamic = popcount(words & c_dyn)
        stats.cache_protected = popcount(words & c_prot)
        todo = words & ~(c_dyn | c_prot)
    else:
        todo = words

    clear = np.zeros_like(words)
    blocked = np.zeros_like(words)
    for n in np.flatnonzero(todo):
        w = int(todo[n])
        i, j = int(ci[n]), int(cj[n])
        cw = bw = 0
        while w:
            low = w & -w
            b = low.bit_length() - 1
            w ^= low
            stats.rvrc_calls += 1
            if rvrc((i, j, b), ctx.sensor_origin, ctx.scan_words, config, ctx.ground):
                bw |= low
            else:
                cw |= low
        clear[n], blocked[n] = cw, bw
    stats.rvrc_blocked = popcount(blocked)
    keep |= clear
    if cache is not None:
        cache.dynamic[ci, cj] |= clear
        cache.protected[ci, cj] |= blocked
    stats.kept_bits = popcount(keep)
    return raw.with_words(keep), stats
