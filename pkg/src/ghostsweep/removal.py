"""Per-scan dynamic detection and accumulation over a scan sequence."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .grid import (WORD_DTYPE, ConfigMismatch, EncodedMatrix, GridConfig, encode,
                   encode_cloud)
from .ground import GroundField, fine_segment, ground_from_cloud, select_csel
from .masks import DecisionCache, DynamicMask
from .pointcloud_io import LabeledCloud, ScanFrame
from .restoration import RestoreStats, ScanContext, max_slope, restore

log = logging.getLogger(__name__)


class ScanOrderError(ValueError):
    pass


def _flat_cells(footprint, dims) -> np.ndarray:
    if isinstance(footprint, np.ndarray) and footprint.ndim == 1:
        return np.unique(footprint.astype(np.int64))
    arr = np.array(sorted(footprint), dtype=np.int64).reshape(-1, 2)
    return np.unique(arr[:, 0] * dims[1] + arr[:, 1])


def _footprint(xyz: np.ndarray, config: GridConfig) -> np.ndarray:
    """Flat ids of the cells holding at least one scan point (any height)."""
    i, j = config.cell_index(xyz[:, :2])
    inb = (i >= 0) & (i < config.dims[0]) & (j >= 0) & (j < config.dims[1])
    return np.unique(i[inb] * config.dims[1] + j[inb])


def compare(map_matrix: EncodedMatrix, scan_words, footprint) -> DynamicMask:
    """``map AND NOT scan`` restricted to the footprint cells.

    ``scan_words`` may be an :class:`EncodedMatrix` (its grid must match the
    map's) or a dense word array; ``footprint`` is a set of ``(i, j)`` or an
    array of flat cell ids.
    """
    if isinstance(scan_words, EncodedMatrix):
        if not scan_words.config.same_grid(map_matrix.config):
            raise ConfigMismatch("scan and map were encoded on different grids")
        scan_words = scan_words.words
    scan_words = np.asarray(scan_words, dtype=WORD_DTYPE)
    if scan_words.shape != map_matrix.dims:
        raise ConfigMismatch(f"scan words {scan_words.shape} vs map {map_matrix.dims}")
    cells = _flat_cells(footprint, map_matrix.dims)
    dyn = map_matrix.words.reshape(-1)[cells] & ~scan_words.reshape(-1)[cells]
    return DynamicMask(map_matrix.dims, cells, dyn).with_words(dyn)


@dataclass
class ScanRecord:
    sequence_id: int
    raw_bits: int
    restored_bits: int
    fine_flags: int
    flagged_points_total: int
    elapsed_ms: float
    restore: RestoreStats = field(repr=False, default_factory=RestoreStats)
    raw_mask: Optional[DynamicMask] = field(repr=False, default=None)
    kept_mask: Optional[DynamicMask] = field(repr=False, default=None)

    def as_json(self) -> dict:
        return {"sequence_id": self.sequence_id, "raw_bits": self.raw_bits,
                "restored_bits": self.restored_bits, "fine_flags": self.fine_flags,
                "flagged_points_total": self.flagged_points_total,
                "elapsed_ms": round(self.elapsed_ms, 3)}


@dataclass
class RemovalState:
    """Everything accumulated across scans.

    ``use_cache=False`` makes every scan independent: no voxel decision is
    reused, so scans can be processed in any order.
    """

    dims: tuple[int, int]
    use_cache: bool = True
    use_ground: bool = True
    use_restoration: bool = True
    accumulated: np.ndarray = None
    flagged_points: set = field(default_factory=set)
    cache: Optional[DecisionCache] = None
    last_sequence_id: Optional[int] = None
    records: list = field(default_factory=list)

    def __post_init__(self):
        if self.accumulated is None:
            self.accumulated = np.zeros(self.dims, dtype=WORD_DTYPE)
        if self.use_cache and self.cache is None:
            self.cache = DecisionCache.for_dims(self.dims)

    @property
    def mask(self) -> DynamicMask:
        return DynamicMask.from_dense(self.accumulated)


def process_scan(scan: ScanFrame, map_matrix: EncodedMatrix, state: RemovalState,
                 config: Optional[GridConfig] = None, keep_masks: bool = False) -> ScanRecord:
    """Run one scan through compare, restoration and fine ground segmentation.

    Updates ``state`` in place and returns the scan's log record. Scans must
    arrive in non-decreasing ``sequence_id`` order when the cache is on.
    ``keep_masks`` attaches the raw and restored masks to the record.
    """
    config = config or map_matrix.config
    if not config.same_grid(map_matrix.config):
        raise ConfigMismatch("config does not match the map grid")
    if (state.use_cache and state.last_sequence_id is not None
            and scan.sequence_id < state.last_sequence_id):
        raise ScanOrderError(f"scan {scan.sequence_id} arrived after {state.last_sequence_id}")
    t0 = time.perf_counter()

    ground = map_matrix.ground
    scan_m = encode(scan.xyz, config, ground, with_buckets=False)
    footprint = _footprint(scan.xyz, config)
    raw = compare(map_matrix, scan_m.words, footprint)

    rstats = RestoreStats(raw_bits=raw.n_bits(), kept_bits=raw.n_bits())
    kept = raw
    if state.use_restoration and len(raw.cells) and len(scan):
        ctx = ScanContext(scan_words=scan_m.words, sensor_origin=scan.sensor_origin,
                          ground=ground, config=config,
                          slope=max_slope(scan.xyz, scan.sensor_origin))
        kept, rstats = restore(raw, ctx, state.cache if state.use_cache else None)

    new_points = map_matrix.points_in_voxels(kept.voxel_keys(config.n_bit))
    fine_flags = 0
    if state.use_ground and len(kept.cells):
        for cell in sorted(select_csel(kept.dense(), map_matrix)):
            _, flagged = fine_segment(cell, map_matrix, config)
            fine_flags += len(flagged)
            if len(flagged):
                new_points = np.concatenate([new_points, flagged])

    state.flagged_points.update(new_points.tolist())
    state.accumulated.reshape(-1)[kept.cells] |= kept.words
    state.last_sequence_id = scan.sequence_id
    rec = ScanRecord(sequence_id=scan.sequence_id, raw_bits=rstats.raw_bits,
                     restored_bits=rstats.restored_bits, fine_flags=fine_flags,
                     flagged_points_total=len(state.flagged_points),
                     elapsed_ms=(time.perf_counter() - t0) * 1e3, restore=rstats,
                     raw_mask=raw if keep_masks else None,
                     kept_mask=kept if keep_masks else None)
    state.records.append(rec)
    log.debug("scan %d: %s", scan.sequence_id, rec.as_json())
    return rec


def finalize(state: RemovalState, map_matrix: EncodedMatrix,
             cloud: LabeledCloud) -> tuple[LabeledCloud, LabeledCloud]:
    """Split the map into (static, dynamic) clouds, preserving point order."""
    if state.flagged_points:
        flagged = np.fromiter(state.flagged_points, dtype=np.int64, count=len(state.flagged_points))
        dyn = np.isin(cloud.indices, flagged)
    else:
        dyn = np.zeros(len(cloud), dtype=bool)
    return cloud.subset(~dyn), cloud.subset(dyn)


@dataclass
class MapModel:
    """The encoded map together with its ground field."""

    config: GridConfig
    ground: GroundField
    matrix: EncodedMatrix


def build_map(cloud: LabeledCloud, config: GridConfig, adaptive_ground: bool = True) -> MapModel:
    """Extract ground heights from the raw map and encode it relative to them."""
    field_ = ground_from_cloud(cloud.xyz, config)
    base = field_.g if adaptive_ground else config.z_floor
    return MapModel(config=config, ground=field_, matrix=encode_cloud(cloud, config, base))


def remove_dynamic(cloud: LabeledCloud, scans: Iterable[ScanFrame], config: GridConfig,
                   use_cache: bool = True, use_ground: bool = True,
                   use_restoration: bool = True):
    """Convenience wrapper: build the map, process every scan, partition.

    Returns ``(static, dynamic, state)``.
    """
    model = build_map(cloud, config, adaptive_ground=use_ground)
    state = RemovalState(dims=config.dims, use_cache=use_cache, use_ground=use_ground,
                         use_restoration=use_restoration)
    for scan in scans:
        process_scan(scan, model.matrix, state, config)
    static, dynamic = finalize(state, model.matrix, cloud)
    return static, dynamic, state
