import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from conftest import small_config
from ghostsweep.grid import popcount
from ghostsweep.masks import LOW_MASKS, DecisionCache, DynamicMask, bit_matrix
from ghostsweep.pointcloud_io import ScanFrame
from ghostsweep.restoration import (ScanContext, cone_protected, height_mask, max_slope,
                                    range_mask, restore, rvrc, traverse)

CUBE = small_config(n1=16, n2=16, n_bit=16, res_g=1.0, res_h=1.0, min_range=0.0,
                    max_range=1e3)
FLAT = np.zeros((16, 16))


def segment_hits_box(p, q, lo, hi):
    """Exact slab test: does the segment p->q cross the open box (lo, hi)?"""
    t0, t1 = 0.0, 1.0
    for a in range(3):
        d = q[a] - p[a]
        if d == 0:
            if not lo[a] < p[a] < hi[a]:
                return False
            continue
        ta, tb = (lo[a] - p[a]) / d, (hi[a] - p[a]) / d
        if ta > tb:
            ta, tb = tb, ta
        t0, t1 = max(t0, ta), min(t1, tb)
    return t0 < t1


def exact_blocked(v, sensor, words):
    start = np.array(v) + 0.5
    sv = tuple(int(c) for c in np.floor(sensor))
    for a, b in zip(*np.nonzero(words)):
        w = int(words[a, b])
        for c in range(16):
            if not (w >> c) & 1 or (a, b, c) in (tuple(v), sv):
                continue
            if segment_hits_box(start, sensor, (a, b, c), (a + 1, b + 1, c + 1)):
                return True
    return False


def random_words(rng, density):
    bits = rng.random((16, 16, 16)) < density
    return (bits.astype(np.uint64) << np.arange(16, dtype=np.uint64)).sum(axis=2,
                                                                         dtype=np.uint64)


@pytest.mark.parametrize("seed", range(10))
def test_rvrc_matches_exact_segment_oracle(seed):
    rng = np.random.default_rng(seed)
    for _ in range(10):
        words = random_words(rng, rng.uniform(0.01, 0.1))
        sensor = rng.uniform(0, 16, 3)
        for _ in range(10):
            v = tuple(int(c) for c in rng.integers(0, 16, 3))
            assert rvrc(v, sensor, words, CUBE, FLAT) == exact_blocked(v, sensor, words)


def test_rvrc_constructed_cases():
    words = np.zeros((16, 16), dtype=np.uint64)
    sensor = (0.5, 0.5, 3.5)
    assert rvrc((4, 0, 3), sensor, words, CUBE, FLAT) is False
    words[2, 0] = 1 << 3
    assert rvrc((4, 0, 3), sensor, words, CUBE, FLAT) is True
    # occupancy at the start voxel itself or at the sensor voxel never blocks
    words[:] = 0
    words[4, 0] = 1 << 3
    words[0, 0] = 1 << 3
    assert rvrc((4, 0, 3), sensor, words, CUBE, FLAT) is False
    # adjacent voxel: empty open interval
    words[:] = 0
    words[1, 0] = 1 << 3
    assert rvrc((1, 0, 3), sensor, words, CUBE, FLAT) is False


def test_rvrc_respects_per_cell_ground():
    ground = np.zeros((16, 16))
    words = np.zeros((16, 16), dtype=np.uint64)
    ground[2, 0] = 2.0
    words[2, 0] = 1 << 1               # occupies z in [3, 4) in that cell's frame
    sensor = (0.5, 0.5, 3.5)
    assert rvrc((4, 0, 3), sensor, words, CUBE, ground) is True
    ground[2, 0] = 0.0                 # now the occupied bin sits at z in [1, 2)
    assert rvrc((4, 0, 3), sensor, words, CUBE, ground) is False


def test_rvrc_sensor_outside_grid_exits_clear():
    words = np.zeros((16, 16), dtype=np.uint64)
    words[0, 5] = 1 << 2
    assert rvrc((3, 5, 2), (-20.0, 5.5, 2.5), words, CUBE, FLAT) is True
    assert rvrc((3, 5, 2), (-20.0, 12.5, 2.5), words, CUBE, FLAT) is False


coord = st.floats(0.01, 15.99, allow_nan=False).filter(lambda v: abs(v - round(v)) > 1e-6)


def crosses_lattice_corner(a, b):
    """True when the segment passes (numerically) through a grid corner, a tie case."""
    dx, dy = b[0] - a[0], b[1] - a[1]
    if dx == 0:
        return False
    lo, hi = sorted((a[0], b[0]))
    for x in range(int(np.ceil(lo)), int(np.floor(hi)) + 1):
        y = a[1] + (x - a[0]) / dx * dy
        if abs(y - round(y)) < 1e-9:
            return True
    return False


@settings(max_examples=300, deadline=None)
@given(a=st.tuples(coord, coord), b=st.tuples(coord, coord))
def test_traversal_is_direction_symmetric(a, b):
    assume(not crosses_lattice_corner(a, b))
    fwd = [(i, j) for i, j, _, _ in traverse((*a, 0.0), (*b, 0.0), CUBE)]
    back = [(i, j) for i, j, _, _ in traverse((*b, 0.0), (*a, 0.0), CUBE)]
    assert fwd == back[::-1]
    assert fwd[0] == (int(a[0]), int(a[1])) and fwd[-1] == (int(b[0]), int(b[1]))
    steps = [abs(p[0] - q[0]) + abs(p[1] - q[1]) for p, q in zip(fwd, fwd[1:])]
    assert all(s == 1 for s in steps)


@settings(max_examples=100, deadline=None)
@given(a=st.tuples(coord, coord), b=st.tuples(coord, coord))
def test_traversal_intervals_tile_segment(a, b):
    spans = [(t0, t1) for *_, t0, t1 in traverse((*a, 0.0), (*b, 0.0), CUBE)]
    assert spans[0][0] == 0.0 and spans[-1][1] == pytest.approx(1.0)
    assert all(p[1] == pytest.approx(q[0]) for p, q in zip(spans, spans[1:]))


# --- height and range masks

def test_max_slope_example():
    assert max_slope(np.array([[3.0, 4.0, 5.0]]), (0, 0, 0)) == 1.0
    assert max_slope(np.array([[13.0, 4.0, 6.0]]), (10, 0, 1)) == 1.0
    with pytest.raises(ValueError):
        max_slope(np.zeros((0, 3)), (0, 0, 0))


def test_cone_ceiling_example():
    cfg = small_config(n1=20, n2=1, n_bit=32, res_h=1.0)
    ground = np.zeros((20, 1))
    # cell 6 centre is 6.5 m from a sensor at x = 0: ceiling = 2 + ceil(6.5) = 9 m
    word = int(cone_protected(np.array([0.0, 0.5, 2.0]), 1.0, np.array([6]), ground, cfg)[0])
    assert word == cfg.full_mask & ~((1 << 10) - 1)


def test_negative_slope_protects_everything_above_sensor():
    cfg = small_config(n1=20, n2=1, n_bit=32, res_h=1.0)
    scan = ScanFrame(xyz=np.array([[5.0, 0.5, 0.0]]), sensor_origin=(0.0, 0.5, 2.0),
                     sequence_id=0)
    vm = height_mask(scan, np.arange(20), np.zeros((20, 1)), cfg)
    assert vm.slope < 0
    bits = bit_matrix(vm.protected_words, 32)
    assert bits[:, 3:].all()


@settings(max_examples=200, deadline=None)
@given(k1=st.floats(-1, 3), k2=st.floats(-1, 3), sz=st.floats(-2, 5),
       g=st.lists(st.floats(-2, 2), min_size=8, max_size=8))
def test_height_mask_sound_and_monotone(k1, k2, sz, g):
    cfg = small_config(n1=8, n2=1, n_bit=16, res_h=0.5)
    ground = np.array(g).reshape(8, 1)
    origin = np.array([0.0, 0.5, sz])
    cells = np.arange(8)
    lo, hi = sorted((k1, k2))
    p_lo = cone_protected(origin, lo, cells, ground, cfg)
    p_hi = cone_protected(origin, hi, cells, ground, cfg)
    assert np.all(p_hi & ~p_lo == 0)            # lowering k never protects fewer bits
    bits = bit_matrix(p_hi, 16)
    for c in range(8):
        ceiling = sz + math.ceil(hi * (c + 0.5))
        bottoms = ground[c, 0] + np.arange(16) * 0.5
        clear_cut = np.abs(bottoms - ceiling) > 1e-9          # skip rounding ties
        assert np.all(bottoms[bits[c] & clear_cut] > ceiling)
        assert np.all(bottoms[~bits[c] & clear_cut] <= ceiling)


def test_range_mask_uses_voxel_centres():
    cfg = small_config(n1=100, n2=1, n_bit=4, res_h=1.0, min_range=2.0, max_range=50.0)
    ground = np.zeros((100, 1))
    words = range_mask((0.0, 0.5, 0.5), np.array([0, 1, 49, 50, 99]), ground, cfg)
    assert int(words[0]) == 0b0011              # bins 0, 1 lie within 2 m of the sensor
    assert int(words[1]) == 0b0011
    assert int(words[2]) == 0                   # 49.5 m
    assert int(words[3]) == 0b1111              # 50.5 m


def test_low_masks():
    assert int(LOW_MASKS[0]) == 0 and int(LOW_MASKS[3]) == 0b111
    assert int(LOW_MASKS[64]) == 2**64 - 1


# --- restore

def _ctx(scan_words, origin=(0.5, 0.5, 0.5), slope=10.0, cfg=None):
    cfg = cfg or small_config(n1=16, n2=1, n_bit=8, res_h=1.0, min_range=0.0)
    return ScanContext(scan_words=scan_words, sensor_origin=np.array(origin),
                       ground=np.zeros(cfg.dims), config=cfg, slope=slope)


def test_restore_empty_is_identity():
    ctx = _ctx(np.zeros((16, 1), np.uint64))
    out, stats = restore(DynamicMask.empty((16, 1)), ctx)
    assert out.n_bits() == 0 and stats.raw_bits == 0


def test_restore_all_occluded_caches_protection():
    scan = np.zeros((16, 1), np.uint64)
    scan[3, 0] = 0b11                                     # wall at x in [3, 4)
    raw = DynamicMask((16, 1), [6, 9], [0b01, 0b11])
    cache = DecisionCache.for_dims((16, 1))
    out, stats = restore(raw, _ctx(scan), cache)
    assert out.n_bits() == 0
    assert stats.rvrc_blocked == 3 and cache.n_protected() == 3 and cache.n_dynamic() == 0


def test_restore_mixed_scene_keeps_visible_vacancy():
    scan = np.zeros((16, 2), np.uint64)
    scan[3, 1] = 0b1                                      # wall only in row j = 1
    cfg = small_config(n1=16, n2=2, n_bit=8, res_h=1.0, min_range=0.0)
    raw = DynamicMask((16, 2), [6 * 2 + 0, 6 * 2 + 1], [0b1, 0b1])
    ctx = ScanContext(scan_words=scan, sensor_origin=np.array([0.5, 1.0, 0.5]),
                      ground=np.zeros((16, 2)), config=cfg, slope=10.0)
    out, stats = restore(raw, ctx)
    assert out.as_dict() == {(6, 0): 0b1}
    assert out.n_bits() < raw.n_bits()


def test_cached_verdicts_skip_rvrc():
    scan = np.zeros((16, 1), np.uint64)
    raw = DynamicMask((16, 1), [6], [0b1])
    cache = DecisionCache.for_dims((16, 1))
    first, s1 = restore(raw, _ctx(scan), cache)
    assert first.n_bits() == 1 and s1.rvrc_calls == 1
    scan[3, 0] = 0b1                                      # now hidden, but already decided
    second, s2 = restore(raw, _ctx(scan), cache)
    assert second.n_bits() == 1 and s2.rvrc_calls == 0 and s2.cache_dynamic == 1


@settings(max_examples=150, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), use_cache=st.booleans())
def test_restore_shrinks_and_is_deterministic(seed, use_cache):
    rng = np.random.default_rng(seed)
    cfg = small_config(n1=8, n2=8, n_bit=16, res_h=0.5, min_range=rng.uniform(0, 2),
                       max_range=rng.uniform(3, 12))
    ground = rng.uniform(-0.5, 0.5, (8, 8))
    scan = random_words(rng, 0.1)[:8, :8]
    cells = np.flatnonzero(rng.random(64) < 0.5)
    words = rng.integers(0, 2**16, len(cells)).astype(np.uint64)
    raw = DynamicMask((8, 8), cells, words)
    ctx = ScanContext(scan_words=scan, sensor_origin=rng.uniform([0, 0, 0], [8, 8, 4]),
                      ground=ground, config=cfg, slope=rng.uniform(-0.5, 1.5))
    cache = DecisionCache.for_dims((8, 8)) if use_cache else None
    out, stats = restore(raw, ctx, cache)
    assert out.is_subset_of(raw)
    assert stats.kept_bits == out.n_bits() <= raw.n_bits()
    again, _ = restore(raw, ctx, DecisionCache.for_dims((8, 8)) if use_cache else None)
    assert again.as_dict() == out.as_dict()
    if cache is not None:
        assert popcount(cache.protected & cache.dynamic) == 0
