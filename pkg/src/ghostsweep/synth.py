"""Synthetic street scenes scanned by a simulated spinning LiDAR.

The scene is a flat ground patch, static axis-aligned boxes (building walls,
poles, a parked car) and one moving box. Each scan ray-casts a ring-based
LiDAR against the scene at its pose, so occlusion and range sparsity come out
of the geometry. The map is the union of all scans in the global frame and
points returned by the moving box are labeled dynamic.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .pointcloud_io import Label, LabeledCloud, ScanFrame, write_cloud

Box = tuple[float, float, float, float, float, float]   # xmin ymin zmin xmax ymax zmax

LABEL_GROUND = 40      # SemanticKITTI "road"
LABEL_BUILDING = 50
LABEL_CAR = 10
LABEL_MOVING_CAR = 252

DEFAULT_BUILDINGS: tuple[Box, ...] = (
    (-10.0, 12.3, 0.0, 60.0, 13.3, 7.0),
    (-10.0, -13.3, 0.0, 60.0, -12.3, 7.0),
    (8.3, -6.9, 0.0, 8.7, -6.5, 4.0),        # pole
    (22.3, -6.9, 0.0, 22.7, -6.5, 4.0),      # pole
    (30.3, -6.2, 0.0, 34.8, -4.3, 1.6),      # parked car
)

# Hides the moving box during the first half of the default trajectory
# (scans 0-9, while it is far away); it is in plain view afterwards.
HALF_OCCLUDER: tuple[Box, ...] = ((11.5, 0.8, 0.0, 11.8, 2.15, 2.4),)


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    ground_x: tuple[float, float] = (-10.0, 60.0)
    ground_y: tuple[float, float] = (-12.3, 12.3)
    buildings: tuple[Box, ...] = DEFAULT_BUILDINGS
    occluders: tuple[Box, ...] = ()
    n_scans: int = 20
    sensor_start: tuple[float, float, float] = (0.0, 0.0, 1.73)
    sensor_step: tuple[float, float] = (0.5, 0.0)
    box_size: tuple[float, float, float] = (4.0, 2.0, 1.5)
    box_clearance: float = 0.25
    box_start: tuple[float, float] = (28.0, 3.5)
    box_step: tuple[float, float] = (-0.8, 0.0)
    n_rings: int = 64
    fov_up_deg: float = 2.0
    fov_down_deg: float = -24.8
    n_azimuth: int = 180
    max_range: float = 80.0
    noise_sigma: float = 0.02

    def validate(self) -> None:
        if self.n_scans < 1:
            raise SceneError("n_scans must be >= 1")
        if not (self.ground_x[1] > self.ground_x[0] and self.ground_y[1] > self.ground_y[0]):
            raise SceneError("ground extent must be non-empty")
        if min(self.box_size) <= 0 or self.box_clearance < 0:
            raise SceneError("box size must be positive and clearance non-negative")
        if self.n_rings < 1 or self.n_azimuth < 1:
            raise SceneError("need at least one ring and one azimuth step")
        if not self.fov_up_deg > self.fov_down_deg:
            raise SceneError("fov_up must exceed fov_down")
        if self.max_range <= 0 or self.noise_sigma < 0:
            raise SceneError("max_range must be positive and noise non-negative")
        for b in self.buildings + self.occluders:
            if len(b) != 6 or not (b[3] > b[0] and b[4] > b[1] and b[5] > b[2]):
                raise SceneError(f"malformed box {b}")

    @property
    def moving(self) -> bool:
        return any(self.box_step)

    def sensor_at(self, t: int) -> np.ndarray:
        sx, sy, sz = self.sensor_start
        return np.array([sx + t * self.sensor_step[0], sy + t * self.sensor_step[1], sz])

    def box_at(self, t: int) -> Box:
        cx = self.box_start[0] + t * self.box_step[0]
        cy = self.box_start[1] + t * self.box_step[1]
        lx, ly, lz = self.box_size
        z0 = self.box_clearance
        return (cx - lx / 2, cy - ly / 2, z0, cx + lx / 2, cy + ly / 2, z0 + lz)


_SPEC_TUPLES = {f.name for f in fields(SceneSpec)
                if f.name not in ("buildings", "occluders") and str(f.type).startswith("tuple")}


def parse_scene_spec(text: str) -> SceneSpec:
    """Build a spec from ``key = value`` lines; tuples are comma separated.

    ``occluders = half`` selects the preset occluder that hides the moving box
    for the first half of the default trajectory.
    """
    kwargs: dict = {}
    names = {f.name: f for f in fields(SceneSpec)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (p.strip() for p in line.partition("="))
        if not sep or key not in names:
            raise SceneError(f"line {lineno}: unknown or malformed entry '{raw.strip()}'")
        try:
            if key in ("buildings", "occluders"):
                if value == "half":
                    kwargs[key] = HALF_OCCLUDER
                elif value in ("", "none"):
                    kwargs[key] = ()
                else:
                    boxes = [tuple(float(v) for v in b.split(",")) for b in value.split(";")]
                    kwargs[key] = tuple(boxes)
            elif key in _SPEC_TUPLES:
                kwargs[key] = tuple(float(v) for v in value.split(","))
            elif key in ("n_scans", "n_rings", "n_azimuth"):
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        except ValueError:
            raise SceneError(f"line {lineno}: bad value for {key}: '{value}'") from None
    spec = SceneSpec(**kwargs)
    spec.validate()
    return spec


@dataclass
class SynthScene:
    spec: SceneSpec
    map: LabeledCloud
    scans: list            # ScanFrame, global frame
    local_points: list     # per-scan sensor-frame points (float32-exact)
    local_labels: list
    poses: np.ndarray      # (n, 3, 4)


def _ray_box(origin, dirs, box: Box) -> np.ndarray:
    """Entry distance of each ray into an AABB (inf on miss)."""
    lo, hi = np.array(box[:3]), np.array(box[3:])
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= np.maximum(tmin, 0.0)) & (tmin > 1e-6)
    return np.where(hit, tmin, np.inf)


def _segment_blocked(a: np.ndarray, b: np.ndarray, boxes: Sequence[Box]) -> bool:
    d = (b - a)[None, :]
    length = float(np.linalg.norm(d))
    for box in boxes:
        t = _ray_box(a, d / length, box)[0]
        if t < length:
            return True
    return False


def _probe_points(box: Box) -> np.ndarray:
    """Box centre plus its eight corners pulled 5% towards the centre."""
    lo, hi = np.array(box[:3]), np.array(box[3:])
    c = (lo + hi) / 2
    corners = np.array([[a, b, d] for a in (lo[0], hi[0]) for b in (lo[1], hi[1])
                        for d in (lo[2], hi[2])])
    return np.vstack([c, c + 0.95 * (corners - c)])


def ring_directions(spec: SceneSpec, az_offset: float) -> np.ndarray:
    elev = np.radians(np.linspace(spec.fov_down_deg, spec.fov_up_deg, spec.n_rings))
    az = az_offset + np.arange(spec.n_azimuth) * (2 * math.pi / spec.n_azimuth)
    el, a = np.meshgrid(elev, az, indexing="ij")
    return np.column_stack([(np.cos(el) * np.cos(a)).ravel(),
                            (np.cos(el) * np.sin(a)).ravel(),
                            np.sin(el).ravel()])


def simulate_scan(spec: SceneSpec, t: int, rng: np.random.Generator):
    """Cast one revolution at scan ``t``; returns global points and raw labels."""
    origin = spec.sensor_at(t)
    dirs = ring_directions(spec, rng.uniform(0, 2 * math.pi / spec.n_azimuth))

    best = np.full(len(dirs), np.inf)
    label = np.zeros(len(dirs), dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(dirs[:, 2] < 0, -origin[2] / dirs[:, 2], np.inf)
    gx, gy = origin[0] + tg * dirs[:, 0], origin[1] + tg * dirs[:, 1]
    on_ground = ((gx >= spec.ground_x[0]) & (gx <= spec.ground_x[1])
                 & (gy >= spec.ground_y[0]) & (gy <= spec.ground_y[1]))
    tg = np.where(on_ground, tg, np.inf)
    best, label = np.minimum(best, tg), np.where(tg < best, LABEL_GROUND, label)

    objects = [(b, LABEL_BUILDING if b[5] > 2.0 else LABEL_CAR) for b in spec.buildings]
    objects += [(b, LABEL_BUILDING) for b in spec.occluders]
    objects.append((spec.box_at(t), LABEL_MOVING_CAR if spec.moving else LABEL_CAR))
    for box, lab in objects:
        tb = _ray_box(origin, dirs, box)
        closer = tb < best
        best = np.where(closer, tb, best)
        label = np.where(closer, lab, label)

    hit = best <= spec.max_range
    pts = origin + dirs[hit] * best[hit, None]
    pts = pts + rng.normal(0.0, spec.noise_sigma, size=pts.shape)
    return pts, label[hit]


def synth_scene(spec: Optional[SceneSpec] = None, seed: int = 0) -> SynthScene:
    """Generate a deterministic scene: map with GT labels plus posed scans."""
    spec = spec or SceneSpec()
    spec.validate()
    static_boxes = list(spec.buildings) + list(spec.occluders)
    for s in range(spec.n_scans):
        if not any(not _segment_blocked(spec.sensor_at(t), p, static_boxes)
                   for t in range(spec.n_scans) for p in _probe_points(spec.box_at(s))):
            raise SceneError(f"box position {s} is hidden from every scan")

    rng = np.random.default_rng(seed)
    scans, local_pts, local_labels, poses = [], [], [], []
    map_xyz, map_raw = [], []
    for t in range(spec.n_scans):
        pts, lab = simulate_scan(spec, t, rng)
        origin = spec.sensor_at(t)
        local = (pts - origin).astype(np.float32).astype(np.float64)
        glob = local + origin
        scans.append(ScanFrame(xyz=glob, sensor_origin=origin, sequence_id=t,
                               pose=np.column_stack([np.eye(3), origin])))
        local_pts.append(local)
        local_labels.append(lab)
        poses.append(np.column_stack([np.eye(3), origin]))
        map_xyz.append(glob)
        map_raw.append(lab)

    xyz = np.concatenate(map_xyz).astype(np.float32).astype(np.float64)
    raw = np.concatenate(map_raw)
    labels = np.where(raw == LABEL_MOVING_CAR, Label.DYNAMIC, Label.STATIC).astype(np.int8)
    cloud = LabeledCloud(xyz=xyz, indices=np.arange(len(xyz)), labels=labels,
                         source_path="synthetic", raw_labels=raw)
    return SynthScene(spec=spec, map=cloud, scans=scans, local_points=local_pts,
                      local_labels=local_labels, poses=np.array(poses))


def write_scene(scene: SynthScene, out_dir: str | os.PathLike, overwrite: bool = False) -> Path:
    """Write ``map.pcd``, ``scans/NNNNNN.pcd`` (sensor frame, pose in VIEWPOINT) and ``poses.txt``."""
    out = Path(out_dir)
    scan_dir = out / "scans"
    if (out / "map.pcd").exists() and not overwrite:
        raise FileExistsError(f"{out / 'map.pcd'} exists (use overwrite)")
    scan_dir.mkdir(parents=True, exist_ok=True)
    write_cloud(scene.map, out / "map.pcd", "binary")
    for t, (local, lab) in enumerate(zip(scene.local_points, scene.local_labels)):
        cloud = LabeledCloud(xyz=local, indices=np.arange(len(local)),
                             labels=np.where(lab == LABEL_MOVING_CAR, 1, 0), raw_labels=lab)
        tx, ty, tz = scene.poses[t][:, 3]
        write_cloud(cloud, scan_dir / f"{t:06d}.pcd", "binary", viewpoint=(tx, ty, tz, 1, 0, 0, 0))
    with open(out / "poses.txt", "w") as fh:
        for p in scene.poses:
            fh.write(" ".join(f"{v:.9g}" for v in p.reshape(-1)) + "\n")
    return out


def spec_to_text(spec: SceneSpec) -> str:
    lines = []
    for k, v in asdict(spec).items():
        if k in ("buildings", "occluders"):
            v = ";".join(",".join(repr(float(c)) for c in b) for b in v) or "none"
        elif isinstance(v, (tuple, list)):
            v = ",".join(repr(float(c)) for c in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
