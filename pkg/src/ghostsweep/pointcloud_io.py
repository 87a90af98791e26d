"""Read and write PCD v0.7 point clouds and sensor poses.

Clouds are held as numpy arrays rather than per-point objects. Every point
carries a stable integer index (its row in the source file, or the value of
an ``index`` field when the file has one) that survives filtering, so a
cleaned map can always be matched back to the ground-truth map.
"""

from __future__ import annotations

import enum
import logging
import os
import re
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

#: SemanticKITTI moving-object classes (moving-car .. moving-other-vehicle).
DEFAULT_DYNAMIC_LABELS = frozenset(range(251, 260))

ORTHONORMAL_TOL = 1e-3


class PCDError(ValueError):
    """Raised for unreadable or unsupported PCD content."""


class PoseError(ValueError):
    """Raised for missing or malformed pose information."""


class Label(enum.IntEnum):
    UNLABELED = -1
    STATIC = 0
    DYNAMIC = 1


class Point(NamedTuple):
    x: float
    y: float
    z: float
    index: int
    label: Label


@dataclass(frozen=True, eq=False)
class LabeledCloud:
    """An immutable point cloud with stable indices and optional GT labels.

    ``labels`` holds :class:`Label` codes; ``raw_labels`` keeps the original
    integer label values when the cloud was read with a label field, so they
    can be written back unchanged.
    """

    xyz: np.ndarray
    indices: np.ndarray
    labels: np.ndarray
    source_path: str = ""
    raw_labels: Optional[np.ndarray] = None
    n_dropped: int = 0

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = len(xyz)
        indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        labels = np.asarray(self.labels, dtype=np.int8).reshape(-1)
        if len(indices) != n or len(labels) != n:
            raise ValueError("xyz, indices and labels must have the same length")
        if self.raw_labels is not None:
            raw = np.asarray(self.raw_labels, dtype=np.int64).reshape(-1)
            if len(raw) != n:
                raise ValueError("raw_labels length mismatch")
            raw.setflags(write=False)
            object.__setattr__(self, "raw_labels", raw)
        for name, arr in (("xyz", xyz), ("indices", indices), ("labels", labels)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_xyz(cls, xyz, labels=None, indices=None, source_path: str = "") -> "LabeledCloud":
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        n = len(xyz)
        if indices is None:
            indices = np.arange(n, dtype=np.int64)
        if labels is None:
            labels = np.full(n, Label.UNLABELED, dtype=np.int8)
        return cls(xyz=xyz, indices=indices, labels=labels, source_path=source_path)

    def __len__(self) -> int:
        return len(self.xyz)

    def __iter__(self) -> Iterator[Point]:
        for (x, y, z), idx, lab in zip(self.xyz.tolist(), self.indices.tolist(), self.labels.tolist()):
            yield Point(x, y, z, idx, Label(lab))

    @property
    def has_labels(self) -> bool:
        return bool(np.any(self.labels != Label.UNLABELED))

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self) == 0:
            raise ValueError("empty cloud has no bounding box")
        return self.xyz.min(axis=0), self.xyz.max(axis=0)

    def subset(self, mask: np.ndarray) -> "LabeledCloud":
        """Return the points selected by a boolean mask, keeping order."""
        mask = np.asarray(mask, dtype=bool)
        return LabeledCloud(
            xyz=self.xyz[mask],
            indices=self.indices[mask],
            labels=self.labels[mask],
            source_path=self.source_path,
            raw_labels=None if self.raw_labels is None else self.raw_labels[mask],
        )


@dataclass(frozen=True, eq=False)
class ScanFrame:
    """One scan in the global frame together with its sensor origin."""

    xyz: np.ndarray
    sensor_origin: np.ndarray
    sequence_id: int
    pose: np.ndarray = field(default_factory=lambda: np.eye(4)[:3])

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        origin = np.asarray(self.sensor_origin, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(origin)):
            raise PoseError("sensor origin must be finite")
        xyz.setflags(write=False)
        origin.setflags(write=False)
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "sensor_origin", origin)

    def __len__(self) -> int:
        return len(self.xyz)


# --------------------------------------------------------------------------
# PCD parsing

_NP_TYPES = {
    ("F", 4): np.float32, ("F", 8): np.float64,
    ("I", 1): np.int8, ("I", 2): np.int16, ("I", 4): np.int32, ("I", 8): np.int64,
    ("U", 1): np.uint8, ("U", 2): np.uint16, ("U", 4): np.uint32, ("U", 8): np.uint64,
}


@dataclass
class PCDHeader:
    fields: list[str]
    sizes: list[int]
    types: list[str]
    counts: list[int]
    width: int
    height: int
    viewpoint: list[float]
    points: int
    data: str

    def dtype(self) -> np.dtype:
        spec = []
        for name, size, typ, count in zip(self.fields, self.sizes, self.types, self.counts):
            try:
                base = np.dtype(_NP_TYPES[(typ, size)]).newbyteorder("<")
            except KeyError:
                raise PCDError(f"unsupported field type {typ}{size} for '{name}'") from None
            spec.append((name, base) if count == 1 else (name, base, (count,)))
        return np.dtype(spec)


def _parse_header(lines: Sequence[str]) -> PCDHeader:
    meta: dict[str, list[str]] = {}
    for ln in lines:
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        key, _, rest = ln.partition(" ")
        meta[key.upper()] = rest.split()

    version = meta.get("VERSION", ["0.7"])[0]
    if version not in ("0.7", ".7"):
        raise PCDError(f"unsupported PCD version {version}")
    try:
        fields = meta["FIELDS"]
        sizes = [int(s) for s in meta["SIZE"]]
        types = [t.upper() for t in meta["TYPE"]]
        counts = [int(c) for c in meta.get("COUNT", ["1"] * len(fields))]
        width = int(meta["WIDTH"][0])
        height = int(meta.get("HEIGHT", ["1"])[0])
        points = int(meta.get("POINTS", [str(width * height)])[0])
        data = meta["DATA"][0].lower()
    except (KeyError, IndexError, ValueError) as exc:
        raise PCDError(f"malformed PCD header: {exc}") from None
    if not (len(fields) == len(sizes) == len(types) == len(counts)):
        raise PCDError("FIELDS/SIZE/TYPE/COUNT lengths disagree")
    if points != width * height:
        raise PCDError(f"POINTS {points} != WIDTH*HEIGHT {width * height}")
    if data not in ("ascii", "binary"):
        raise PCDError(f"unsupported DATA encoding '{data}'")
    viewpoint = meta.get("VIEWPOINT", ["0", "0", "0", "1", "0", "0", "0"])
    try:
        vp = [float(v) for v in viewpoint]
    except ValueError:
        raise PCDError("malformed VIEWPOINT") from None
    if len(vp) != 7:
        raise PCDError("malformed VIEWPOINT: expected 7 values")
    for axis in "xyz":
        if axis not in fields:
            raise PCDError(f"PCD lacks required field '{axis}'")
        i = fields.index(axis)
        if types[i] != "F" or counts[i] != 1:
            raise PCDError(f"field '{axis}' must be a scalar float")
    return PCDHeader(fields, sizes, types, counts, width, height, vp, points, data)


def read_pcd(path: str | os.PathLike) -> tuple[PCDHeader, np.ndarray]:
    """Parse a PCD file into its header and a structured record array."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise PCDError(f"cannot read {path}: {exc.strerror}") from None

    m = re.search(rb"^DATA[ \t]+\w+[^\n]*\n", blob, flags=re.MULTILINE)
    if m is None:
        raise PCDError(f"{path}: no DATA line")
    try:
        head_text = blob[: m.end()].decode("ascii")
    except UnicodeDecodeError:
        raise PCDError(f"{path}: header is not ASCII") from None
    header = _parse_header(head_text.splitlines())
    dtype = header.dtype()
    body = blob[m.end():]

    if header.data == "binary":
        need = dtype.itemsize * header.points
        if len(body) < need:
            raise PCDError(f"{path}: truncated binary data ({len(body)} < {need} bytes)")
        records = np.frombuffer(body, dtype=dtype, count=header.points).copy()
    else:
        rows = [ln.split() for ln in body.decode("ascii").splitlines() if ln.strip()]
        ncols = sum(header.counts)
        if len(rows) != header.points or any(len(r) != ncols for r in rows):
            raise PCDError(f"{path}: ASCII body does not match header ({len(rows)} rows)")
        records = np.zeros(header.points, dtype=dtype)
        col = 0
        for name, count in zip(header.fields, header.counts):
            values = [r[col:col + count] for r in rows]
            target = records[name]
            if np.issubdtype(target.dtype, np.integer):
                arr = np.array(values, dtype=np.int64)
            else:
                arr = np.array(values, dtype=np.float64)
            records[name] = arr.reshape(target.shape)
            col += count
    return header, records


def read_cloud(
    path: str | os.PathLike,
    label_field: Optional[str] = None,
    dynamic_labels: Iterable[int] = DEFAULT_DYNAMIC_LABELS,
) -> LabeledCloud:
    """Read a PCD file into a :class:`LabeledCloud`.

    Indices come from an ``index`` field when present, otherwise from the
    file row. With ``label_field``, values in ``dynamic_labels`` become
    DYNAMIC, negative values UNLABELED and everything else STATIC.
    Non-finite points are dropped and counted in ``n_dropped``.
    """
    header, rec = read_pcd(path)
    if label_field is not None and label_field not in header.fields:
        raise PCDError(f"{path}: label field '{label_field}' not present")

    xyz = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(np.float64)
    if "index" in header.fields:
        indices = rec["index"].astype(np.int64)
        if len(np.unique(indices)) != len(indices):
            raise PCDError(f"{path}: duplicate values in 'index' field")
    else:
        indices = np.arange(len(xyz), dtype=np.int64)

    raw = None
    labels = np.full(len(xyz), Label.UNLABELED, dtype=np.int8)
    if label_field is not None:
        raw = np.asarray(rec[label_field]).astype(np.int64)
        dyn = np.isin(raw, np.fromiter(dynamic_labels, dtype=np.int64))
        labels = np.where(dyn, Label.DYNAMIC, Label.STATIC).astype(np.int8)
        labels[raw < 0] = Label.UNLABELED

    finite = np.all(np.isfinite(xyz), axis=1)
    n_dropped = int(len(xyz) - finite.sum())
    if n_dropped:
        log.warning("%s: dropped %d non-finite points", path, n_dropped)
        xyz, indices, labels = xyz[finite], indices[finite], labels[finite]
        raw = None if raw is None else raw[finite]
    return LabeledCloud(xyz=xyz, indices=indices, labels=labels, source_path=str(path),
                        raw_labels=raw, n_dropped=n_dropped)


def _labels_for_writing(cloud: LabeledCloud) -> Optional[np.ndarray]:
    if cloud.raw_labels is not None:
        return cloud.raw_labels
    if not cloud.has_labels:
        return None
    # static -> 0, dynamic -> 252 (moving-car), unlabeled -> -1
    out = np.zeros(len(cloud), dtype=np.int64)
    out[cloud.labels == Label.DYNAMIC] = 252
    out[cloud.labels == Label.UNLABELED] = -1
    return out


def write_cloud(
    cloud: LabeledCloud,
    path: str | os.PathLike,
    format: str = "binary",
    viewpoint: Optional[Sequence[float]] = None,
    label_field: str = "label",
) -> None:
    """Write a cloud as PCD v0.7 with x, y, z, index and (if labeled) a label field.

    Coordinates are stored as 4-byte floats when every value is exactly
    representable, otherwise as 8-byte floats, so binary roundtrips are
    bit-exact. ASCII uses enough digits to roundtrip the stored precision.
    """
    if format not in ("ascii", "binary"):
        raise ValueError(f"unknown format '{format}'")
    if len(cloud) == 0:
        raise ValueError("refusing to write an empty cloud")

    xyz = cloud.xyz
    as32 = xyz.astype(np.float32)
    fsize = 4 if np.array_equal(as32.astype(np.float64), xyz) else 8
    labels = _labels_for_writing(cloud)
    if cloud.indices.min() < 0 or cloud.indices.max() >= 2**32:
        raise ValueError("indices must fit in uint32")

    names = ["x", "y", "z", "index"]
    types = [("F", fsize)] * 3 + [("U", 4)]
    if labels is not None:
        names.append(label_field)
        types.append(("I", 4))
    dtype = np.dtype([(n, np.dtype(_NP_TYPES[t]).newbyteorder("<")) for n, t in zip(names, types)])
    rec = np.zeros(len(cloud), dtype=dtype)
    rec["x"], rec["y"], rec["z"] = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    rec["index"] = cloud.indices
    if labels is not None:
        rec[label_field] = labels

    vp = viewpoint if viewpoint is not None else (0, 0, 0, 1, 0, 0, 0)
    header = "\n".join([
        "# .PCD v0.7 - Point Cloud Data file format",
        "VERSION 0.7",
        "FIELDS " + " ".join(names),
        "SIZE " + " ".join(str(s) for _, s in types),
        "TYPE " + " ".join(t for t, _ in types),
        "COUNT " + " ".join("1" for _ in names),
        f"WIDTH {len(cloud)}",
        "HEIGHT 1",
        "VIEWPOINT " + " ".join(_fmt_float(v, 17) for v in vp),
        f"POINTS {len(cloud)}",
        f"DATA {format}",
    ]) + "\n"

    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            if format == "binary":
                fh.write(rec.tobytes())
            else:
                digits = 9 if fsize == 4 else 17
                lines = []
                for row in rec.tolist():
                    parts = [_fmt_float(v, digits) for v in row[:3]]
                    parts += [str(int(v)) for v in row[3:]]
                    lines.append(" ".join(parts))
                fh.write(("\n".join(lines) + "\n").encode("ascii"))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from None


def _fmt_float(v: float, digits: int) -> str:
    s = f"{float(v):.{digits}g}"
    return "0" if s == "-0" else s


# --------------------------------------------------------------------------
# Poses

def read_pose_file(path: str | os.PathLike) -> np.ndarray:
    """Read KITTI-style poses: one row-major 3x4 ``[R|t]`` per line -> (n, 3, 4)."""
    poses = []
    try:
        with open(path) as fh:
            for lineno, ln in enumerate(fh, 1):
                if not ln.strip():
                    continue
                vals = ln.split()
                if len(vals) != 12:
                    raise PoseError(f"{path}:{lineno}: expected 12 values, got {len(vals)}")
                poses.append(np.array(vals, dtype=np.float64).reshape(3, 4))
    except OSError as exc:
        raise PoseError(f"cannot read pose file {path}: {exc.strerror}") from None
    return np.array(poses).reshape(-1, 3, 4)


def quaternion_to_matrix(qw: float, qx: float, qy: float, qz: float) -> np.ndarray:
    q = np.array([qw, qx, qy, qz], dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < 1e-12:
        raise PoseError("malformed VIEWPOINT: zero quaternion")
    if abs(n - 1.0) > ORTHONORMAL_TOL:
        warnings.warn(f"VIEWPOINT quaternion norm {n:.6f}, normalizing", stacklevel=3)
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def orthonormalize(rot: np.ndarray) -> np.ndarray:
    """Return ``rot`` unchanged if it is a rotation within tolerance, else its nearest rotation."""
    err = np.abs(rot.T @ rot - np.eye(3)).max()
    if err <= ORTHONORMAL_TOL and np.linalg.det(rot) > 0:
        return rot
    warnings.warn(f"rotation deviates from orthonormal by {err:.2e}, re-orthonormalizing",
                  stacklevel=3)
    u, _, vt = np.linalg.svd(rot)
    fixed = u @ vt
    if np.linalg.det(fixed) < 0:
        u[:, -1] *= -1
        fixed = u @ vt
    return fixed


def read_scan(
    path: str | os.PathLike,
    pose_source: str = "viewpoint",
    pose_file: Optional[str | os.PathLike] = None,
    row: Optional[int] = None,
    already_global: bool = False,
    sequence_id: Optional[int] = None,
    poses: Optional[np.ndarray] = None,
) -> ScanFrame:
    """Read one scan and express it in the global frame.

    An explicit ``pose_file`` (or preloaded ``poses`` array) takes precedence
    over the VIEWPOINT header. ``row`` selects the pose line and defaults to
    ``sequence_id``. With ``already_global`` the points are left untouched and
    only the sensor origin is taken from the pose.
    """
    if pose_source not in ("viewpoint", "pose_file"):
        raise ValueError(f"unknown pose source '{pose_source}'")
    header, rec = read_pcd(path)
    xyz = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(np.float64)
    finite = np.all(np.isfinite(xyz), axis=1)
    if not finite.all():
        log.warning("%s: dropped %d non-finite points", path, int((~finite).sum()))
        xyz = xyz[finite]

    if pose_file is not None or poses is not None or pose_source == "pose_file":
        if poses is None:
            if pose_file is None:
                raise PoseError("pose_source=pose_file requires a pose file")
            poses = read_pose_file(pose_file)
        r = row if row is not None else sequence_id
        if r is None:
            raise PoseError("a pose row (or sequence_id) is required with a pose file")
        if not 0 <= r < len(poses):
            raise PoseError(f"pose row {r} out of range (file has {len(poses)} poses)")
        rot, trans = poses[r][:, :3], poses[r][:, 3]
        seq = r if sequence_id is None else sequence_id
    else:
        tx, ty, tz, qw, qx, qy, qz = header.viewpoint
        rot, trans = quaternion_to_matrix(qw, qx, qy, qz), np.array([tx, ty, tz])
        seq = 0 if sequence_id is None else sequence_id

    rot = orthonormalize(rot)
    if not already_global:
        xyz = xyz @ rot.T + trans
    return ScanFrame(xyz=xyz, sensor_origin=trans, sequence_id=seq,
                     pose=np.column_stack([rot, trans]))
