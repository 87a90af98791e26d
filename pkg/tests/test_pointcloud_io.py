import re
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import ascii_pcd
from ghostsweep.pointcloud_io import (Label, LabeledCloud, PCDError, PoseError, ScanFrame,
                                      orthonormalize, quaternion_to_matrix, read_cloud,
                                      read_pcd, read_pose_file, read_scan, write_cloud)


def test_three_point_ascii_is_unlabeled(tmp_path):
    p = tmp_path / "a.pcd"
    p.write_text(ascii_pcd([(1, 2, 3), (4, 5, 6), (7, 8, 9)]))
    cloud = read_cloud(p)
    assert cloud.indices.tolist() == [0, 1, 2]
    assert all(pt.label is Label.UNLABELED for pt in cloud)
    assert not cloud.has_labels
    lo, hi = cloud.bbox
    assert lo.tolist() == [1, 2, 3] and hi.tolist() == [7, 8, 9]


def test_dynamic_labels_match_independent_text_scan(tmp_path):
    rng = np.random.default_rng(3)
    labels = rng.choice([0, 10, 40, 250, 251, 255, 259, 260], size=50)
    rows = [(i * 0.5, 1.0, 2.0, int(lab)) for i, lab in enumerate(labels)]
    p = tmp_path / "l.pcd"
    p.write_text(ascii_pcd(rows, fields=("x", "y", "z", "label"), types=["F", "F", "F", "I"]))

    expected = []
    for line in p.read_text().splitlines():
        if re.fullmatch(r"[-\d. ]+", line) and len(line.split()) == 4:
            expected.append(251 <= int(line.split()[3]) <= 259)
    cloud = read_cloud(p, label_field="label")
    assert (cloud.labels == Label.DYNAMIC).tolist() == expected
    assert set(cloud.labels.tolist()) <= {Label.STATIC, Label.DYNAMIC}


def test_custom_dynamic_label_set(tmp_path):
    p = tmp_path / "l.pcd"
    p.write_text(ascii_pcd([(0, 0, 0, 7), (1, 0, 0, 252), (2, 0, 0, -1)],
                           fields=("x", "y", "z", "label"), types=["F", "F", "F", "I"]))
    cloud = read_cloud(p, label_field="label", dynamic_labels={7})
    assert cloud.labels.tolist() == [Label.DYNAMIC, Label.STATIC, Label.UNLABELED]


def test_nan_point_dropped_and_counted(tmp_path):
    p = tmp_path / "n.pcd"
    p.write_text(ascii_pcd([(0, 0, 0), (1, 1, "nan"), (2, 2, 2)]))
    cloud = read_cloud(p)
    assert len(cloud) == 2 and cloud.n_dropped == 1
    assert cloud.indices.tolist() == [0, 2]


def test_missing_label_field_errors(tmp_path):
    p = tmp_path / "a.pcd"
    p.write_text(ascii_pcd([(1, 2, 3)]))
    with pytest.raises(PCDError, match="label"):
        read_cloud(p, label_field="label")


@pytest.mark.parametrize("kwargs, msg", [
    (dict(version="0.6"), "version"),
    (dict(data="binary_compressed"), "binary_compressed"),
    (dict(fields=("x", "y", "intensity")), "z"),
])
def test_unsupported_files(tmp_path, kwargs, msg):
    p = tmp_path / "bad.pcd"
    p.write_text(ascii_pcd([(1, 2, 3)], **kwargs))
    with pytest.raises(PCDError, match=msg):
        read_pcd(p)


def test_unreadable_file(tmp_path):
    with pytest.raises(PCDError, match="nope.pcd"):
        read_cloud(tmp_path / "nope.pcd")


def test_empty_cloud_write_errors(tmp_path):
    with pytest.raises(ValueError):
        write_cloud(LabeledCloud.from_xyz(np.zeros((0, 3))), tmp_path / "e.pcd")


def test_empty_cloud_has_no_bbox():
    with pytest.raises(ValueError):
        LabeledCloud.from_xyz(np.zeros((0, 3))).bbox


finite_xyz = arrays(np.float64, st.tuples(st.integers(1, 60), st.just(3)),
                    elements=st.floats(-999.0, 999.0, allow_nan=False, width=64))


@settings(max_examples=60, deadline=None)
@given(xyz=finite_xyz, fmt=st.sampled_from(["binary", "ascii"]))
def test_roundtrip_preserves_everything(tmp_path_factory, xyz, fmt):
    d = tmp_path_factory.mktemp("rt")
    rng = np.random.default_rng(len(xyz))
    idx = rng.permutation(10 * len(xyz))[:len(xyz)]
    labels = rng.choice([Label.STATIC, Label.DYNAMIC], size=len(xyz))
    cloud = LabeledCloud(xyz=xyz, indices=idx, labels=labels)
    write_cloud(cloud, d / "c.pcd", fmt)
    back = read_cloud(d / "c.pcd", label_field="label")
    assert len(back) == len(cloud)
    assert back.indices.tolist() == idx.tolist()
    assert back.labels.tolist() == cloud.labels.tolist()
    assert np.array_equal(back.xyz, xyz)


def test_binary_roundtrip_1000_points_bit_identical(tmp_path):
    xyz = np.random.default_rng(0).uniform(-500, 500, (1000, 3)).astype(np.float32)
    write_cloud(LabeledCloud.from_xyz(xyz), tmp_path / "b.pcd", "binary")
    back = read_cloud(tmp_path / "b.pcd")
    assert back.xyz.astype(np.float32).tobytes() == xyz.tobytes()


def test_ascii_roundtrip_error_bound(tmp_path):
    xyz = np.random.default_rng(1).uniform(-999.9, 999.9, (1000, 3))
    write_cloud(LabeledCloud.from_xyz(xyz), tmp_path / "a.pcd", "ascii")
    back = read_cloud(tmp_path / "a.pcd")
    assert np.abs(back.xyz - xyz).max() <= 1e-4


def test_index_field_is_preserved(tmp_path):
    p = tmp_path / "i.pcd"
    p.write_text(ascii_pcd([(0, 0, 0, 17), (1, 1, 1, 4)], fields=("x", "y", "z", "index"),
                           types=["F", "F", "F", "U"]))
    assert read_cloud(p).indices.tolist() == [17, 4]


def test_duplicate_index_field_rejected(tmp_path):
    p = tmp_path / "i.pcd"
    p.write_text(ascii_pcd([(0, 0, 0, 3), (1, 1, 1, 3)], fields=("x", "y", "z", "index"),
                           types=["F", "F", "F", "U"]))
    with pytest.raises(PCDError):
        read_cloud(p)


@settings(max_examples=40, deadline=None)
@given(xyz=finite_xyz, nan_rows=st.lists(st.integers(0, 59), max_size=10))
def test_dropped_point_accounting(tmp_path_factory, xyz, nan_rows):
    xyz = xyz.copy()
    rows = sorted({r for r in nan_rows if r < len(xyz)})
    xyz[rows, 2] = np.nan
    p = tmp_path_factory.mktemp("nan") / "c.pcd"
    p.write_text(ascii_pcd([tuple(repr(float(v)) for v in r) for r in xyz], sizes=["8"] * 3))
    cloud = read_cloud(p)
    assert len(cloud) + cloud.n_dropped == len(xyz)
    assert cloud.n_dropped == len(rows)


# --- scans and poses

def _scan_file(tmp_path, points, viewpoint="0 0 0 1 0 0 0"):
    p = tmp_path / "scan.pcd"
    p.write_text(ascii_pcd(points, viewpoint=viewpoint))
    return p


def test_identity_pose(tmp_path):
    scan = read_scan(_scan_file(tmp_path, [(1, 2, 3)]))
    assert scan.xyz.tolist() == [[1, 2, 3]]
    assert scan.sensor_origin.tolist() == [0, 0, 0]


def test_translation_viewpoint(tmp_path):
    scan = read_scan(_scan_file(tmp_path, [(1, 0, 0)], viewpoint="10 0 0 1 0 0 0"))
    assert scan.xyz.tolist() == [[11, 0, 0]]
    assert scan.sensor_origin.tolist() == [10, 0, 0]


def test_already_global_skips_transform(tmp_path):
    scan = read_scan(_scan_file(tmp_path, [(1, 0, 0)], viewpoint="10 0 0 1 0 0 0"),
                     already_global=True)
    assert scan.xyz.tolist() == [[1, 0, 0]]
    assert scan.sensor_origin.tolist() == [10, 0, 0]


def test_pose_file_rows(tmp_path):
    scan_path = _scan_file(tmp_path, [(1, 0, 0)], viewpoint="99 99 99 1 0 0 0")
    poses = tmp_path / "poses.txt"
    poses.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 5 0 1 0 6 0 0 1 7\n")
    scan = read_scan(scan_path, pose_source="pose_file", pose_file=poses, row=1)
    assert scan.xyz.tolist() == [[6, 6, 7]]
    assert scan.sensor_origin.tolist() == [5, 6, 7]
    with pytest.raises(PoseError, match="row 5"):
        read_scan(scan_path, pose_source="pose_file", pose_file=poses, row=5)


def test_pose_file_overrides_viewpoint(tmp_path):
    scan_path = _scan_file(tmp_path, [(0, 0, 0)], viewpoint="99 0 0 1 0 0 0")
    poses = tmp_path / "poses.txt"
    poses.write_text("1 0 0 1 0 1 0 2 0 0 1 3\n")
    scan = read_scan(scan_path, pose_file=poses, row=0)
    assert scan.sensor_origin.tolist() == [1, 2, 3]


def test_malformed_pose_line(tmp_path):
    poses = tmp_path / "poses.txt"
    poses.write_text("1 0 0 1\n")
    with pytest.raises(PoseError, match="12 values"):
        read_pose_file(poses)


def test_malformed_viewpoint(tmp_path):
    with pytest.raises(PCDError):
        read_scan(_scan_file(tmp_path, [(0, 0, 0)], viewpoint="0 0 0 1"))
    with pytest.raises(PoseError):
        read_scan(_scan_file(tmp_path, [(0, 0, 0)], viewpoint="0 0 0 0 0 0 0"))


def test_non_orthonormal_rotation_is_repaired():
    rot = np.eye(3)
    rot[0, 1] = 0.01
    with pytest.warns(UserWarning, match="orthonormal"):
        fixed = orthonormalize(rot)
    assert np.allclose(fixed.T @ fixed, np.eye(3), atol=1e-12)
    assert np.linalg.det(fixed) == pytest.approx(1.0)


def test_small_rotation_error_is_tolerated():
    rot = np.eye(3)
    rot[0, 1] = 1e-5
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert orthonormalize(rot) is rot


def test_nonfinite_sensor_origin_rejected():
    with pytest.raises(PoseError):
        ScanFrame(xyz=np.zeros((1, 3)), sensor_origin=(0, np.nan, 0), sequence_id=0)


unit = st.floats(-1.0, 1.0, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(q=st.tuples(unit, unit, unit, unit).filter(lambda q: np.linalg.norm(q) > 0.1),
       t=st.tuples(*[st.floats(-500, 500, allow_nan=False)] * 3),
       pts=arrays(np.float32, (5, 3), elements=st.floats(-50, 50, width=32)),
       via_file=st.booleans())
def test_transform_matches_matrix_oracle(tmp_path_factory, q, t, pts, via_file):
    d = tmp_path_factory.mktemp("tf")
    qn = np.array(q) / np.linalg.norm(q)
    rot = quaternion_to_matrix(*qn)
    p = d / "s.pcd"
    p.write_text(ascii_pcd([tuple(repr(float(v)) for v in r) for r in pts],
                           viewpoint=" ".join(repr(float(v)) for v in (*t, *qn))))
    if via_file:
        poses = d / "poses.txt"
        poses.write_text(" ".join(repr(float(v)) for v in np.column_stack([rot, t]).ravel()))
        scan = read_scan(p, pose_source="pose_file", pose_file=poses, row=0)
    else:
        scan = read_scan(p)
    expected = np.array([rot @ v + np.array(t) for v in pts.astype(np.float64)])
    assert np.abs(scan.xyz - expected).max() <= 1e-6
