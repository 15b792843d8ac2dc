from __future__ import annotations

import json

import numpy as np
import pytest

from mvdpose.errors import IngestionError
from mvdpose.geometry import DepthImage, Skeleton3D
from mvdpose.io import (
    HEADER,
    MAGIC,
    dataset_hash,
    ingest_dataset,
    read_assignments,
    read_depth,
    read_skeletons,
    write_assignments,
    write_dataset,
    write_depth,
    write_skeletons,
)
from mvdpose.matching import Assignment
from mvdpose.simulator import DEPTH_INTRINSICS

from conftest import cached_frame


@pytest.fixture
def dataset(tmp_path):
    bundle, _ = cached_frame(seed=0, num_people=2, depth_noise=5.0)
    write_dataset(tmp_path, [bundle])
    return tmp_path, bundle


def test_depth_round_trip(tmp_path):
    raster = np.random.default_rng(0).integers(0, 65536, (DEPTH_INTRINSICS.height, DEPTH_INTRINSICS.width)).astype(float)
    write_depth(tmp_path / "d.depth", DepthImage(raster, DEPTH_INTRINSICS))
    data = (tmp_path / "d.depth").read_bytes()
    assert data[:4] == MAGIC and len(data) == HEADER.size + raster.size * 2
    np.testing.assert_array_equal(read_depth(tmp_path / "d.depth", DEPTH_INTRINSICS).raster, raster)


def test_depth_rejects_overflow(tmp_path):
    with pytest.raises(ValueError):
        write_depth(tmp_path / "d.depth", DepthImage(np.full((288, 320), 70000.0), DEPTH_INTRINSICS))


def test_dataset_round_trip(dataset):
    root, bundle = dataset
    (back,) = ingest_dataset(root)
    back = back.lift_all()
    assert back.timestamp == bundle.timestamp
    for a, b in zip(bundle.views, back.views):
        assert a.rgb_intrinsics == b.rgb_intrinsics and a.depth_intrinsics == b.depth_intrinsics
        np.testing.assert_array_equal(a.depth_to_rgb.rotation, b.depth_to_rgb.rotation)
        np.testing.assert_array_equal(a.depth.raster, b.depth.raster)
        for d, e in zip(a.detections, b.detections):
            assert d.key == e.key
            np.testing.assert_array_equal(d.skeleton2d.joints, e.skeleton2d.joints)
            np.testing.assert_array_equal(d.skeleton3d_lifted.joints, e.skeleton3d_lifted.joints)


def _expect(root, fragment):
    with pytest.raises(IngestionError) as info:
        ingest_dataset(root)
    assert fragment in str(info.value)
    return str(info.value)


def test_truncated_depth(dataset):
    root, _ = dataset
    path = root / "view_1" / "frame_0.depth"
    path.write_bytes(path.read_bytes()[:-10])
    msg = _expect(root, "bytes, expected")
    assert "view_1" in msg


def test_bad_magic(dataset):
    root, _ = dataset
    path = root / "view_0" / "frame_0.depth"
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    _expect(root, "bad magic")


def test_raster_size_mismatch(dataset):
    root, _ = dataset
    path = root / "view_2" / "intrinsics.json"
    obj = json.loads(path.read_text())
    obj["depth"]["width"] = 300
    obj["depth"]["cx"] = 150.0
    path.write_text(json.dumps(obj))
    _expect(root, "320x288 but depth intrinsics say 300x288")


def test_unknown_view(dataset):
    root, _ = dataset
    path = root / "frame_0" / "detections.json"
    dets = json.loads(path.read_text())
    dets[0]["view"] = 9
    path.write_text(json.dumps(dets))
    _expect(root, "references view 9 of 4")


def test_missing_intrinsics_field(dataset):
    root, _ = dataset
    path = root / "view_0" / "intrinsics.json"
    obj = json.loads(path.read_text())
    del obj["rgb"]
    path.write_text(json.dumps(obj))
    _expect(root, "missing field 'rgb'")


def test_missing_detection_field(dataset):
    root, _ = dataset
    path = root / "frame_0" / "detections.json"
    dets = json.loads(path.read_text())
    del dets[1]["feature"]
    path.write_text(json.dumps(dets))
    _expect(root, "missing field 'feature' in detection #1")


def test_malformed_json(dataset):
    root, _ = dataset
    (root / "frame_0" / "detections.json").write_text("[{")
    _expect(root, "malformed JSON")


def test_missing_directory(tmp_path):
    with pytest.raises(IngestionError):
        ingest_dataset(tmp_path / "nope")
    with pytest.raises(IngestionError):
        ingest_dataset(tmp_path)


def test_dataset_hash_tracks_inputs_only(dataset):
    root, _ = dataset
    h = dataset_hash(root)
    (root / "notes.txt").write_text("unrelated")
    assert dataset_hash(root) == h
    path = root / "view_0" / "frame_0.depth"
    data = bytearray(path.read_bytes())
    data[-1] ^= 1
    path.write_bytes(bytes(data))
    assert dataset_hash(root) != h


def test_assignments_round_trip(tmp_path):
    a = Assignment({(0, 0): 1, (1, 2): 1, (2, 0): 0}, 2)
    write_assignments(tmp_path, [0, 1], [a, None])
    back = read_assignments(tmp_path, [0, 1])
    assert back[0].labels == a.labels and back[0].K == 2
    assert back[1] is None
    with pytest.raises(IngestionError):
        read_assignments(tmp_path, [5])


def test_skeletons_round_trip_with_missing_joints(tmp_path):
    joints = np.arange(39, dtype=float).reshape(13, 3)
    valid = np.ones(13, bool)
    valid[[2, 7]] = False
    joints[~valid] = np.nan
    write_skeletons(tmp_path, [3], [[Skeleton3D(joints, valid)]])
    text = (tmp_path / "frame_3" / "skeletons.json").read_text()
    assert "NaN" not in text and "null" in text
    (sk,) = read_skeletons(tmp_path)[3]
    assert sk.valid.tolist() == valid.tolist()
    np.testing.assert_array_equal(sk.joints[valid], joints[valid])
