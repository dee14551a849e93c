import hashlib

import numpy as np
import pytest

from sunvo.dataset import (
    TrackTable,
    read_dataset,
    read_poses,
    read_sun,
    read_trajectory,
    read_tracks,
    write_dataset,
    write_sun,
    write_trajectory,
)
from sunvo.ephemeris import GeodeticAnchor
from sunvo.errors import DataFileError, ParseError
from sunvo.frontend import SyntheticSceneConfig, TrajectorySpec, generate_scene
from sunvo.se3 import exp
from sunvo.sun_sensing import simulate_sun_measurements

ANCHOR = GeodeticAnchor(49.01, 8.41, "2011-09-26T11:00:00Z")


@pytest.fixture(scope="module")
def scene():
    cfg = SyntheticSceneConfig(trajectory=TrajectorySpec(n_frames=20), n_landmarks=100, pixel_noise=0.7, seed=4)
    return generate_scene(cfg, ANCHOR)


def _digest(d):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir())}


def test_dataset_roundtrip_is_bit_exact(tmp_path, scene):
    write_dataset(tmp_path / "ds", scene)
    back = read_dataset(tmp_path / "ds")
    assert back.n_frames == scene.n_frames
    np.testing.assert_array_equal(back.timestamps, scene.timestamps)
    np.testing.assert_array_equal(back.tracks.Y, scene.tracks.Y)
    np.testing.assert_array_equal(back.tracks.track_ids, scene.tracks.track_ids)
    np.testing.assert_array_equal(back.observation_noise, scene.observation_noise)
    for a, b in zip(back.gt_poses, scene.gt_poses):
        np.testing.assert_array_equal(a.matrix(), b.matrix())
    assert back.anchor == scene.anchor


def test_rewrite_is_byte_identical(tmp_path, scene):
    write_dataset(tmp_path / "a", scene)
    write_dataset(tmp_path / "b", read_dataset(tmp_path / "a"))
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_sun_and_trajectory_roundtrip(tmp_path, scene):
    meas = simulate_sun_measurements(scene.gt_poses, ANCHOR, 10.0, every_n=3, seed=1)
    write_sun(tmp_path / "sun.csv", meas)
    back = read_sun(tmp_path / "sun.csv")
    for a, b in zip(meas, back):
        assert a.frame_id == b.frame_id
        np.testing.assert_array_equal(a.direction, b.direction)
        np.testing.assert_array_equal(a.covariance, b.covariance)
    poses = [p.with_covariance(np.diag(np.arange(1.0, 7.0)) * 1e-3) for p in scene.gt_poses[:3]]
    poses[1] = exp(np.full(6, 0.1)) @ poses[1]
    write_trajectory(tmp_path / "t.csv", [0, 1, 2], poses)
    ids, back = read_trajectory(tmp_path / "t.csv")
    assert ids == [0, 1, 2]
    np.testing.assert_array_equal(back[0].covariance, poses[0].covariance)
    np.testing.assert_array_equal(back[1].matrix(), poses[1].matrix())


def test_missing_files_raise(tmp_path):
    with pytest.raises(DataFileError):
        read_dataset(tmp_path / "nope")
    with pytest.raises(DataFileError):
        read_poses(tmp_path / "nope.csv")
    with pytest.raises(DataFileError, match="parent"):
        write_dataset(tmp_path / "a" / "b", None)


def test_corrupt_row_names_file_and_line(tmp_path):
    p = tmp_path / "tracks.csv"
    p.write_text("frame_id,track_id,u,v,d\n0,1,1.0,2.0,3.0\n0,2,x,2.0,3.0\n")
    with pytest.raises(ParseError) as exc:
        read_tracks(p)
    assert "tracks.csv" in str(exc.value) and ":3" in str(exc.value)
    p.write_text("frame_id,track_id,u,v,d\n0,1,1.0,2.0\n")
    with pytest.raises(ParseError, match=":2"):
        read_tracks(p)
    p.write_text("bad,header\n")
    with pytest.raises(ParseError, match=":1"):
        read_tracks(p)


def test_track_table_queries():
    t = TrackTable([1, 0, 0, 1], [5, 5, 7, 9], np.arange(12.0).reshape(4, 3))
    assert t.frames() == [0, 1]
    ids, Ya, Yb = t.shared(0, 1)
    assert ids.tolist() == [5]
    np.testing.assert_array_equal(Ya[0], [3.0, 4.0, 5.0])
    np.testing.assert_array_equal(Yb[0], [0.0, 1.0, 2.0])
    assert len(t.drop_singletons()) == 2
    assert len(t.frame(42)[0]) == 0
    with pytest.raises(ValueError):
        TrackTable([0, 0], [1, 1], np.ones((2, 3)))
