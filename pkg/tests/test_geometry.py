import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pointfold.geometry import (PlyError, PointCloud, Pose, denormalize, load_ply,
                                normalize, save_ply, subsample)


def rand_cloud(rng, n=50, scale=10.0):
    return PointCloud(rng.normal(0, scale, (n, 3)))


def test_pointcloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        PointCloud(np.full((4, 3), np.nan))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((4, 3)), world_scale=0.0)


def test_arrays_are_readonly():
    c = PointCloud(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        c.points[0, 0] = 1.0
    p = Pose(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        p.keypoints[0, 0] = 1.0


def test_to_world():
    c = PointCloud(np.ones((2, 3)), world_scale=2.0, world_offset=[1, 0, -1])
    np.testing.assert_array_equal(c.to_world(), [[3, 2, 1], [3, 2, 1]])


def test_normalize_centers_and_scales():
    rng = np.random.default_rng(0)
    cloud = rand_cloud(rng)
    pose = Pose(rng.normal(0, 10, (16, 3)))
    nc, npo = normalize(cloud, pose)
    center = pose.keypoints.mean(axis=0)
    # pose keypoints are centered
    np.testing.assert_allclose(npo.keypoints.mean(axis=0), 0, atol=1e-12)
    # max radius is exactly 1
    assert np.linalg.norm(nc.points, axis=1).max() == pytest.approx(1.0)
    # world transform undoes the normalization
    np.testing.assert_allclose(nc.to_world(), cloud.points, atol=1e-9)
    np.testing.assert_allclose(nc.world_offset, center, atol=1e-12)


def test_normalize_single_point_keeps_unit_scale():
    # one point sitting on the pose centroid: no extent to divide by,
    # scale stays 1 instead of raising
    pose = Pose(np.zeros((2, 3)))
    cloud = PointCloud(np.zeros((1, 3)))
    nc, _ = normalize(cloud, pose)
    assert nc.world_scale == 1.0


def test_normalize_degenerate_cloud_errors():
    pose = Pose(np.zeros((2, 3)))
    cloud = PointCloud(np.zeros((5, 3)))
    with pytest.raises(ValueError, match="zero extent"):
        normalize(cloud, pose)


def test_denormalize_round_trip():
    rng = np.random.default_rng(1)
    cloud = rand_cloud(rng)
    pose = Pose(rng.normal(0, 10, (4, 3)))
    nc, _ = normalize(cloud, pose)
    back = denormalize(nc)
    assert back.world_scale == 1.0
    np.testing.assert_allclose(back.points, cloud.points, atol=1e-9)


def test_subsample_deterministic_and_distinct():
    rng = np.random.default_rng(2)
    cloud = rand_cloud(rng, n=100)
    a = subsample(cloud, 30, seed=5)
    b = subsample(cloud, 30, seed=5)
    np.testing.assert_array_equal(a.points, b.points)
    assert a.n == 30
    # without replacement: all rows come from the source, no duplicates
    src = {tuple(p) for p in cloud.points}
    rows = [tuple(p) for p in a.points]
    assert set(rows) <= src and len(set(rows)) == 30
    with pytest.raises(ValueError):
        subsample(cloud, 101, seed=0)


def test_ply_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(3)
    cloud = PointCloud(rng.normal(0, 1, (64, 3)), world_scale=3.25,
                       world_offset=[0.5, -2.0, 100.0])
    p = tmp_path / "c.ply"
    save_ply(cloud, p)
    save_ply(load_ply(p), tmp_path / "c2.ply")
    assert p.read_bytes() == (tmp_path / "c2.ply").read_bytes()
    back = load_ply(p)
    assert back.world_scale == cloud.world_scale
    np.testing.assert_array_equal(back.world_offset, cloud.world_offset)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (7, 3), elements=st.floats(-1e3, 1e3)))
def test_ply_round_trip_values(pts):
    import io
    # 9 significant digits survive a write/parse cycle to ~1e-6 relative
    cloud = PointCloud(pts + np.arange(7)[:, None])  # avoid duplicate rows
    import tempfile, os
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "x.ply")
        save_ply(cloud, path)
        back = load_ply(path)
    np.testing.assert_allclose(back.points, cloud.points, rtol=1e-6, atol=1e-6)


def _write(tmp_path, text):
    p = tmp_path / "bad.ply"
    p.write_text(text)
    return p


def test_ply_errors_carry_line_numbers(tmp_path):
    with pytest.raises(PlyError, match="1"):
        load_ply(_write(tmp_path, "not a ply\n"))
    with pytest.raises(PlyError):
        load_ply(_write(tmp_path, "ply\nformat ascii 1.0\nelement vertex 2\n"
                                  "property float x\nproperty float y\n"
                                  "property float z\nend_header\n0 0 0\n"))
    with pytest.raises(PlyError):
        load_ply(_write(tmp_path, "ply\nformat ascii 1.0\nelement vertex 1\n"
                                  "property int x\nproperty float y\n"
                                  "property float z\nend_header\n0 0 0\n"))
    with pytest.raises(PlyError):  # no end_header
        load_ply(_write(tmp_path, "ply\nformat ascii 1.0\nelement vertex 1\n"))
