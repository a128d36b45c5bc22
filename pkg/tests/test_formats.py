import numpy as np
import pytest

from mvsweep.depth import DepthMap
from mvsweep.errors import ParseError
from mvsweep.formats import (
    load_camera_sized,
    load_depth,
    load_flow,
    load_image,
    load_ply,
    write_camera_sized,
    write_depth,
    write_depth_preview,
    write_flow,
    write_image,
    write_ply,
    read_keyvalues,
    write_keyvalues,
)
from mvsweep.fusion import PointCloud
from mvsweep.geometry import CameraIntrinsics, Pose
from mvsweep.matching import FlowField, ImageBuffer

from conftest import DEFAULT_K, random_pose


def test_image_roundtrip_16bit(tmp_path):
    rng = np.random.default_rng(0)
    quantized = np.round(rng.random((24, 32)) * 65535) / 65535.0
    img = ImageBuffer(quantized)
    path = tmp_path / "img.png"
    write_image(path, img)
    back = load_image(path)
    assert np.abs(back.pixels - img.pixels).max() < 1e-12


def test_image_roundtrip_8bit_rgb(tmp_path):
    rng = np.random.default_rng(1)
    quantized = np.round(rng.random((20, 20, 3)) * 255) / 255.0
    path = tmp_path / "img8.png"
    write_image(path, ImageBuffer(quantized), bitdepth=8)
    back = load_image(path)
    assert back.channels == 3
    assert np.abs(back.pixels - quantized).max() < 1e-12


def test_camera_roundtrip_full_precision(tmp_path):
    rng = np.random.default_rng(2)
    pose = random_pose(rng, rot_scale=0.8)
    path = tmp_path / "cam0.txt"
    write_camera_sized(path, DEFAULT_K, pose)
    K, back = load_camera_sized(path)
    assert (K.fx, K.fy, K.cx, K.cy) == (DEFAULT_K.fx, DEFAULT_K.fy, DEFAULT_K.cx, DEFAULT_K.cy)
    assert (K.width, K.height) == (DEFAULT_K.width, DEFAULT_K.height)
    # 17 significant digits reproduce doubles exactly
    assert np.abs(back.rotation - pose.rotation).max() == 0.0
    assert np.abs(back.translation - pose.translation).max() == 0.0


def test_camera_rejects_malformed(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("1 2 3\n4 5 6\n")
    with pytest.raises(ParseError):
        load_camera_sized(path)
    path.write_text(" ".join(["x"] * 21))
    with pytest.raises(ParseError):
        load_camera_sized(path)


def test_flow_roundtrip_with_mask(tmp_path):
    rng = np.random.default_rng(3)
    flow = rng.normal(size=(12, 17, 2)).astype(np.float32).astype(np.float64)
    valid = rng.random((12, 17)) > 0.3
    field = FlowField(flow, valid)
    path = tmp_path / "f.flo"
    write_flow(path, field)
    back = load_flow(path)
    assert np.array_equal(back.valid, field.valid)
    assert np.array_equal(back.flow, field.flow)


def test_flow_truncated_payload(tmp_path):
    path = tmp_path / "f.flo"
    field = FlowField(np.zeros((4, 4, 2)), np.ones((4, 4), bool))
    write_flow(path, field)
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(ParseError) as err:
        load_flow(path)
    assert "expected" in str(err.value)


def test_flow_bad_magic(tmp_path):
    path = tmp_path / "f.flo"
    path.write_bytes(b"\x00" * 16)
    with pytest.raises(ParseError):
        load_flow(path)


def test_depth_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    depth = rng.uniform(2.0, 8.0, size=(10, 14)).astype(np.float32).astype(np.float64)
    valid = rng.random((10, 14)) > 0.25
    dm = DepthMap(np.where(valid, depth, 0.0), valid, d_min=1.0, d_max=9.0, num_planes=32)
    path = tmp_path / "d.pfm"
    write_depth(path, dm)
    back = load_depth(path)
    assert np.array_equal(back.valid, dm.valid)
    assert np.array_equal(back.depth[back.valid], dm.depth[dm.valid])
    assert back.num_planes == 32
    assert back.d_min == 1.0 and back.d_max == 9.0


def test_depth_truncated(tmp_path):
    path = tmp_path / "d.pfm"
    dm = DepthMap(np.full((6, 6), 3.0), np.ones((6, 6), bool), d_min=1.0, d_max=4.0, num_planes=2)
    write_depth(path, dm)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(ParseError) as err:
        load_depth(path)
    assert "expected" in str(err.value)


def test_depth_preview_written(tmp_path):
    dm = DepthMap(
        np.linspace(1, 2, 256).reshape(16, 16),
        np.ones((16, 16), bool),
        d_min=1.0,
        d_max=2.0,
        num_planes=2,
    )
    path = tmp_path / "prev.png"
    write_depth_preview(path, dm)
    img = load_image(path)
    assert img.pixels.shape == (16, 16, 3)


def test_ply_roundtrip_binary(tmp_path):
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(50, 3)).astype(np.float32).astype(np.float64)
    cloud = PointCloud(pts, rng.integers(2, 9, size=50), np.zeros(50))
    path = tmp_path / "c.ply"
    write_ply(path, cloud)
    back = load_ply(path)
    assert np.array_equal(back.points, cloud.points)
    assert np.array_equal(back.support_counts, cloud.support_counts)


def test_ply_roundtrip_ascii(tmp_path):
    pts = np.array([[1.0, 2.0, 3.0], [-4.5, 0.25, 9.0]])
    cloud = PointCloud(pts, np.array([3, 4]), np.zeros(2))
    path = tmp_path / "c_ascii.ply"
    write_ply(path, cloud, ascii_mode=True)
    back = load_ply(path)
    assert np.abs(back.points - pts).max() < 1e-6
    assert np.array_equal(back.support_counts, cloud.support_counts)


def test_ply_truncated(tmp_path):
    cloud = PointCloud(np.zeros((4, 3)), np.full(4, 3), np.zeros(4))
    path = tmp_path / "c.ply"
    write_ply(path, cloud)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ParseError):
        load_ply(path)


def test_keyvalues_roundtrip(tmp_path):
    path = tmp_path / "kv.txt"
    write_keyvalues(path, {"alpha": 1, "beta": "x=y"})
    back = read_keyvalues(path)
    assert back == {"alpha": "1", "beta": "x=y"}
    path.write_text("# comment\nkey = value \n\n")
    assert read_keyvalues(path) == {"key": "value"}
    path.write_text("nonsense line\n")
    with pytest.raises(ParseError):
        read_keyvalues(path)
