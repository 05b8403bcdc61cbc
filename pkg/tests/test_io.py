import numpy as np
import pytest

from gsgen import io
from gsgen.gaussians import blob_scene


@pytest.mark.parametrize("binary", [True, False])
def test_gaussian_ply_round_trip(tmp_path, binary):
    cloud = blob_scene(n_per_blob=5)
    path = tmp_path / "g.ply"
    io.write_gaussians(path, cloud, binary=binary)
    assert io.is_gaussian_ply(path)
    back = io.read_gaussians(path)
    for name, arr in cloud.params().items():
        np.testing.assert_array_equal(getattr(back, name), arr)


@pytest.mark.parametrize("binary", [True, False])
def test_point_ply_with_colors(tmp_path, binary):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(30, 3)).astype(np.float32)
    cols = rng.integers(0, 256, (30, 3)) / 255.0
    path = tmp_path / "p.ply"
    io.write_points(path, pts, cols, binary=binary)
    back, back_cols = io.read_points(path)
    np.testing.assert_array_equal(back, pts)
    np.testing.assert_allclose(back_cols, cols)
    assert not io.is_gaussian_ply(path)


def test_ascii_ply_by_hand(tmp_path):
    text = "ply\nformat ascii 1.0\ncomment hi\nelement vertex 2\nproperty float x\nproperty float y\n" \
           "property float z\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n1 2 3\n4 5 6\n"
    (tmp_path / "a.ply").write_text(text)
    pts, cols = io.read_points(tmp_path / "a.ply")
    np.testing.assert_array_equal(pts, [[1, 2, 3], [4, 5, 6]])
    assert cols is None


def test_missing_properties(tmp_path):
    io.write_points(tmp_path / "p.ply", np.zeros((2, 3)))
    with pytest.raises(io.PlyError):
        io.read_gaussians(tmp_path / "p.ply")
    (tmp_path / "bad.ply").write_bytes(b"not a ply")
    with pytest.raises(io.PlyError):
        io.read_ply(tmp_path / "bad.ply")


def test_obj_fan_and_negative_indices(tmp_path):
    (tmp_path / "m.obj").write_text(
        "# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1/1/1 2/2/1 3/3/1 4/4/1\nf -4 -3 -2\n")
    v, f = io.read_obj(tmp_path / "m.obj")
    assert v.shape == (4, 3)
    np.testing.assert_array_equal(f, [[0, 1, 2], [0, 2, 3], [0, 1, 2]])


def test_png_and_raw(tmp_path):
    img = np.linspace(0, 1, 4 * 5 * 3).reshape(4, 5, 3)
    io.write_png(tmp_path / "a.png", img)
    back = io.read_png(tmp_path / "a.png")
    assert back.shape == (4, 5, 3)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12
    depth = np.random.default_rng(0).uniform(size=(6, 7)).astype(np.float32)
    io.write_raw(tmp_path / "d.raw", depth)
    raw = (tmp_path / "d.raw").read_bytes()
    assert raw[:4] == b"GSRF" and len(raw) == 16 + 6 * 7 * 4
    np.testing.assert_array_equal(io.read_raw(tmp_path / "d.raw")[..., 0], depth)
