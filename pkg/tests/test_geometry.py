import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nrfusion.geometry import (BoundaryError, CameraIntrinsics, GeometryError, RgbdFrame, backproject,
                               bilinear_sample, bilinear_sample_many, distance_map, frame_to_mesh,
                               image_gradient, normal_map, project, project_points, read_depth_png,
                               write_depth_png)

K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def test_intrinsics_validation(tmp_path):
    with pytest.raises(GeometryError):
        CameraIntrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(GeometryError):
        CameraIntrinsics(1.0, 1.0, 4.0, 1.0, 4, 4)
    K.save(tmp_path / "k.txt")
    assert CameraIntrinsics.load(tmp_path / "k.txt") == K


def test_project_examples():
    assert np.allclose(project([0, 0, 1], K), [320, 240])
    assert np.allclose(project([0.1, 0, 1], K), [370, 240])
    with pytest.raises(GeometryError):
        project([0, 0, -1], K)
    uv, front = project_points(np.array([[0, 0, -1.0], [0, 0, 1.0]]), K)
    assert not front[0] and np.isnan(uv[0]).all() and front[1]


def test_backproject_examples():
    assert np.allclose(backproject((320, 240), 2.0, K), [0, 0, 2])
    assert np.allclose(backproject((370, 240), 1.0, K), [0.1, 0, 1])
    with pytest.raises(GeometryError):
        backproject((10, 10), 0.0, K)


@settings(max_examples=200, deadline=None)
@given(u=st.floats(0, 639), v=st.floats(0, 479), d=st.floats(0.05, 20))
def test_project_backproject_round_trip(u, v, d):
    assert np.allclose(project(backproject((u, v), d, K), K), [u, v], atol=1e-6)


def test_frame_validation():
    small = CameraIntrinsics(10.0, 10.0, 1.5, 1.5, 4, 4)
    with pytest.raises(GeometryError):
        RgbdFrame(None, -np.ones((4, 4)), small)
    with pytest.raises(GeometryError):
        RgbdFrame(None, np.full((4, 4), np.nan), small)
    with pytest.raises(GeometryError):
        RgbdFrame(None, np.ones((3, 4)), small)
    with pytest.raises(GeometryError):
        RgbdFrame(None, np.ones((4, 4)), small, mask=np.ones((2, 2), bool))


def test_frame_to_mesh_plane():
    small = CameraIntrinsics(100.0, 100.0, 0.5, 0.5, 2, 2)
    mesh = frame_to_mesh(RgbdFrame(None, np.ones((2, 2)), small, np.ones((2, 2), bool)))
    assert len(mesh) == 4 and len(mesh.triangles) == 2
    assert np.allclose(mesh.normals, [0, 0, -1])
    assert np.allclose(np.linalg.norm(mesh.normals, axis=1), 1.0, atol=1e-6)
    with pytest.raises(GeometryError):
        frame_to_mesh(RgbdFrame(None, np.zeros((2, 2)), small))


def test_frame_to_mesh_skips_depth_jumps():
    small = CameraIntrinsics(10.0, 10.0, 0.5, 0.5, 2, 2)
    depth = np.array([[1.0, 3.0], [3.0, 3.0]])
    mesh = frame_to_mesh(RgbdFrame(None, depth, small), max_edge=0.1)
    assert len(mesh.triangles) == 0 and len(mesh) == 4


def test_normal_map_plane_faces_camera():
    small = CameraIntrinsics(50.0, 50.0, 9.5, 9.5, 20, 20)
    n = normal_map(np.full((20, 20), 1.5), small)
    assert np.allclose(n[1:-1, 1:-1], [0, 0, -1])
    assert np.isnan(n[0]).all()


def test_distance_map_examples():
    m = np.zeros((12, 12), bool)
    m[5, 5] = True
    d = distance_map(m).values
    assert d[8, 5] == 3.0            # (u, v) = (5, 8)
    assert d[9, 8] == 5.0            # (u, v) = (8, 9)
    assert not distance_map(np.ones((3, 3), bool)).values.any()
    with pytest.raises(GeometryError):
        distance_map(np.zeros((3, 3), bool))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), h=st.integers(2, 24), w=st.integers(2, 24))
def test_distance_map_matches_brute_force(seed, h, w):
    rng = np.random.default_rng(seed)
    mask = rng.random((h, w)) < 0.1
    mask[rng.integers(h), rng.integers(w)] = True
    got = distance_map(mask).values
    ys, xs = np.nonzero(mask)
    for r in range(h):
        for c in range(w):
            want = np.min(np.hypot(ys - r, xs - c))
            assert got[r, c] == pytest.approx(want, abs=1e-12)


def test_image_gradient_examples():
    assert not image_gradient(np.full((5, 6), 0.3)).any()
    ramp = np.tile(np.arange(6.0), (5, 1))
    g = image_gradient(ramp)
    assert np.allclose(g[1:-1, 1:-1], [1.0, 0.0])
    assert image_gradient(ramp**2)[2, 3, 0] == 6.0


def test_bilinear_examples():
    img = np.arange(12.0).reshape(3, 4) ** 1.5
    assert bilinear_sample(img, (2, 1))[0] == img[1, 2]
    assert bilinear_sample(np.array([[0.0, 1.0]]).repeat(2, 0), (0.5, 0.0))[0] == 0.5
    p = (1.3, 0.6)
    a, b = 0.3, 0.6
    want = (1 - a) * (1 - b) * img[0, 1] + a * (1 - b) * img[0, 2] + (1 - a) * b * img[1, 1] + a * b * img[1, 2]
    assert bilinear_sample(img, p)[0] == pytest.approx(want, abs=1e-12)
    with pytest.raises(BoundaryError):
        bilinear_sample(img, (3.5, 0))


@settings(max_examples=50, deadline=None)
@given(u=st.floats(1, 28), v=st.floats(1, 18))
def test_bilinear_derivative_matches_finite_difference(u, v):
    yy, xx = np.mgrid[0:20, 0:30].astype(float)
    img = 0.3 * xx + 0.1 * yy + 2.0  # affine, hence smooth under bilinear sampling
    _, grad = bilinear_sample(img, (u, v))
    h = 1e-3
    fd_u = (bilinear_sample(img, (u + h, v))[0] - bilinear_sample(img, (u - h, v))[0]) / (2 * h)
    fd_v = (bilinear_sample(img, (u, v + h))[0] - bilinear_sample(img, (u, v - h))[0]) / (2 * h)
    assert np.allclose(grad, [fd_u, fd_v], rtol=1e-4)


def test_bilinear_clamp_reads_border():
    img = np.arange(6.0).reshape(2, 3)
    vals, du, dv, _ = bilinear_sample_many(img, np.array([[-5.0, 0.0], [10.0, 1.0]]), clamp=True)
    assert np.allclose(vals, [img[0, 0], img[1, 2]])
    assert np.allclose(du, 0.0)


def test_depth_png_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    depth = rng.uniform(0.3, 4.0, (20, 30))
    depth[0, 0] = 0.0
    write_depth_png(tmp_path / "d.png", depth)
    back = read_depth_png(tmp_path / "d.png")
    assert np.max(np.abs(back - depth)) <= 0.0005 + 1e-12
    assert back[0, 0] == 0.0
