"""
Tests for the camera model and feature transport:
- Intrinsics validation and level scaling
- project/backproject round trip and error cases
- Bilinear sampling and 2D warping
- kNN, IDW interpolation and 3D warping
- Furthest-point sampling
"""
import numpy as np
import pytest

from rpeflow.errors import ConfigError, EmptySetError, GeometryError
from rpeflow.geometry import (
    CameraIntrinsics,
    PointSet,
    backproject,
    bilinear_sample,
    furthest_point_sample,
    idw_weights,
    interpolate_idw,
    knn,
    pixel_grid,
    project,
    scatter_interpolate,
    warp2d,
    warp3d,
)
from rpeflow.tensor import Tensor


@pytest.fixture
def cam():
    return CameraIntrinsics.centered(20.0, 16, 12)


def test_principal_point_must_lie_in_image():
    with pytest.raises(GeometryError):
        CameraIntrinsics(f=10.0, cx=20.0, cy=1.0, width=16, height=12)


def test_scaled_intrinsics_halve_per_level(cam):
    s = cam.scaled(2)
    assert (s.f, s.cx, s.cy, s.width, s.height) == (5.0, 2.0, 1.5, 4, 3)


def test_project_backproject_round_trip(cam):
    rng = np.random.default_rng(1)
    depth = rng.uniform(1.0, 5.0, (12, 16))
    points = backproject(depth, cam)
    uv = project(points, cam).values
    rows, cols = points.pixels[:, 0], points.pixels[:, 1]
    np.testing.assert_allclose(uv[:, 0], cols, atol=1e-9)
    np.testing.assert_allclose(uv[:, 1], rows, atol=1e-9)
    np.testing.assert_allclose(points.positions[:, 2], depth.ravel())


def test_backproject_respects_mask(cam):
    depth = np.ones((12, 16))
    depth[0, 0] = -1.0
    mask = np.zeros((12, 16), dtype=bool)
    mask[:2, :2] = True
    points = backproject(depth, cam, mask)
    assert len(points) == 3


def test_backproject_empty_raises(cam):
    with pytest.raises(EmptySetError):
        backproject(np.zeros((12, 16)), cam)


def test_project_names_point_behind_camera(cam):
    with pytest.raises(GeometryError, match="point 1"):
        project(np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]), cam)


def test_pointset_rejects_nonpositive_depth():
    with pytest.raises(GeometryError):
        PointSet(np.array([[0.0, 0.0, 0.0]]))


def test_pixel_grid_row_major():
    grid = pixel_grid(2, 3)
    np.testing.assert_array_equal(grid[:4], [[0, 0], [1, 0], [2, 0], [0, 1]])


def test_bilinear_sample_reproduces_linear_field():
    h, w = 5, 6
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    feat = np.stack([2.0 * cols + rows, -cols], axis=-1).astype(np.float64)
    coords = np.array([[1.25, 2.5], [4.0, 0.0], [0.5, 3.75]])
    out = bilinear_sample(Tensor(feat), coords).values
    expected = np.stack([2.0 * coords[:, 0] + coords[:, 1], -coords[:, 0]], axis=1)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_bilinear_sample_clamps_outside():
    feat = np.arange(6, dtype=np.float64).reshape(2, 3, 1)
    out = bilinear_sample(Tensor(feat), np.array([[-5.0, -5.0]])).values
    assert out[0, 0] == feat[0, 0, 0]


def test_warp2d_with_true_flow_aligns_features():
    h, w = 8, 10
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    feat2 = np.stack([0.5 * cols + 0.25 * rows, np.ones_like(cols)], axis=-1).astype(np.float64)
    flow = np.zeros((h, w, 2))
    flow[..., 0], flow[..., 1] = 0.3, -0.4
    feat1 = np.stack([0.5 * (cols + 0.3) + 0.25 * (rows - 0.4), np.ones_like(cols)], axis=-1)
    warped = warp2d(Tensor(feat2), Tensor(flow)).values
    interior = (slice(1, h - 1), slice(0, w - 1))
    assert np.abs(warped[interior] - feat1[interior]).max() < 1e-3


def test_zero_flow_warp_is_identity():
    feat = np.random.default_rng(0).standard_normal((4, 5, 3))
    np.testing.assert_allclose(warp2d(Tensor(feat), Tensor(np.zeros((4, 5, 2)))).values, feat, atol=1e-12)


def test_knn_clips_k_to_reference_size():
    ref = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    idx, dist = knn(np.array([[0.1, 0.0, 0.0]]), ref, 5)
    assert idx.shape == (1, 2)
    assert idx[0, 0] == 0
    assert dist[0, 0] == pytest.approx(0.1)


def test_knn_empty_reference_raises():
    with pytest.raises(EmptySetError):
        knn(np.zeros((1, 3)), np.zeros((0, 3)), 3)


def test_idw_weights_normalized():
    rng = np.random.default_rng(2)
    ref = rng.standard_normal((10, 3))
    query = rng.standard_normal((4, 3))
    idx, _ = knn(query, ref, 3)
    w = idw_weights(query, ref, idx).values
    np.testing.assert_allclose(w.sum(axis=1), np.ones(4))


def test_interpolate_idw_at_source_points_is_exact():
    rng = np.random.default_rng(3)
    src = rng.standard_normal((6, 3))
    values = rng.standard_normal((6, 2))
    out = interpolate_idw(Tensor(values), src, src, k=3).values
    np.testing.assert_allclose(out, values, atol=1e-6)


def test_warp3d_with_true_sceneflow_recovers_features():
    rng = np.random.default_rng(4)
    pos1 = rng.standard_normal((8, 3))
    sf = rng.standard_normal((8, 3)) * 0.1
    pos2 = pos1 + sf
    feat2 = rng.standard_normal((8, 4))
    out = warp3d(Tensor(feat2), pos2, pos1, Tensor(sf), k=3).values
    np.testing.assert_allclose(out, feat2, atol=1e-6)


def test_scatter_interpolate_normalizes_weights():
    # a single point at a pixel centre gives that pixel its feature exactly
    cam = CameraIntrinsics.centered(16.0, 16, 12)
    z = 2.0
    pos = np.array([[(3 - cam.cx) * z / cam.f, (4 - cam.cy) * z / cam.f, z]])
    grid = scatter_interpolate(PointSet(pos, Tensor([[1.5, -2.0]])), cam, (12, 16)).values
    np.testing.assert_allclose(grid[4, 3], [1.5, -2.0], atol=1e-9)
    assert np.count_nonzero(np.abs(grid).sum(axis=-1)) == 1


def test_furthest_point_sample():
    pts = np.array([[0.0, 0, 0], [0.1, 0, 0], [5.0, 0, 0], [2.5, 0, 0]])
    idx = furthest_point_sample(pts, 3)
    np.testing.assert_array_equal(idx, [0, 2, 3])
    with pytest.raises(ConfigError):
        furthest_point_sample(pts, 5)
