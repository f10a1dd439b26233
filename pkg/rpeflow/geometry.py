"""
Pinhole camera model and 2D/3D feature transport.

Pixel (u, v) = (column, row); integer coordinates are pixel centers.
"""
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.spatial import cKDTree

from rpeflow.errors import ConfigError, EmptySetError, GeometryError, ShapeError
from rpeflow.tensor import (
    Tensor,
    as_tensor,
    clip,
    matmul,
    norm,
    reshape,
    segment_sum,
    stack,
    sum_,
    take,
)

IDW_EPS = 1e-8


class CameraIntrinsics(BaseModel):
    """Pinhole intrinsics in pixels."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    f: float = Field(gt=0)
    cx: float
    cy: float
    width: int = Field(gt=0)
    height: int = Field(gt=0)

    @model_validator(mode="after")
    def _check_principal_point(self) -> "CameraIntrinsics":
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}×{self.height}"
            )
        return self

    @classmethod
    def centered(cls, f: float, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics with the principal point at (W/2, H/2)."""
        return cls(f=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height)

    def scaled(self, level: int) -> "CameraIntrinsics":
        """Intrinsics of a feature map downsampled by 2**level (pixel i maps to 2**level · i)."""
        factor = 2 ** level
        return CameraIntrinsics(
            f=self.f / factor,
            cx=self.cx / factor,
            cy=self.cy / factor,
            width=max(self.width // factor, 1),
            height=max(self.height // factor, 1),
        )


@dataclass
class PointSet:
    """
    Points in the camera frame (z forward) with optional per-point features.

    Attributes:
        positions: (N, 3) array in scene units
        features: Optional (N, C) tensor
        pixels: Optional (N, 2) integer (row, col) of the pixel each point came from
    """

    positions: np.ndarray
    features: Optional[Tensor] = None
    pixels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ShapeError(f"positions must be N×3, got {self.positions.shape}")
        bad = np.flatnonzero(~(self.positions[:, 2] > 0))
        if bad.size:
            i = int(bad[0])
            raise GeometryError(f"point {i} has p_z={self.positions[i, 2]} <= 0 (behind camera)")
        if self.features is not None and self.features.shape[0] != len(self.positions):
            raise ShapeError(
                f"feature rows {self.features.shape[0]} do not match {len(self.positions)} points"
            )

    def __len__(self) -> int:
        return len(self.positions)

    def with_features(self, features: Tensor) -> "PointSet":
        return PointSet(self.positions, features, self.pixels)

    def subset(self, indices: np.ndarray) -> "PointSet":
        features = take(self.features, indices) if self.features is not None else None
        pixels = self.pixels[indices] if self.pixels is not None else None
        return PointSet(self.positions[indices], features, pixels)


PositionsLike = Union[PointSet, Tensor, np.ndarray]


def _positions(points: PositionsLike) -> Tensor:
    if isinstance(points, PointSet):
        return as_tensor(points.positions)
    return as_tensor(points)


def project(points: PositionsLike, cam: CameraIntrinsics) -> Tensor:
    """
    Project camera-frame points to pixels: u = f·x/z + cx, v = f·y/z + cy.

    Args:
        points: PointSet or (N, 3) positions (differentiable when a Tensor)
        cam: Camera intrinsics

    Returns:
        (N, 2) pixel coordinates (u, v)

    Raises:
        GeometryError: naming the first point with p_z <= 0
    """
    xyz = _positions(points)
    if xyz.ndim != 2 or xyz.shape[1] != 3:
        raise ShapeError(f"positions must be N×3, got {xyz.shape}")
    bad = np.flatnonzero(~(xyz.values[:, 2] > 0))
    if bad.size:
        i = int(bad[0])
        raise GeometryError(f"cannot project point {i}: p_z={xyz.values[i, 2]} <= 0")
    z = xyz[:, 2]
    u = xyz[:, 0] / z * cam.f + cam.cx
    v = xyz[:, 1] / z * cam.f + cam.cy
    return stack([u, v], axis=1)


def backproject(depth: np.ndarray, cam: CameraIntrinsics, mask: Optional[np.ndarray] = None) -> PointSet:
    """
    Lift every valid pixel of a depth map to a 3D point (row-major order).

    Args:
        depth: (H, W) depth map
        cam: Camera intrinsics
        mask: Optional boolean validity mask; non-positive or non-finite depths are always invalid

    Returns:
        PointSet with ``pixels`` holding each point's (row, col)

    Raises:
        EmptySetError: when no pixel is valid
    """
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(depth) & (depth > 0)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    rows, cols = np.nonzero(valid)
    if rows.size == 0:
        raise EmptySetError("depth map has no valid pixels")
    z = depth[rows, cols]
    x = (cols - cam.cx) * z / cam.f
    y = (rows - cam.cy) * z / cam.f
    return PointSet(np.stack([x, y, z], axis=1), pixels=np.stack([rows, cols], axis=1))


def pixel_grid(height: int, width: int) -> np.ndarray:
    """(H·W, 2) array of (u, v) pixel-center coordinates in row-major order."""
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([cols.ravel(), rows.ravel()], axis=1).astype(np.float64)


def _corner_indices(coord: np.ndarray, extent: int) -> Tuple[np.ndarray, np.ndarray]:
    lo = np.clip(np.floor(coord), 0, max(extent - 2, 0)).astype(np.int64)
    hi = np.minimum(lo + 1, extent - 1)
    return lo, hi


def bilinear_sample(feat: Tensor, coords: Union[Tensor, np.ndarray]) -> Tensor:
    """
    Sample an (H, W, C) map at real-valued pixel coordinates.

    Coordinates outside [0, W-1] × [0, H-1] are clamped to the border.
    Differentiable with respect to both ``feat`` and ``coords``.

    Args:
        feat: (H, W, C) feature map
        coords: (N, 2) pixel coordinates (u, v)

    Returns:
        (N, C) sampled rows
    """
    feat, coords = as_tensor(feat), as_tensor(coords)
    if feat.ndim != 3:
        raise ShapeError(f"feature map must be H×W×C, got {feat.shape}")
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"coordinates must be N×2, got {coords.shape}")
    h, w, c = feat.shape
    n = coords.shape[0]
    u = clip(coords[:, 0], 0.0, float(w - 1))
    v = clip(coords[:, 1], 0.0, float(h - 1))
    u0, u1 = _corner_indices(u.values, w)
    v0, v1 = _corner_indices(v.values, h)
    a = reshape(u - u0.astype(u.dtype), (n, 1))
    b = reshape(v - v0.astype(v.dtype), (n, 1))
    flat = reshape(feat, (h * w, c))
    f00 = take(flat, v0 * w + u0)
    f01 = take(flat, v0 * w + u1)
    f10 = take(flat, v1 * w + u0)
    f11 = take(flat, v1 * w + u1)
    return f00 * ((1.0 - a) * (1.0 - b)) + f01 * (a * (1.0 - b)) + f10 * ((1.0 - a) * b) + f11 * (a * b)


def splat_weights(uv: np.ndarray, height: int, width: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Bilinear splat of points onto their four neighboring pixels.

    Returns:
        (pixel index, point index, weight) triples for corners inside the image
        with positive weight
    """
    uv = np.asarray(uv, dtype=np.float64)
    u0 = np.floor(uv[:, 0]).astype(np.int64)
    v0 = np.floor(uv[:, 1]).astype(np.int64)
    a = uv[:, 0] - u0
    b = uv[:, 1] - v0
    point = np.arange(len(uv))
    pix, pts, wts = [], [], []
    for du, dv, wt in (
        (0, 0, (1 - a) * (1 - b)),
        (1, 0, a * (1 - b)),
        (0, 1, (1 - a) * b),
        (1, 1, a * b),
    ):
        cu, cv = u0 + du, v0 + dv
        keep = (cu >= 0) & (cu < width) & (cv >= 0) & (cv < height) & (wt > 0)
        pix.append(cv[keep] * width + cu[keep])
        pts.append(point[keep])
        wts.append(wt[keep])
    return np.concatenate(pix), np.concatenate(pts), np.concatenate(wts)


def scatter_interpolate(
    points: PointSet,
    cam: CameraIntrinsics,
    out_shape: Tuple[int, int],
    mix: Optional[Tensor] = None,
) -> Tensor:
    """
    Densify point features onto the image plane.

    Each point splats its feature bilinearly into its four neighbors; every pixel
    is normalized by its received weight (zero-weight pixels stay zero), then an
    optional learnable 1×1 mixing ``mix`` (C × C') is applied.

    Args:
        points: PointSet carrying (N, C) features
        cam: Intrinsics of the target plane
        out_shape: (H, W) of the target plane
        mix: Optional (C, C') mixing weights

    Returns:
        (H, W, C') dense map
    """
    if points.features is None:
        raise ShapeError("scatter_interpolate needs point features")
    h, w = out_shape
    feats = points.features
    c = feats.shape[1]
    if len(points) == 0:
        dense = as_tensor(np.zeros((h * w, c)))
    else:
        uv = project(points.positions, cam).values
        pix, pts, wts = splat_weights(uv, h, w)
        total = np.bincount(pix, weights=wts, minlength=h * w)
        inv = np.divide(1.0, total, out=np.zeros_like(total), where=total > 0)
        scaled = take(feats, pts) * wts.reshape(-1, 1).astype(feats.dtype)
        dense = segment_sum(scaled, pix, h * w) * inv.reshape(-1, 1).astype(feats.dtype)
    if mix is not None:
        if mix.shape[0] != c:
            raise ShapeError(f"mixing weights expect {mix.shape[0]} channels, features have {c}")
        dense = matmul(dense, mix)
    return reshape(dense, (h, w, dense.shape[1]))


def warp2d(feat2: Tensor, flow: Tensor) -> Tensor:
    """
    Backward warp: output(x) = bilinear_sample(feat2, x + flow(x)).

    Args:
        feat2: (H, W, C) second-frame features
        flow: (H, W, 2) flow from frame 1 to frame 2 in pixels

    Returns:
        (H, W, C) warped features
    """
    feat2, flow = as_tensor(feat2), as_tensor(flow)
    h, w, c = feat2.shape
    if flow.shape != (h, w, 2):
        raise ShapeError(f"flow shape {flow.shape} does not match features {feat2.shape}")
    coords = as_tensor(pixel_grid(h, w)) + reshape(flow, (h * w, 2))
    return reshape(bilinear_sample(feat2, coords), (h, w, c))


def knn(query: np.ndarray, ref: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    k nearest reference points of each query point.

    Returns:
        (indices, distances), both (Q, k)
    """
    ref = np.asarray(ref, dtype=np.float64)
    if len(ref) == 0:
        raise EmptySetError("nearest-neighbor search over an empty reference set")
    k = min(k, len(ref))
    dist, idx = cKDTree(ref).query(np.asarray(query, dtype=np.float64), k=k)
    return np.asarray(idx).reshape(-1, k), np.asarray(dist).reshape(-1, k)


def idw_weights(query: Union[Tensor, np.ndarray], ref: np.ndarray, idx: np.ndarray) -> Tensor:
    """
    Normalized inverse-distance weights 1/(d + 1e-8) over the neighbor indices.

    Differentiable with respect to ``query`` when it is a tensor.
    """
    query = as_tensor(query)
    q, k = idx.shape
    neighbors = np.asarray(ref, dtype=query.dtype)[idx]  # (Q, k, 3)
    d = norm(reshape(query, (q, 1, 3)) - neighbors, axis=-1)
    inv = 1.0 / (d + IDW_EPS)
    return inv / sum_(inv, axis=1, keepdims=True)


def interpolate_idw(values: Tensor, src: np.ndarray, dst: np.ndarray, k: int = 3) -> Tensor:
    """
    Interpolate per-point values from ``src`` points to ``dst`` points by k-NN IDW.

    Args:
        values: (M, C) values at ``src``
        src: (M, 3) source positions
        dst: (N, 3) destination positions
        k: Neighbor count

    Returns:
        (N, C) interpolated values
    """
    values = as_tensor(values)
    idx, _ = knn(dst, src, k)
    weights = idw_weights(np.asarray(dst, dtype=np.float64), src, idx)
    gathered = take(values, idx)  # (N, k, C)
    return sum_(gathered * reshape(weights, weights.shape + (1,)), axis=1)


def warp3d(
    feat2: Tensor,
    pos2: np.ndarray,
    pos1: np.ndarray,
    sceneflow: Tensor,
    k: int = 3,
) -> Tensor:
    """
    Gather frame-2 point features at frame-1 points displaced by their scene flow.

    Each query pos1 + s gathers its k nearest frame-2 points with normalized
    inverse-distance weights.

    Args:
        feat2: (M, C) frame-2 point features
        pos2: (M, 3) frame-2 positions
        pos1: (N, 3) frame-1 positions
        sceneflow: (N, 3) current scene flow of the frame-1 points
        k: Neighbor count

    Returns:
        (N, C) warped features

    Raises:
        GeometryError: when frame 2 has no points
    """
    feat2, sceneflow = as_tensor(feat2), as_tensor(sceneflow)
    pos1 = np.asarray(pos1, dtype=np.float64)
    if len(pos2) == 0:
        raise EmptySetError("warp3d needs at least one frame-2 point")
    if sceneflow.shape != (len(pos1), 3):
        raise ShapeError(f"scene flow shape {sceneflow.shape} does not match {len(pos1)} points")
    if feat2.shape[0] != len(pos2):
        raise ShapeError(f"frame-2 features have {feat2.shape[0]} rows for {len(pos2)} points")
    query = as_tensor(pos1.astype(sceneflow.dtype)) + sceneflow
    idx, _ = knn(query.values, pos2, k)
    weights = idw_weights(query, pos2, idx)
    gathered = take(feat2, idx)
    return sum_(gathered * reshape(weights, weights.shape + (1,)), axis=1)


def furthest_point_sample(positions: np.ndarray, count: int) -> np.ndarray:
    """
    Greedy furthest-point sampling starting from point 0.

    Returns:
        (count,) indices into ``positions``
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    if count > n or count < 1:
        raise ConfigError(f"cannot sample {count} points from {n}")
    indices = np.zeros(count, dtype=np.int64)
    dist = np.full(n, np.inf)
    far = 0
    for i in range(count):
        indices[i] = far
        d = ((positions - positions[far]) ** 2).sum(axis=1)
        dist = np.minimum(dist, d)
        far = int(np.argmax(dist))
    return indices
