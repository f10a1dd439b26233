"""
Cross-modal channel-attention fusion for the 2D (grid) and 3D (point) branches.

A fusion block takes a primary feature X and auxiliary features on the same
support, aligns the auxiliaries to X's channel count with a 1×1 mixing, and
fuses them with single-head channel attention:

    Q = W_q·LN(X), K = W_k·LN(Y), V = W_v·LN(Y)      (M×C each)
    A = softmax(QᵀK / τ, axis=0)                       (C×C, columns sum to 1)
    X' = W_p·(V·A) + X

The ``concat`` variant replaces the block by X' = W_c·[X, aux...] + b.
"""
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from rpeflow.errors import ConfigError, ShapeError
from rpeflow.geometry import CameraIntrinsics, PointSet, bilinear_sample, project, scatter_interpolate
from rpeflow.nn import ParameterStore, add_linear, he_normal, linear, ones, zeros
from rpeflow.tensor import (
    Tensor,
    as_tensor,
    concat,
    conv2d,
    exp,
    get_default_dtype,
    layernorm,
    matmul,
    reshape,
    softmax,
    transpose,
)

BRANCHES = ("2d", "3d")


def add_fusion(
    store: ParameterStore,
    name: str,
    branch: str,
    channels: int,
    aux_channels: Sequence[int],
    rng: np.random.Generator,
    mode: str = "attention",
) -> None:
    """
    Create the weights of one fusion block under ``name``.

    Args:
        store: Parameter store
        name: Scope of the block
        branch: "2d" (depthwise 3×3 Q/K/V) or "3d" (per-channel Q/K/V scales)
        channels: Primary channel count C
        aux_channels: Channel count of each auxiliary feature
        rng: Initializer generator
        mode: "attention" or "concat"
    """
    if branch not in BRANCHES:
        raise ConfigError(f"unknown branch {branch!r}")
    scope = store.scope(name)
    if mode == "concat":
        add_linear(scope, "mix", channels + sum(aux_channels), channels, rng)
        return
    if mode != "attention":
        raise ConfigError(f"unknown fusion mode {mode!r}")

    add_linear(scope, "align", sum(aux_channels), channels, rng)
    for key in ("q", "k", "v"):
        if branch == "2d":
            scope.add(key, he_normal(rng, (3, 3, channels), 9))
        else:
            scope.add(key, ones((channels,)))
    add_linear(scope, "proj", channels, channels, rng)
    scope.add("theta", np.full((), math.log(math.sqrt(channels)), dtype=get_default_dtype()))
    for ln in ("ln_x", "ln_y"):
        scope.add(f"{ln}.g", ones((channels,)))
        scope.add(f"{ln}.b", zeros((channels,)))


def add_plane_mixing(store: ParameterStore, name: str, channels: int) -> None:
    """Learnable 1×1 mixing applied after splatting point features onto the image plane."""
    store.add(name, np.eye(channels, dtype=get_default_dtype()))


def _same_support(primary: Tensor, aux: Sequence[Tensor]) -> None:
    for i, y in enumerate(aux):
        if y.shape[:-1] != primary.shape[:-1]:
            raise ShapeError(
                f"auxiliary feature {i} has support {y.shape[:-1]}, primary has {primary.shape[:-1]}"
            )


def align_aux(aux: Sequence[Tensor], store: ParameterStore, name: str) -> Tensor:
    """Concatenate auxiliary features on the channel axis and mix them to the primary width."""
    if not aux:
        raise ShapeError("align_aux needs at least one auxiliary feature")
    _same_support(aux[0], aux[1:])
    stacked = aux[0] if len(aux) == 1 else concat(list(aux), axis=-1)
    return linear(stacked, store, f"{name}.align")


def channel_attention(q: Tensor, k: Tensor, v: Tensor, tau: Tensor) -> Tuple[Tensor, Tensor]:
    """
    Channel attention over M×C query/key/value rows.

    Returns:
        (V·A with shape M×C, attention matrix A with shape C×C)
    """
    scores = matmul(transpose(q), k) / tau
    attn = softmax(scores, axis=0)
    c = q.shape[1]
    if attn.shape != (c, c):
        raise ShapeError(f"attention matrix must be {c}×{c}, got {attn.shape}")
    return matmul(v, attn), attn


def cross_attention(x: Tensor, y: Tensor, store: ParameterStore, name: str, branch: str) -> Tensor:
    """
    Fuse aligned auxiliary ``y`` into primary ``x`` (same shape, H×W×C or N×C).

    Returns:
        Fused feature with the shape of ``x``
    """
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"primary {x.shape} and auxiliary {y.shape} must match")
    if branch == "2d" and x.ndim != 3:
        raise ShapeError(f"2d fusion expects an H×W×C grid, got {x.shape}")
    if branch == "3d" and x.ndim != 2:
        raise ShapeError(f"3d fusion expects N×C rows, got {x.shape}")
    s = store.scope(name)
    c = x.shape[-1]
    m = int(np.prod(x.shape[:-1]))

    xn = layernorm(x, -1, s["ln_x.g"], s["ln_x.b"])
    yn = layernorm(y, -1, s["ln_y.g"], s["ln_y.b"])
    if branch == "2d":
        q = conv2d(xn, s["q"], padding=1, depthwise=True)
        k = conv2d(yn, s["k"], padding=1, depthwise=True)
        v = conv2d(yn, s["v"], padding=1, depthwise=True)
    else:
        q, k, v = xn * s["q"], yn * s["k"], yn * s["v"]

    mixed, _ = channel_attention(
        reshape(q, (m, c)), reshape(k, (m, c)), reshape(v, (m, c)), exp(s["theta"])
    )
    out = linear(mixed, s, "proj") + reshape(x, (m, c))
    return reshape(out, x.shape)


def fuse(
    primary: Tensor,
    aux: Sequence[Tensor],
    store: ParameterStore,
    name: str,
    branch: str,
    mode: str = "attention",
) -> Tensor:
    """Run one fusion block (attention or concat) on already co-located features."""
    _same_support(primary, aux)
    if mode == "concat":
        return linear(concat([primary] + list(aux), axis=-1), store, f"{name}.mix")
    return cross_attention(primary, align_aux(aux, store, name), store, name, branch)


def points_to_plane(
    points: PointSet,
    cam: CameraIntrinsics,
    shape: Tuple[int, int],
    store: ParameterStore,
    mixing: str,
) -> Tensor:
    """Scatter point features onto an H×W plane and apply the learnable 1×1 mixing."""
    return scatter_interpolate(points, cam, shape, mix=store[mixing])


def plane_to_points(grid: Tensor, uv: Tensor) -> Tensor:
    """Bilinearly sample an H×W×C grid at projected point coordinates."""
    return bilinear_sample(grid, uv)


def maf_2d(
    e_r: Tensor,
    e_ev: Optional[Tensor],
    points: PointSet,
    cam: CameraIntrinsics,
    store: ParameterStore,
    name: str,
    mode: str = "attention",
) -> Tensor:
    """
    Fuse point (and optionally event) features into the image feature.

    Args:
        e_r: (H, W, C2) primary image feature
        e_ev: Optional (H, W, Ce) event feature
        points: PointSet carrying (N, C3) features
        cam: Intrinsics of the feature plane
        store: Parameter store
        name: Fusion block scope; the 1×1 plane mixing lives at ``name.plane``

    Returns:
        (H, W, C2) fused feature
    """
    h, w = e_r.shape[0], e_r.shape[1]
    aux: List[Tensor] = [points_to_plane(points, cam, (h, w), store, f"{name}.plane")]
    if e_ev is not None:
        aux.append(e_ev)
    return fuse(e_r, aux, store, name, "2d", mode)


def maf_3d(
    points: PointSet,
    e_r: Tensor,
    e_ev: Optional[Tensor],
    cam: CameraIntrinsics,
    store: ParameterStore,
    name: str,
    mode: str = "attention",
) -> Tensor:
    """
    Fuse image (and optionally event) features into the point feature.

    Image-plane features are bilinearly sampled at the projected point coordinates.

    Returns:
        (N, C3) fused feature
    """
    if points.features is None:
        raise ShapeError("maf_3d needs point features")
    uv = project(points.positions, cam)
    aux = [plane_to_points(e_r, uv)]
    if e_ev is not None:
        aux.append(plane_to_points(e_ev, uv))
    return fuse(points.features, aux, store, name, "3d", mode)
