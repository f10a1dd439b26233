"""
Coarse-to-fine joint optical-flow and scene-flow network.

Three Siamese encoders (image, event, point cloud) build feature pyramids.
Level l in [1, L] has spatial size H/2**l and N·ratio**l points; estimation
runs from the coarsest level L to level 1 and every level goes through the
same pipeline:

    feature-stage fusion (image <-> points, no events)
    warp frame-2 features by the prior flows, build 2D/3D cost volumes
    motion-stage fusion (motion features of both branches + events)
    decoder, estimation-stage fusion, residual flow heads

The level-1 estimates are finally upsampled to the input image and points.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from rpeflow.errors import DivergenceError, ShapeError
from rpeflow.eventkit import voxelize
from rpeflow.fusion import add_fusion, add_plane_mixing, fuse, plane_to_points, points_to_plane
from rpeflow.geometry import (
    CameraIntrinsics,
    PointSet,
    bilinear_sample,
    furthest_point_sample,
    interpolate_idw,
    knn,
    pixel_grid,
    project,
    warp2d,
    warp3d,
)
from rpeflow.mireg import add_mi_head, mi_pair, mi_triple
from rpeflow.nn import ParameterStore, add_conv, add_linear, conv, conv_act, linear, linear_act
from rpeflow.sample import Sample
from rpeflow.schemas import ModelConfig
from rpeflow.tensor import (
    Tensor,
    as_tensor,
    concat,
    correlation2d,
    get_default_dtype,
    max_,
    reshape,
    take,
    zeros,
)

logger = logging.getLogger("rpeflow.pyramid")

MI_TERMS = ("fs1", "fs2", "ms", "es")
# Initial gain of the residual flow heads so early estimates stay small
HEAD_GAIN = 0.1


# -- inputs ----------------------------------------------------------------


@dataclass
class PointLevel:
    """
    Sampled points of one pyramid level.

    Attributes:
        positions: (n, 3) sampled positions
        global_index: (n,) indices into the input point cloud
        group: (n, k) neighbors of each sampled point in the previous level
        neighbors: (n, k) neighbors of each sampled point within this level
    """

    positions: np.ndarray
    global_index: np.ndarray
    group: np.ndarray
    neighbors: np.ndarray


def build_point_pyramid(positions: np.ndarray, config: ModelConfig) -> List[PointLevel]:
    """Furthest-point sampling chain with cached neighbor indices (index 0 is level 1)."""
    prev = np.asarray(positions, dtype=np.float64)
    prev_global = np.arange(len(prev))
    levels = []
    for _ in range(config.levels):
        count = max(1, int(len(prev) * config.point_ratio))
        idx = furthest_point_sample(prev, count)
        pos = prev[idx]
        group, _ = knn(pos, prev, config.knn)
        neighbors, _ = knn(pos, pos, config.knn)
        levels.append(PointLevel(pos, prev_global[idx], group, neighbors))
        prev, prev_global = pos, prev_global[idx]
    return levels


@dataclass
class ModelInputs:
    """
    Network inputs for one sample.

    Attributes:
        rgb1, rgb2: (H, W, Cimg) frames
        pc1, pc2: (N, 3) and (M, 3) point positions
        voxels: (H, W, B) event voxel grid
        cam: Full-resolution intrinsics
        pyr1, pyr2: Point pyramids of both clouds
    """

    rgb1: np.ndarray
    rgb2: np.ndarray
    pc1: np.ndarray
    pc2: np.ndarray
    voxels: np.ndarray
    cam: CameraIntrinsics
    pyr1: List[PointLevel] = field(default_factory=list)
    pyr2: List[PointLevel] = field(default_factory=list)

    @classmethod
    def from_sample(cls, sample: Sample, config: ModelConfig, no_event: bool = False) -> "ModelInputs":
        """Voxelize the events, replicate grayscale to the image channels and build point pyramids."""
        def frame(img):
            return np.repeat(img[:, :, None], config.image_channels, axis=2)

        if no_event:
            voxels = np.zeros((sample.height, sample.width, config.event_bins))
        else:
            voxels = voxelize(sample.events, config.event_bins, sample.height, sample.width).grid
        inputs = cls(frame(sample.rgb0), frame(sample.rgb1), sample.pc0, sample.pc1, voxels, sample.cam)
        inputs.pyr1 = build_point_pyramid(sample.pc0, config)
        inputs.pyr2 = build_point_pyramid(sample.pc1, config)
        return inputs

    def check(self, config: ModelConfig) -> None:
        h, w = self.rgb1.shape[:2]
        factor = 2 ** config.levels
        if h % factor or w % factor:
            raise ShapeError(f"image {h}×{w} is not divisible by 2**levels = {factor}")
        if self.rgb1.shape != (h, w, config.image_channels) or self.rgb2.shape != self.rgb1.shape:
            raise ShapeError(f"frames must be {h}×{w}×{config.image_channels}")
        if self.voxels.shape != (h, w, config.event_bins):
            raise ShapeError(f"voxel grid {self.voxels.shape} does not match {h}×{w}×{config.event_bins}")
        if (self.cam.width, self.cam.height) != (w, h):
            raise ShapeError(f"intrinsics describe {self.cam.width}×{self.cam.height}, frames are {w}×{h}")
        if len(self.pyr1) != config.levels or len(self.pyr2) != config.levels:
            raise ShapeError("point pyramids are missing; build them with build_point_pyramid")


# -- outputs ---------------------------------------------------------------


@dataclass
class FlowEstimate:
    """Optical flow (h×w×2, level pixels) and scene flow (n×3, scene units)."""

    flow: Tensor
    sceneflow: Tensor


@dataclass
class LevelFeatures:
    level: int
    cam: CameraIntrinsics
    e_r1: Tensor
    e_r2: Tensor
    e_ev: Tensor
    e_pc1: Tensor
    e_pc2: Tensor
    pc1: PointLevel
    pc2: PointLevel

    @property
    def shape(self) -> Tuple[int, int]:
        return self.e_r1.shape[0], self.e_r1.shape[1]


@dataclass
class FusedFeatures:
    e_r1: Tensor
    e_pc1: Tensor
    e_r2: Tensor
    e_pc2: Tensor


@dataclass
class ForwardOutput:
    """
    Attributes:
        estimates: Level -> FlowEstimate, levels 1..L
        mi_terms: Level -> {"fs1", "fs2", "ms", "es"} scalar tensors
        full: Level-1 estimates upsampled to the input image and input points
        pyr1: Point pyramid of the first cloud (ground-truth subsampling)
    """

    estimates: Dict[int, FlowEstimate]
    mi_terms: Dict[int, Dict[str, Tensor]]
    full: FlowEstimate
    pyr1: List[PointLevel]


def _check_finite(t: Tensor, level: int, stage: str) -> Tensor:
    if not np.all(np.isfinite(t.values)):
        raise DivergenceError("non-finite values in forward pass", level=level, stage=stage)
    return t


def _zero() -> Tensor:
    return zeros(())


# -- parameters ------------------------------------------------------------


def build_parameters(config: ModelConfig, rng: np.random.Generator) -> ParameterStore:
    """
    Create every trainable tensor of the network.

    Args:
        config: Model structure
        rng: Initializer generator

    Returns:
        ParameterStore with dotted names (``enc.rgb.l1.conv1.w``, ``l2.ms.3d.proj.b``, ...)
    """
    store = ParameterStore()
    mode = config.fusion
    r = config.corr_radius
    d = config.latent_dim
    cin_rgb, cin_ev, cin_pc = config.image_channels, config.event_bins, 3
    for l in range(1, config.levels + 1):
        c2, c3 = config.channels_2d[l - 1], config.channels_3d[l - 1]
        add_conv(store, f"enc.rgb.l{l}.conv1", 3, cin_rgb, c2, rng)
        add_conv(store, f"enc.rgb.l{l}.conv2", 3, c2, c2, rng)
        add_conv(store, f"enc.ev.l{l}.conv1", 3, cin_ev, c2, rng)
        add_conv(store, f"enc.ev.l{l}.conv2", 3, c2, c2, rng)
        add_linear(store, f"enc.pc.l{l}.mlp1", cin_pc + 3, c3, rng)
        add_linear(store, f"enc.pc.l{l}.mlp2", c3, c3, rng)
        cin_rgb, cin_ev, cin_pc = c2, c2, c3

        lv = store.scope(f"l{l}")
        add_fusion(lv, "fs.r", "2d", c2, [c3], rng, mode)
        add_plane_mixing(lv, "fs.r.plane", c3)
        add_fusion(lv, "fs.pc", "3d", c3, [c2], rng, mode)
        add_mi_head(lv, "fs.mi.r", c2, d, rng)
        add_mi_head(lv, "fs.mi.pc", c3, d, rng)

        add_linear(lv, "cv3d.mlp1", 2 * c3 + 3, c3, rng)
        add_linear(lv, "cv3d.mlp2", c3, c3, rng)
        add_conv(lv, "motion2d", 3, (2 * r + 1) ** 2 + c2 + 2, c2, rng)
        add_linear(lv, "motion3d", 2 * c3 + 3, c3, rng)

        for stage in ("ms", "es"):
            add_fusion(lv, f"{stage}.2d", "2d", c2, [c2, c3], rng, mode)
            add_plane_mixing(lv, f"{stage}.2d.plane", c3)
            add_fusion(lv, f"{stage}.3d", "3d", c3, [c2, c2], rng, mode)
            add_mi_head(lv, f"{stage}.mi.m2d", c2, d, rng)
            add_mi_head(lv, f"{stage}.mi.m3d", c3, d, rng)
            add_mi_head(lv, f"{stage}.mi.ev", c2, d, rng)

        for i in (1, 2, 3):
            add_conv(lv, f"dec2d.conv{i}", 3, c2, c2, rng)
            add_linear(lv, f"dec3d.fc{i}", c3, c3, rng)
        add_conv(lv, "est2d", 3, c2, 2, rng, gain=HEAD_GAIN)
        add_linear(lv, "est3d", c3, 3, rng, gain=HEAD_GAIN)
    logger.debug("built %d parameter tensors (%d values)", len(store.names()), store.num_values())
    return store


# -- stages ----------------------------------------------------------------


def _set_abstraction(feat: Tensor, prev_pos: np.ndarray, level: PointLevel, store: ParameterStore,
                     name: str) -> Tensor:
    grouped = take(feat, level.group)  # (n, k, C)
    rel = (prev_pos[level.group] - level.positions[:, None, :]).astype(get_default_dtype())
    x = concat([grouped, as_tensor(rel)], axis=-1)
    x = linear_act(linear_act(x, store, f"{name}.mlp1"), store, f"{name}.mlp2")
    return max_(x, axis=1)


def encode(inputs: ModelInputs, store: ParameterStore, config: ModelConfig) -> List[LevelFeatures]:
    """
    Build the three feature pyramids (index 0 is level 1).

    The image encoder is shared by both frames and the point encoder by both
    clouds; the event encoder has its own weights.
    """
    inputs.check(config)
    x1, x2, ev = as_tensor(inputs.rgb1), as_tensor(inputs.rgb2), as_tensor(inputs.voxels)
    p1, p2 = as_tensor(inputs.pc1), as_tensor(inputs.pc2)
    prev1, prev2 = inputs.pc1, inputs.pc2
    levels = []
    for l in range(1, config.levels + 1):
        rgb = f"enc.rgb.l{l}"
        x1 = conv_act(conv_act(x1, store, f"{rgb}.conv1", stride=2), store, f"{rgb}.conv2")
        x2 = conv_act(conv_act(x2, store, f"{rgb}.conv1", stride=2), store, f"{rgb}.conv2")
        ev = conv_act(conv_act(ev, store, f"enc.ev.l{l}.conv1", stride=2), store, f"enc.ev.l{l}.conv2")
        lv1, lv2 = inputs.pyr1[l - 1], inputs.pyr2[l - 1]
        p1 = _set_abstraction(p1, prev1, lv1, store, f"enc.pc.l{l}")
        p2 = _set_abstraction(p2, prev2, lv2, store, f"enc.pc.l{l}")
        prev1, prev2 = lv1.positions, lv2.positions
        for t in (x1, x2, ev, p1, p2):
            _check_finite(t, l, "encode")
        levels.append(LevelFeatures(l, inputs.cam.scaled(l), x1, x2, ev, p1, p2, lv1, lv2))
    return levels


def feature_stage_fuse(
    lv: LevelFeatures, store: ParameterStore, config: ModelConfig, compute_mi: bool = True
) -> Tuple[FusedFeatures, Tensor, Tensor]:
    """
    Fuse image and point features of each frame in both directions.

    Returns:
        (fused features, L_mi of frame 1, L_mi of frame 2). Each MI term sums the
        image/point bound on the grid and on the points, using pre-fusion features.
    """
    s = store.scope(f"l{lv.level}")
    mode = config.fusion
    fused, terms = [], []
    for e_r, e_pc, pts in ((lv.e_r1, lv.e_pc1, lv.pc1), (lv.e_r2, lv.e_pc2, lv.pc2)):
        e_pc_pj = points_to_plane(PointSet(pts.positions, e_pc), lv.cam, lv.shape, s, "fs.r.plane")
        e_r_pj = plane_to_points(e_r, project(pts.positions, lv.cam))
        fused.append(fuse(e_r, [e_pc_pj], s, "fs.r", "2d", mode))
        fused.append(fuse(e_pc, [e_r_pj], s, "fs.pc", "3d", mode))
        if compute_mi:
            terms.append(
                mi_pair(e_r, e_pc_pj, s, "fs.mi.r", "fs.mi.pc") + mi_pair(e_r_pj, e_pc, s, "fs.mi.r", "fs.mi.pc")
            )
        else:
            terms.append(_zero())
    for t in fused:
        _check_finite(t, lv.level, "feature_fusion")
    return FusedFeatures(*fused), terms[0], terms[1]


def build_cost_volumes(
    lv: LevelFeatures, fused: FusedFeatures, flow: Tensor, sceneflow: Tensor,
    store: ParameterStore, config: ModelConfig,
) -> Tuple[Tensor, Tensor]:
    """
    Warp frame-2 features by the prior flows and correlate them with frame 1.

    Returns:
        (2D volume h×w×(2r+1)², 3D volume n×C3)
    """
    s = store.scope(f"l{lv.level}")
    cv2 = correlation2d(fused.e_r1, warp2d(fused.e_r2, flow), config.corr_radius)

    pos1 = lv.pc1.positions
    gathered = warp3d(fused.e_pc2, lv.pc2.positions, pos1, sceneflow, k=config.warp_knn)
    nbr = lv.pc1.neighbors
    n, k = nbr.shape
    own = take(fused.e_pc1, np.repeat(np.arange(n)[:, None], k, axis=1))
    rel = as_tensor((pos1[nbr] - pos1[:, None, :]).astype(get_default_dtype()))
    x = concat([own, take(gathered, nbr), rel], axis=-1)
    cv3 = max_(linear_act(linear_act(x, s, "cv3d.mlp1"), s, "cv3d.mlp2"), axis=1)
    _check_finite(cv2, lv.level, "cost_volume")
    _check_finite(cv3, lv.level, "cost_volume")
    return cv2, cv3


def _cross_branch_fuse(
    lv: LevelFeatures, feat2d: Tensor, feat3d: Tensor, store: ParameterStore, stage: str,
    config: ModelConfig, compute_mi: bool,
) -> Tuple[Tensor, Tensor, Tensor]:
    """Fuse 2D and 3D branch features with each other and the event feature (one block per branch)."""
    s = store.scope(f"l{lv.level}")
    pos1 = lv.pc1.positions
    uv = project(pos1, lv.cam)
    f3d_pj = points_to_plane(PointSet(pos1, feat3d), lv.cam, lv.shape, s, f"{stage}.2d.plane")
    f2d_pj = plane_to_points(feat2d, uv)
    ev_pj = plane_to_points(lv.e_ev, uv)
    out2d = fuse(feat2d, [lv.e_ev, f3d_pj], s, f"{stage}.2d", "2d", config.fusion)
    out3d = fuse(feat3d, [ev_pj, f2d_pj], s, f"{stage}.3d", "3d", config.fusion)
    if compute_mi:
        heads = (f"{stage}.mi.m2d", f"{stage}.mi.m3d", f"{stage}.mi.ev")
        term = mi_triple((feat2d, f3d_pj, lv.e_ev), s, heads, config.ii_reduce) + mi_triple(
            (f2d_pj, feat3d, ev_pj), s, heads, config.ii_reduce
        )
    else:
        term = _zero()
    _check_finite(out2d, lv.level, stage)
    _check_finite(out3d, lv.level, stage)
    return out2d, out3d, term


def motion_stage_fuse(
    lv: LevelFeatures, fused: FusedFeatures, cv2: Tensor, cv3: Tensor, flow: Tensor, sceneflow: Tensor,
    store: ParameterStore, config: ModelConfig, compute_mi: bool = True,
) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Turn cost volumes into motion features and fuse them across branches and with events.

    Returns:
        (2D motion feature, 3D motion feature, L_ii of the motion stage)
    """
    s = store.scope(f"l{lv.level}")
    m2d = conv_act(concat([cv2, fused.e_r1, flow], axis=-1), s, "motion2d")
    m3d = linear_act(concat([cv3, fused.e_pc1, sceneflow], axis=-1), s, "motion3d")
    return _cross_branch_fuse(lv, m2d, m3d, store, "ms", config, compute_mi)


def decode_and_estimate(
    lv: LevelFeatures, m2d: Tensor, m3d: Tensor, flow: Tensor, sceneflow: Tensor,
    store: ParameterStore, config: ModelConfig, compute_mi: bool = True,
) -> Tuple[FlowEstimate, Tensor]:
    """
    Decode motion features, fuse the hidden features, and add residual flows to the priors.

    Returns:
        (FlowEstimate at this level, L_ii of the estimation stage)
    """
    s = store.scope(f"l{lv.level}")
    h2d, h3d = m2d, m3d
    for i in (1, 2, 3):
        h2d = conv_act(h2d, s, f"dec2d.conv{i}")
        h3d = linear_act(h3d, s, f"dec3d.fc{i}")
    h2d, h3d, term = _cross_branch_fuse(lv, h2d, h3d, store, "es", config, compute_mi)
    out = FlowEstimate(flow + conv(h2d, s, "est2d"), sceneflow + linear(h3d, s, "est3d"))
    _check_finite(out.flow, lv.level, "estimate")
    _check_finite(out.sceneflow, lv.level, "estimate")
    return out, term


def upsample_estimates(
    flow: Tensor, sceneflow: Tensor, fine_shape: Tuple[int, int],
    coarse_points: np.ndarray, fine_points: np.ndarray, k: int = 3,
) -> Tuple[Tensor, Tensor]:
    """
    Carry estimates to the next finer level.

    Optical flow is bilinearly upsampled ×2 (fine pixel i reads coarse i/2) and
    its values doubled; scene flow is IDW-interpolated to the finer points, unscaled.
    """
    h, w = fine_shape
    coords = pixel_grid(h, w) / 2.0
    fine_flow = reshape(bilinear_sample(flow, coords), (h, w, 2)) * 2.0
    fine_sf = interpolate_idw(sceneflow, coarse_points, fine_points, k)
    return fine_flow, fine_sf


def forward(
    inputs: ModelInputs, store: ParameterStore, config: ModelConfig, compute_mi: bool = True
) -> ForwardOutput:
    """
    Run the full network on one sample.

    Args:
        inputs: Prepared sample
        store: Network parameters
        config: Model structure
        compute_mi: Evaluate the MI terms (zeros otherwise)

    Returns:
        ForwardOutput with per-level estimates, MI terms and full-resolution outputs

    Raises:
        DivergenceError: naming the level and stage of the first non-finite intermediate
    """
    features = encode(inputs, store, config)
    estimates: Dict[int, FlowEstimate] = {}
    mi_terms: Dict[int, Dict[str, Tensor]] = {}
    prev: Optional[FlowEstimate] = None
    for l in range(config.levels, 0, -1):
        lv = features[l - 1]
        h, w = lv.shape
        if prev is None:
            flow, sceneflow = zeros((h, w, 2)), zeros((len(lv.pc1.positions), 3))
        else:
            flow, sceneflow = upsample_estimates(
                prev.flow, prev.sceneflow, (h, w), features[l].pc1.positions, lv.pc1.positions,
                config.warp_knn,
            )
        fused, fs1, fs2 = feature_stage_fuse(lv, store, config, compute_mi)
        cv2, cv3 = build_cost_volumes(lv, fused, flow, sceneflow, store, config)
        m2d, m3d, ms = motion_stage_fuse(lv, fused, cv2, cv3, flow, sceneflow, store, config, compute_mi)
        est, es = decode_and_estimate(lv, m2d, m3d, flow, sceneflow, store, config, compute_mi)
        estimates[l] = est
        mi_terms[l] = {"fs1": fs1, "fs2": fs2, "ms": ms, "es": es}
        for key, term in mi_terms[l].items():
            _check_finite(term, l, f"mi_{key}")
        prev = est

    h, w = inputs.rgb1.shape[:2]
    full_flow, full_sf = upsample_estimates(
        prev.flow, prev.sceneflow, (h, w), features[0].pc1.positions, inputs.pc1, config.warp_knn
    )
    return ForwardOutput(estimates, mi_terms, FlowEstimate(full_flow, full_sf), inputs.pyr1)
