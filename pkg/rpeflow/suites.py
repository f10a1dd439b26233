"""
Gradient-check suites run by ``rpeflow gradcheck``.

Each suite builds small random 64-bit problems from a seed and returns one
GradcheckReport per checked operation. Inputs stay away from the kinks of
piecewise operations (relu at 0, integer pixel coordinates, clip bounds).
"""
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from rpeflow.errors import ConfigError
from rpeflow.fusion import add_fusion, add_plane_mixing, cross_attention, maf_2d, maf_3d
from rpeflow.geometry import (
    CameraIntrinsics,
    PointSet,
    bilinear_sample,
    interpolate_idw,
    project,
    scatter_interpolate,
    warp2d,
    warp3d,
)
from rpeflow.gradcheck import DEFAULT_H, DEFAULT_TOL, GradcheckReport, check_locations, gradcheck_params
from rpeflow.mireg import GaussianLatent, add_mi_head, kl_gaussians, mi_pair, mi_triple
from rpeflow.nn import ParameterStore
from rpeflow.objectives import GroundTruth, feature_loss, level_targets, task_loss, total_loss
from rpeflow.pyramid import ModelInputs, build_parameters, build_point_pyramid, forward
from rpeflow.schemas import LossWeights, ModelConfig
from rpeflow import tensor as T
from rpeflow.tensor import Tensor, default_dtype

SuiteFn = Callable[[int, float, float], List[GradcheckReport]]
FULL_SUITE_SAMPLES = 50


def _leaf(values: np.ndarray) -> Tensor:
    return Tensor(values, requires_grad=True)


def _check(name: str, f: Callable[[], Tensor], inputs: Sequence[Tuple[str, Tensor]],
           h: float, tol: float) -> GradcheckReport:
    """Check every entry of every input of ``f``."""
    locations = [(i, j) for i, (_, t) in enumerate(inputs) for j in range(t.size)]
    return check_locations(f, inputs, locations, h=h, tol=tol, name=name)


def _readout(rng: np.random.Generator, shape) -> np.ndarray:
    """Random projection weights turning an output into a scalar."""
    return rng.standard_normal(shape)


def _away_from(values: np.ndarray, points: Sequence[float], margin: float = 0.05) -> np.ndarray:
    out = values.copy()
    for p in points:
        close = np.abs(out - p) < margin
        out[close] = p + margin * np.where(out[close] >= p, 1.0, -1.0) * 2
    return out


def tensor_suite(seed: int, h: float = DEFAULT_H, tol: float = DEFAULT_TOL) -> List[GradcheckReport]:
    rng = np.random.default_rng(seed)
    reports: List[GradcheckReport] = []

    def scalar(out: Tensor, w: np.ndarray) -> Tensor:
        return T.sum_(out * w)

    a = _leaf(_away_from(rng.standard_normal((3, 4)), [0.0]))
    b = _leaf(rng.standard_normal((3, 4)))
    pos = _leaf(rng.uniform(0.5, 2.0, (3, 4)))
    w34 = _readout(rng, (3, 4))

    binary = {"add": T.add, "sub": T.sub, "mul": T.mul}
    for name, op in binary.items():
        reports.append(_check(name, lambda op=op: scalar(op(a, b), w34), [("a", a), ("b", b)], h, tol))
    reports.append(_check("div", lambda: scalar(T.div(b, pos), w34), [("a", b), ("b", pos)], h, tol))

    unary = {
        "neg": (T.neg, a),
        "exp": (T.exp, a),
        "log": (T.log, pos),
        "sqrt": (T.sqrt, pos),
        "square": (T.square, a),
        "relu": (T.relu, a),
        "leaky_relu": (T.leaky_relu, a),
        "clip": (lambda x: T.clip(x, 0.7, 1.8), _leaf(_away_from(pos.numpy(), [0.7, 1.8]))),
    }
    for name, (op, x) in unary.items():
        reports.append(_check(name, lambda op=op, x=x: scalar(op(x), w34), [("x", x)], h, tol))

    w3, w4 = _readout(rng, 3), _readout(rng, 4)
    reports.append(_check("sum", lambda: scalar(T.sum_(a, axis=1), w3), [("x", a)], h, tol))
    reports.append(_check("mean", lambda: scalar(T.mean(a, axis=0), w4), [("x", a)], h, tol))
    wmax = _readout(rng, 3)
    reports.append(_check("max", lambda: scalar(T.max_(a, axis=1), wmax), [("x", a)], h, tol))
    reports.append(_check("norm", lambda: scalar(T.norm(a, axis=1), wmax), [("x", a)], h, tol))
    reports.append(_check("softmax", lambda: scalar(T.softmax(a, axis=0), w34), [("x", a)], h, tol))
    reports.append(_check("reshape", lambda: scalar(T.reshape(a, (4, 3)), w34.reshape(4, 3)), [("x", a)], h, tol))
    reports.append(_check("transpose", lambda: scalar(T.transpose(a), w34.T), [("x", a)], h, tol))
    w_cat = _readout(rng, (3, 8))
    reports.append(_check("concat", lambda: scalar(T.concat([a, b], axis=1), w_cat), [("a", a), ("b", b)], h, tol))
    w_stack = _readout(rng, (2, 3, 4))
    reports.append(_check("stack", lambda: scalar(T.stack([a, b]), w_stack), [("a", a), ("b", b)], h, tol))
    w22 = _readout(rng, (2, 2))
    reports.append(_check("getitem", lambda: scalar(a[1:, ::2], w22), [("x", a)], h, tol))
    idx = np.array([2, 0, 2, 1])
    w_take = _readout(rng, (4, 4))
    reports.append(_check("take", lambda: scalar(T.take(a, idx), w_take), [("x", a)], h, tol))
    w_seg = _readout(rng, (2, 4))
    reports.append(_check("segment_sum", lambda: scalar(T.segment_sum(a, np.array([1, 0, 1]), 2), w_seg),
                          [("x", a)], h, tol))
    c = _leaf(rng.standard_normal((4, 2)))
    w_mm = _readout(rng, (3, 2))
    reports.append(_check("matmul", lambda: scalar(T.matmul(a, c), w_mm), [("a", a), ("b", c)], h, tol))
    p1, p2 = _leaf(rng.standard_normal(())), _leaf(rng.standard_normal(()) + 3.0)
    reports.append(_check("minimum", lambda: T.minimum([p1, p2]) * 1.0, [("a", p1), ("b", p2)], h, tol))

    x = _leaf(rng.standard_normal((5, 5, 2)))
    k = _leaf(rng.standard_normal((3, 3, 2, 3)) * 0.5)
    w_conv = _readout(rng, (3, 3, 3))
    reports.append(_check("conv2d", lambda: scalar(T.conv2d(x, k, stride=2, padding=1), w_conv),
                          [("x", x), ("w", k)], h, tol))
    kd = _leaf(rng.standard_normal((3, 3, 2)) * 0.5)
    w_dw = _readout(rng, (5, 5, 2))
    reports.append(_check("conv2d_depthwise", lambda: scalar(T.conv2d(x, kd, padding=1, depthwise=True), w_dw),
                          [("x", x), ("w", kd)], h, tol))
    y = _leaf(rng.standard_normal((5, 5, 2)))
    w_corr = _readout(rng, (5, 5, 9))
    reports.append(_check("correlation2d", lambda: scalar(T.correlation2d(x, y, 1), w_corr),
                          [("a", x), ("b", y)], h, tol))
    g = _leaf(rng.uniform(0.5, 1.5, 4))
    beta = _leaf(rng.standard_normal(4))
    reports.append(_check("layernorm", lambda: scalar(T.layernorm(a, -1, g, beta), w34),
                          [("x", a), ("gamma", g), ("beta", beta)], h, tol))
    return reports


def _camera() -> CameraIntrinsics:
    return CameraIntrinsics.centered(6.0, 6, 6)


def _points(rng: np.random.Generator, n: int, cam: CameraIntrinsics) -> np.ndarray:
    """Points inside the view at depth 2..4 whose projections avoid integer pixels."""
    z = rng.uniform(2.0, 4.0, n)
    u = np.floor(rng.uniform(0.0, cam.width - 1.0, n)) + rng.uniform(0.2, 0.8, n)
    v = np.floor(rng.uniform(0.0, cam.height - 1.0, n)) + rng.uniform(0.2, 0.8, n)
    return np.stack([(u - cam.cx) * z / cam.f, (v - cam.cy) * z / cam.f, z], axis=1)


def geometry_suite(seed: int, h: float = DEFAULT_H, tol: float = DEFAULT_TOL) -> List[GradcheckReport]:
    rng = np.random.default_rng(seed)
    cam = _camera()
    reports: List[GradcheckReport] = []

    pts = _leaf(_points(rng, 5, cam))
    w_proj = _readout(rng, (5, 2))
    reports.append(_check("project", lambda: T.sum_(project(pts, cam) * w_proj), [("points", pts)], h, tol))

    feat = _leaf(rng.standard_normal((6, 6, 2)))
    coords = _leaf(rng.uniform(0.2, 0.8, (7, 2)) + rng.integers(0, 5, (7, 2)))
    w_bs = _readout(rng, (7, 2))
    reports.append(_check("bilinear_sample", lambda: T.sum_(bilinear_sample(feat, coords) * w_bs),
                          [("feat", feat), ("coords", coords)], h, tol))

    flow = _leaf(rng.uniform(0.2, 0.8, (6, 6, 2)) * rng.choice([-1.0, 1.0], (6, 6, 2)))
    w_w2 = _readout(rng, (6, 6, 2))
    reports.append(_check("warp2d", lambda: T.sum_(warp2d(feat, flow) * w_w2),
                          [("feat2", feat), ("flow", flow)], h, tol))

    src = rng.standard_normal((8, 3))
    dst = rng.standard_normal((5, 3))
    vals = _leaf(rng.standard_normal((8, 2)))
    w_idw = _readout(rng, (5, 2))
    reports.append(_check("interpolate_idw", lambda: T.sum_(interpolate_idw(vals, src, dst, 3) * w_idw),
                          [("values", vals)], h, tol))

    sf = _leaf(rng.standard_normal((5, 3)) * 0.1)
    reports.append(_check("warp3d", lambda: T.sum_(warp3d(vals, src, dst, sf, 3) * w_idw),
                          [("feat2", vals), ("sceneflow", sf)], h, tol))

    pfeat = _leaf(rng.standard_normal((5, 3)))
    mix = _leaf(rng.standard_normal((3, 2)))
    pset = PointSet(_points(rng, 5, cam), pfeat)
    w_sc = _readout(rng, (6, 6, 2))
    reports.append(_check("scatter_interpolate",
                          lambda: T.sum_(scatter_interpolate(pset, cam, (6, 6), mix) * w_sc),
                          [("features", pfeat), ("mix", mix)], h, tol))
    return reports


def fusion_suite(seed: int, h: float = DEFAULT_H, tol: float = DEFAULT_TOL) -> List[GradcheckReport]:
    rng = np.random.default_rng(seed)
    c2, c3 = 3, 4
    store = ParameterStore()
    add_fusion(store, "att2d", "2d", c2, [c2], rng)
    add_fusion(store, "att3d", "3d", c3, [c3], rng)
    add_fusion(store, "maf2d", "2d", c2, [c3, c2], rng)
    add_plane_mixing(store, "maf2d.plane", c3)
    add_fusion(store, "maf3d", "3d", c3, [c2, c2], rng)
    add_fusion(store, "cat", "2d", c2, [c3], rng, mode="concat")
    add_plane_mixing(store, "cat.plane", c3)
    # perturb identity-initialized mixing so its gradient is generic
    for name in ("maf2d.plane", "cat.plane"):
        w = store[name]
        w.assign(w.values + 0.1 * rng.standard_normal(w.shape))

    x2 = _leaf(rng.standard_normal((4, 4, c2)))
    y2 = _leaf(rng.standard_normal((4, 4, c2)))
    x3 = _leaf(rng.standard_normal((6, c3)))
    y3 = _leaf(rng.standard_normal((6, c3)))
    ev = _leaf(rng.standard_normal((4, 4, c2)))
    small = CameraIntrinsics.centered(4.0, 4, 4)
    pts = PointSet(_points(rng, 6, small), x3)
    readouts = {k: _readout(rng, s) for k, s in
              {"x2": (4, 4, c2), "x3": (6, c3)}.items()}

    def params(prefix: str) -> Dict[str, Tensor]:
        return {n: t for n, t in store.items() if n.startswith(prefix + ".")}

    reports = []
    cases = [
        ("cross_attention_2d", lambda: T.sum_(cross_attention(x2, y2, store, "att2d", "2d") * readouts["x2"]),
         "att2d", [("x", x2), ("y", y2)]),
        ("cross_attention_3d", lambda: T.sum_(cross_attention(x3, y3, store, "att3d", "3d") * readouts["x3"]),
         "att3d", [("x", x3), ("y", y3)]),
        ("maf_2d", lambda: T.sum_(maf_2d(x2, ev, pts, small, store, "maf2d") * readouts["x2"]),
         "maf2d", [("e_r", x2), ("e_ev", ev), ("points", x3)]),
        ("maf_3d", lambda: T.sum_(maf_3d(pts, x2, ev, small, store, "maf3d") * readouts["x3"]),
         "maf3d", [("e_pc", x3), ("e_r", x2), ("e_ev", ev)]),
        ("maf_2d_concat", lambda: T.sum_(maf_2d(x2, None, pts, small, store, "cat", mode="concat") * readouts["x2"]),
         "cat", [("e_r", x2), ("points", x3)]),
    ]
    for name, f, prefix, inputs in cases:
        reports.append(_check(name, f, inputs, h, tol))
        reports.append(gradcheck_params(f, params(prefix), sample_size=30, seed=seed, h=h, tol=tol,
                                        name=f"{name}.params"))
    return reports


def mireg_suite(seed: int, h: float = DEFAULT_H, tol: float = DEFAULT_TOL) -> List[GradcheckReport]:
    rng = np.random.default_rng(seed)
    reports = []
    mu_a, lv_a = _leaf(rng.standard_normal((5, 3))), _leaf(rng.standard_normal((5, 3)) * 0.5)
    mu_b, lv_b = _leaf(rng.standard_normal((5, 3))), _leaf(rng.standard_normal((5, 3)) * 0.5)
    reports.append(_check(
        "kl_gaussians",
        lambda: kl_gaussians(GaussianLatent(mu_a, lv_a), GaussianLatent(mu_b, lv_b)),
        [("mu_a", mu_a), ("logvar_a", lv_a), ("mu_b", mu_b), ("logvar_b", lv_b)], h, tol,
    ))

    store = ParameterStore()
    for head, c in (("r", 3), ("pc", 4), ("ev", 3)):
        add_mi_head(store, head, c, 2, rng)
    fr = _leaf(rng.standard_normal((3, 3, 3)))
    fpc = _leaf(rng.standard_normal((3, 3, 4)))
    fev = _leaf(rng.standard_normal((3, 3, 3)))
    heads = ("r", "pc", "ev")
    pair = lambda: mi_pair(fr, fpc, store, "r", "pc")  # noqa: E731
    reports.append(_check("mi_pair", pair, [("fa", fr), ("fb", fpc)], h, tol))
    reports.append(gradcheck_params(pair, store.as_dict(), sample_size=30, seed=seed, h=h, tol=tol,
                                    name="mi_pair.params"))
    for reduce in ("sum", "min"):
        f = lambda reduce=reduce: mi_triple((fr, fpc, fev), store, heads, reduce)  # noqa: E731
        reports.append(_check(f"mi_triple_{reduce}", f, [("r", fr), ("pc", fpc), ("ev", fev)], h, tol))
    return reports


def tiny_problem(seed: int, size: int = 8, num_points: int = 32, levels: int = 2
                 ) -> Tuple[ModelInputs, GroundTruth, ModelConfig]:
    """Random inputs and targets for the smallest network (no scene rendering)."""
    rng = np.random.default_rng(seed)
    config = ModelConfig.tiny(levels)
    cam = CameraIntrinsics.centered(float(size), size, size)
    pc1 = _points(rng, num_points, cam)
    pc2 = pc1 + 0.05 * rng.standard_normal(pc1.shape)
    pc2[:, 2] = np.maximum(pc2[:, 2], 1.0)
    inputs = ModelInputs(
        rgb1=rng.uniform(0.0, 1.0, (size, size, config.image_channels)),
        rgb2=rng.uniform(0.0, 1.0, (size, size, config.image_channels)),
        pc1=pc1,
        pc2=pc2,
        voxels=rng.standard_normal((size, size, config.event_bins)) * 0.5,
        cam=cam,
    )
    inputs.pyr1 = build_point_pyramid(pc1, config)
    inputs.pyr2 = build_point_pyramid(pc2, config)
    gt = GroundTruth(
        flow=rng.uniform(-1.0, 1.0, (size, size, 2)),
        sceneflow=0.1 * rng.standard_normal((num_points, 3)),
        valid=np.ones((size, size), dtype=bool),
        occ2d=np.zeros((size, size), dtype=bool),
        occ3d=np.zeros(num_points, dtype=bool),
    )
    return inputs, gt, config


def full_suite(seed: int, h: float = DEFAULT_H, tol: float = DEFAULT_TOL) -> List[GradcheckReport]:
    """Total loss of the tiny network (L=2, 8×8 image, 32 points) against sampled parameters."""
    inputs, gt, config = tiny_problem(seed)
    inputs.check(config)
    weights = LossWeights()
    store = build_parameters(config, np.random.default_rng(seed))
    targets = level_targets(gt, inputs.pyr1)

    def loss() -> Tensor:
        out = forward(inputs, store, config)
        return total_loss(task_loss(out.estimates, targets, weights), feature_loss(out.mi_terms), weights.beta)

    return [gradcheck_params(loss, store.as_dict(), sample_size=FULL_SUITE_SAMPLES, seed=seed, h=h, tol=tol,
                             name="full_forward")]


SUITES: Dict[str, SuiteFn] = {
    "tensor": tensor_suite,
    "geometry": geometry_suite,
    "fusion": fusion_suite,
    "mireg": mireg_suite,
    "full": full_suite,
}


def run_suites(names: Sequence[str], seed: int = 0, h: float = DEFAULT_H,
               tol: float = DEFAULT_TOL) -> Dict[str, List[GradcheckReport]]:
    """Run the named suites in 64-bit; unknown names raise ConfigError."""
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ConfigError(f"unknown gradcheck suites {unknown}; available: {sorted(SUITES)}")
    with default_dtype(np.float64):
        return {n: SUITES[n](seed, h, tol) for n in names}
