"""
Image renderings of flows, events and scene-flow errors.

Every function returns an H×W×3 uint8 array ready for ``storage.write_ppm``.
"""
from typing import Optional

import numpy as np

from rpeflow.errors import DataError
from rpeflow.eventkit import EventStream
from rpeflow.geometry import CameraIntrinsics

# Hue transitions of the standard flow color wheel (red, yellow, green, cyan, blue, magenta)
WHEEL_SEGMENTS = (("ry", 15), ("yg", 6), ("gc", 4), ("cb", 11), ("bm", 13), ("mr", 6))
EVENT_BACKGROUND = (128, 128, 128)
EVENT_POSITIVE = (255, 255, 255)
EVENT_NEGATIVE = (0, 0, 0)
ERROR_BACKGROUND = (0, 0, 0)
ERROR_COLORS = ((0, 0, 255), (0, 255, 0), (255, 0, 0))

_COLORWHEEL: Optional[np.ndarray] = None


def color_wheel() -> np.ndarray:
    """(55, 3) wheel of RGB values in [0, 1]."""
    global _COLORWHEEL
    if _COLORWHEEL is not None:
        return _COLORWHEEL
    rows = []
    for name, n in WHEEL_SEGMENTS:
        ramp = np.arange(n, dtype=np.float64) / n
        up, down, one, zero = ramp, 1.0 - ramp, np.ones(n), np.zeros(n)
        rows.append({
            "ry": (one, up, zero),
            "yg": (down, one, zero),
            "gc": (zero, one, up),
            "cb": (zero, down, one),
            "bm": (up, zero, one),
            "mr": (one, zero, down),
        }[name])
    _COLORWHEEL = np.concatenate([np.stack(r, axis=1) for r in rows], axis=0)
    return _COLORWHEEL


def flow_to_rgb(flow: np.ndarray, max_flow: Optional[float] = None) -> np.ndarray:
    """
    Color-code an (H, W, 2) flow field.

    Direction picks the hue and magnitude the saturation; magnitudes at or
    above ``max_flow`` are fully saturated. Zero flow is white.

    Args:
        flow: Optical flow in pixels
        max_flow: Saturation magnitude; defaults to the largest magnitude in ``flow``
    """
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise DataError(f"flow must be H×W×2, got {flow.shape}")
    if not np.all(np.isfinite(flow)):
        raise DataError("flow contains non-finite values")
    u, v = flow[..., 0], flow[..., 1]
    mag = np.hypot(u, v)
    if max_flow is None:
        max_flow = float(mag.max())
    if max_flow <= 0:
        return np.full(flow.shape[:2] + (3,), 255, dtype=np.uint8)

    wheel = color_wheel()
    ncols = len(wheel)
    angle = np.arctan2(-v, -u) / np.pi
    idx = (angle + 1.0) / 2.0 * (ncols - 1)
    i0 = np.floor(idx).astype(np.int64)
    i1 = (i0 + 1) % ncols
    frac = (idx - i0)[..., None]
    col = (1.0 - frac) * wheel[i0] + frac * wheel[i1]
    rad = np.clip(mag / max_flow, 0.0, 1.0)[..., None]
    col = 1.0 - rad * (1.0 - col)
    return np.round(col * 255.0).astype(np.uint8)


def event_image(stream: EventStream) -> np.ndarray:
    """Last polarity per pixel over a gray background (white positive, black negative)."""
    img = np.empty((stream.height, stream.width, 3), dtype=np.uint8)
    img[:] = EVENT_BACKGROUND
    if len(stream) == 0:
        return img
    ev = stream.events[np.argsort(stream.events["t"], kind="stable")]
    ys, xs, ps = ev["y"].astype(np.int64), ev["x"].astype(np.int64), ev["p"]
    flat = ys * stream.width + xs
    # index of the latest event at each touched pixel
    _, first_rev = np.unique(flat[::-1], return_index=True)
    latest = len(flat) - 1 - first_rev
    pos = ps[latest] > 0
    img[ys[latest[pos]], xs[latest[pos]]] = EVENT_POSITIVE
    img[ys[latest[~pos]], xs[latest[~pos]]] = EVENT_NEGATIVE
    return img


def error_terciles(errors: np.ndarray) -> np.ndarray:
    """0, 1 or 2 per point: lower, middle or upper third of the error distribution."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        return np.zeros(0, dtype=np.int64)
    lo, hi = np.quantile(errors, [1.0 / 3.0, 2.0 / 3.0])
    return np.where(errors <= lo, 0, np.where(errors <= hi, 1, 2))


def sceneflow_error_image(points: np.ndarray, errors: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    """
    Project ``points`` into the image and color each by its error tercile
    (blue lowest, green middle, red highest). Nearer points are drawn last.
    """
    points = np.asarray(points, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    if len(points) != len(errors):
        raise DataError(f"{len(points)} points but {len(errors)} errors")
    img = np.empty((cam.height, cam.width, 3), dtype=np.uint8)
    img[:] = ERROR_BACKGROUND
    if len(points) == 0:
        return img
    z = points[:, 2]
    if np.any(z <= 0):
        raise DataError("points behind the camera cannot be drawn")
    u = np.round(cam.f * points[:, 0] / z + cam.cx).astype(np.int64)
    v = np.round(cam.f * points[:, 1] / z + cam.cy).astype(np.int64)
    inside = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    tercile = error_terciles(errors)
    palette = np.array(ERROR_COLORS, dtype=np.uint8)
    order = np.argsort(-z, kind="stable")
    order = order[inside[order]]
    img[v[order], u[order]] = palette[tercile[order]]
    return img


def gray_to_rgb(image: np.ndarray) -> np.ndarray:
    """(H, W) intensities in [0, 1] to uint8 RGB."""
    return np.repeat(np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)[..., None], 3, axis=2)
