"""
Event streams, voxel grids and a log-intensity threshold simulator.
"""
import logging
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

from rpeflow.errors import ConfigError, DataError, ShapeError

logger = logging.getLogger("rpeflow.eventkit")

# Packed on-disk record: u16 x, u16 y, f64 t, i8 polarity (13 bytes)
EVENT_DTYPE = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<f8"), ("p", "i1")])

DEFAULT_THRESHOLD = 0.15
LOG_EPS = 1e-3
NORM_PERCENTILE = 98.0
# Slack on the crossing count so an exact multiple of C is counted
CROSSING_SLACK = 1e-9


class Event(NamedTuple):
    x: int
    y: int
    t: float
    p: int


@dataclass
class EventStream:
    """
    Events over [t0, t1] on a W×H sensor, sorted by timestamp.

    Attributes:
        events: Structured array with ``EVENT_DTYPE`` fields
        t0: Interval start (seconds)
        t1: Interval end (seconds)
        width: Sensor width
        height: Sensor height
    """

    events: np.ndarray
    t0: float
    t1: float
    width: int
    height: int

    def __post_init__(self):
        self.events = np.asarray(self.events, dtype=EVENT_DTYPE)
        if not self.t1 > self.t0:
            raise ConfigError(f"event interval must have t1 > t0, got [{self.t0}, {self.t1}]")
        ev = self.events
        if len(ev):
            if np.any(np.diff(ev["t"]) < 0):
                raise DataError("events are not sorted by timestamp")
            if ev["x"].max() >= self.width or ev["y"].max() >= self.height:
                raise DataError(f"event coordinates exceed the {self.width}×{self.height} sensor")
            if ev["t"][0] < self.t0 or ev["t"][-1] > self.t1:
                raise DataError(f"event timestamps leave the interval [{self.t0}, {self.t1}]")
            if not np.all(np.abs(ev["p"]) == 1):
                raise DataError("event polarity must be +1 or -1")

    @classmethod
    def empty(cls, width: int, height: int, t0: float = 0.0, t1: float = 1.0) -> "EventStream":
        return cls(np.zeros(0, dtype=EVENT_DTYPE), t0, t1, width, height)

    @classmethod
    def from_events(cls, events: Sequence[Event], width: int, height: int,
                    t0: float = 0.0, t1: float = 1.0) -> "EventStream":
        arr = np.array([tuple(e) for e in events], dtype=EVENT_DTYPE)
        arr = arr[np.argsort(arr["t"], kind="stable")]
        return cls(arr, t0, t1, width, height)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[Event]:
        for x, y, t, p in self.events:
            yield Event(int(x), int(y), float(t), int(p))

    def merge(self, other: "EventStream") -> "EventStream":
        """Union of two streams over the same sensor and interval."""
        if (self.width, self.height, self.t0, self.t1) != (other.width, other.height, other.t0, other.t1):
            raise ShapeError("cannot merge streams over different sensors or intervals")
        merged = np.concatenate([self.events, other.events])
        merged = merged[np.argsort(merged["t"], kind="stable")]
        return EventStream(merged, self.t0, self.t1, self.width, self.height)

    def with_flipped_polarity(self) -> "EventStream":
        flipped = self.events.copy()
        flipped["p"] = -flipped["p"]
        return EventStream(flipped, self.t0, self.t1, self.width, self.height)


@dataclass
class EventVoxelGrid:
    """H×W×B signed accumulation; ``scale`` is the divisor applied at normalization (1 if none)."""

    grid: np.ndarray
    scale: float = 1.0

    @property
    def bins(self) -> int:
        return self.grid.shape[2]

    @property
    def shape(self):
        return self.grid.shape


def voxelize(stream: EventStream, bins: int, height: int, width: int, normalize: bool = True) -> EventVoxelGrid:
    """
    Splat events bilinearly in time into ``bins`` temporal bins.

    Each event adds p·(1 − |t* − b|) to the two bins around its normalized time
    t* = (t − t0)/(t1 − t0)·(B − 1).

    Args:
        stream: Sorted event stream
        bins: Number of temporal bins B
        height: Grid height
        width: Grid width
        normalize: Divide by the 98th percentile of |EV| (skipped when it is 0)

    Returns:
        EventVoxelGrid of shape (height, width, bins)
    """
    if bins < 1:
        raise ConfigError(f"bins must be >= 1, got {bins}")
    if not stream.t1 > stream.t0:
        raise ConfigError(f"event interval must have t1 > t0, got [{stream.t0}, {stream.t1}]")
    if (stream.width, stream.height) != (width, height):
        raise ShapeError(f"stream sensor {stream.width}×{stream.height} does not match grid {width}×{height}")

    grid = np.zeros((height, width, bins), dtype=np.float64)
    ev = stream.events
    if len(ev):
        x = ev["x"].astype(np.int64)
        y = ev["y"].astype(np.int64)
        p = ev["p"].astype(np.float64)
        ts = (ev["t"] - stream.t0) / (stream.t1 - stream.t0) * (bins - 1)
        lo = np.clip(np.floor(ts), 0, bins - 1).astype(np.int64)
        frac = ts - lo
        np.add.at(grid, (y, x, lo), p * (1.0 - frac))
        upper = (lo + 1 < bins) & (frac > 0)
        np.add.at(grid, (y[upper], x[upper], lo[upper] + 1), p[upper] * frac[upper])

    scale = 1.0
    if normalize:
        pct = float(np.percentile(np.abs(grid), NORM_PERCENTILE))
        if pct > 0:
            grid /= pct
            scale = pct
    return EventVoxelGrid(grid, scale)


def simulate_events(
    frames: np.ndarray,
    threshold: float = DEFAULT_THRESHOLD,
    t0: float = 0.0,
    t1: float = 1.0,
    sigma: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> EventStream:
    """
    Convert a sequence of intensity frames into events.

    Per pixel, log(I + 1e-3) is linearly interpolated between consecutive frames
    and an event fires at every crossing of a multiple of the contrast threshold
    from the pixel's last-event reference level, timestamped by a linear solve.

    Args:
        frames: (S+1, H, W) intensities in [0, 1], equally spaced over [t0, t1]
        threshold: Contrast threshold C
        t0: Time of the first frame
        t1: Time of the last frame
        sigma: Relative per-pixel threshold mismatch; 0 disables it
        rng: Generator for the mismatch draw

    Returns:
        Timestamp-sorted EventStream
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] < 2:
        raise ConfigError(f"need at least two H×W frames, got shape {frames.shape}")
    if threshold <= 0:
        raise ConfigError(f"contrast threshold must be positive, got {threshold}")
    if not np.all(np.isfinite(frames)):
        raise DataError("frames contain non-finite intensities")

    steps, height, width = frames.shape[0] - 1, frames.shape[1], frames.shape[2]
    log_frames = np.log(np.clip(frames, 0.0, None) + LOG_EPS).reshape(steps + 1, -1)

    contrast = np.full(height * width, float(threshold))
    if sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        contrast = threshold * np.maximum(0.01, 1.0 + sigma * rng.standard_normal(height * width))

    times = np.linspace(t0, t1, steps + 1)
    reference = log_frames[0].copy()
    chunks = []
    for s in range(steps):
        la, lb = log_frames[s], log_frames[s + 1]
        diff = lb - reference
        count = np.floor(np.abs(diff) / contrast + CROSSING_SLACK).astype(np.int64)
        fired = np.flatnonzero(count)
        if fired.size:
            n = count[fired]
            pix = np.repeat(fired, n)
            starts = np.repeat(np.cumsum(n) - n, n)
            j = np.arange(pix.size) - starts + 1
            sign = np.sign(diff[pix])
            level = reference[pix] + sign * j * contrast[pix]
            alpha = np.clip((level - la[pix]) / (lb[pix] - la[pix]), 0.0, 1.0)
            rec = np.empty(pix.size, dtype=EVENT_DTYPE)
            rec["x"] = pix % width
            rec["y"] = pix // width
            rec["t"] = times[s] + alpha * (times[s + 1] - times[s])
            rec["p"] = sign.astype(np.int8)
            chunks.append(rec)
            reference[fired] += np.sign(diff[fired]) * n * contrast[fired]

    events = np.concatenate(chunks) if chunks else np.zeros(0, dtype=EVENT_DTYPE)
    events = events[np.argsort(events["t"], kind="stable")]
    logger.debug("simulated %d events over %d steps", len(events), steps)
    return EventStream(events, t0, t1, width, height)
