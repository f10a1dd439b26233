"""
In-memory form of one two-frame sample.
"""
from dataclasses import dataclass, field
from typing import Any, Dict

import numpy as np

from rpeflow.errors import DataError
from rpeflow.eventkit import EventStream
from rpeflow.geometry import CameraIntrinsics


@dataclass
class Sample:
    """
    Two grayscale frames, two point clouds, the events between them and ground truth.

    Attributes:
        rgb0, rgb1: (H, W) intensities in [0, 1]
        pc0, pc1: (N, 3) camera-frame points of each frame
        events: Events over the frame interval
        flow: (H, W, 2) optical flow frame 0 -> 1 in pixels
        sceneflow: (N, 3) scene flow of pc0 in scene units
        valid: (H, W) pixels with usable flow
        occ2d: (H, W) pixels whose surface is hidden or out of view in frame 1
        occ3d: (N,) points of pc0 hidden or out of view in frame 1
        cam: Camera intrinsics
        meta: Free-form generation metadata (seed, speed class, ...)
    """

    rgb0: np.ndarray
    rgb1: np.ndarray
    pc0: np.ndarray
    pc1: np.ndarray
    events: EventStream
    flow: np.ndarray
    sceneflow: np.ndarray
    valid: np.ndarray
    occ2d: np.ndarray
    occ3d: np.ndarray
    cam: CameraIntrinsics
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        h, w = self.rgb0.shape
        n = len(self.pc0)
        checks = {
            "rgb1": (self.rgb1.shape, (h, w)),
            "pc0": (self.pc0.shape, (n, 3)),
            "pc1": (self.pc1.shape, (len(self.pc1), 3)),
            "flow": (self.flow.shape, (h, w, 2)),
            "sceneflow": (self.sceneflow.shape, (n, 3)),
            "valid": (self.valid.shape, (h, w)),
            "occ2d": (self.occ2d.shape, (h, w)),
            "occ3d": (self.occ3d.shape, (n,)),
        }
        for name, (got, want) in checks.items():
            if got != want:
                raise DataError(f"sample field {name} has shape {got}, expected {want}")
        if (self.cam.width, self.cam.height) != (w, h):
            raise DataError(f"intrinsics describe {self.cam.width}×{self.cam.height}, frames are {w}×{h}")
        for name in ("rgb0", "rgb1", "pc0", "pc1", "flow", "sceneflow"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"sample field {name} contains non-finite values")

    @property
    def height(self) -> int:
        return self.rgb0.shape[0]

    @property
    def width(self) -> int:
        return self.rgb0.shape[1]

    @property
    def num_points(self) -> int:
        return len(self.pc0)
