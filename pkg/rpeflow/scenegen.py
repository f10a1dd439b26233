"""
Procedural toy scenes with exact optical-flow, scene-flow and occlusion ground truth.

A scene is a static textured background plane plus 1-5 rigidly moving objects
(planar patches and spheres). Frames are rendered by casting one ray per pixel
against the analytic surfaces and keeping the nearest hit, so every rendered
pixel, 3D point and flow vector refers to the same surface point.

Object coordinates are their frame-0 world coordinates; an object point Y is at
Y + τ·T + (R(τ) − I)(Y − c) at normalized time τ ∈ [0, 1].
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.spatial.transform import Rotation

from rpeflow import storage
from rpeflow.errors import ConfigError, SpecError
from rpeflow.eventkit import DEFAULT_THRESHOLD, simulate_events
from rpeflow.geometry import CameraIntrinsics, pixel_grid
from rpeflow.logging_utils import log_sample_written
from rpeflow.metrics import record_samples
from rpeflow.sample import Sample

logger = logging.getLogger("rpeflow.scenegen")

SPEED_SCALE = {"static": 0.0, "slow": 0.25, "fast": 1.0}
MAX_ATTEMPTS = 10
BACKGROUND_DEPTH = 8.0
MAX_ROTATION = np.deg2rad(15.0)
MAX_TRANSLATION_FRACTION = 0.2
NEAR_PLANE = 1.0
# Relative depth tolerance when deciding that the frame-1 hit is the same surface point
OCCLUSION_DEPTH_TOL = 1e-6


class SceneSpec(BaseModel):
    """Parameters of one generated sample."""

    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    width: int = Field(default=64, ge=4)
    height: int = Field(default=64, ge=4)
    focal: Optional[float] = Field(default=None, gt=0.0)
    num_points: int = Field(default=512, ge=1)
    num_objects: Optional[int] = Field(default=None, ge=1, le=5)
    substeps: int = Field(default=16, ge=1)
    speed: Literal["static", "slow", "fast"] = "fast"
    threshold: float = Field(default=DEFAULT_THRESHOLD, gt=0.0)
    threshold_sigma: float = Field(default=0.0, ge=0.0)

    @model_validator(mode="after")
    def _enough_pixels(self) -> "SceneSpec":
        if self.num_points > self.width * self.height:
            raise ValueError(f"cannot sample {self.num_points} points from {self.width}×{self.height} pixels")
        return self

    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics.centered(self.focal or float(self.width), self.width, self.height)


# -- scene description -----------------------------------------------------


@dataclass
class Texture:
    """Two sinusoidal gratings over object coordinates relative to the object center."""

    directions: np.ndarray  # (2, 3) unit vectors
    frequencies: np.ndarray  # (2,) radians per scene unit
    phases: np.ndarray  # (2,)
    base: float = 0.5

    def intensity(self, local: np.ndarray) -> np.ndarray:
        waves = np.sin(local @ self.directions.T * self.frequencies + self.phases)
        return np.clip(self.base + 0.2 * waves.sum(axis=-1), 0.02, 0.98)

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Texture":
        dirs = rng.standard_normal((2, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return cls(dirs, rng.uniform(3.0, 8.0, 2), rng.uniform(0, 2 * np.pi, 2), rng.uniform(0.35, 0.65))


@dataclass
class RigidMotion:
    """Rotation vector (about the object center) and translation over the full interval."""

    rotvec: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def rotation(self, tau: float) -> np.ndarray:
        return Rotation.from_rotvec(tau * np.asarray(self.rotvec, dtype=np.float64)).as_matrix()

    def displacement(self, points: np.ndarray, center: np.ndarray, tau: float) -> np.ndarray:
        """Motion of frame-0 points up to time ``tau``."""
        rel = points - center
        return tau * self.translation + rel @ (self.rotation(tau) - np.eye(3)).T


@dataclass
class PlanePatch:
    center: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    half_u: float
    half_v: float
    texture: Texture
    motion: RigidMotion = field(default_factory=RigidMotion)

    def intersect(self, origin: np.ndarray, direction: np.ndarray) -> np.ndarray:
        normal = np.cross(self.axis_u, self.axis_v)
        denom = direction @ normal
        safe = np.where(np.abs(denom) > 1e-12, denom, 1.0)
        t = ((self.center - origin) @ normal) / safe
        hit = origin + t[:, None] * direction
        local = hit - self.center
        inside = (
            (np.abs(denom) > 1e-12) & (t > 0)
            & (np.abs(local @ self.axis_u) <= self.half_u) & (np.abs(local @ self.axis_v) <= self.half_v)
        )
        return np.where(inside, t, np.inf)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    texture: Texture
    motion: RigidMotion = field(default_factory=RigidMotion)

    def intersect(self, origin: np.ndarray, direction: np.ndarray) -> np.ndarray:
        oc = origin - self.center
        a = np.einsum("ij,ij->i", direction, direction)
        b = np.einsum("ij,ij->i", oc, direction)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius ** 2
        disc = b * b - a * c
        t = (-b - np.sqrt(np.maximum(disc, 0.0))) / a
        return np.where((disc >= 0) & (t > 0), t, np.inf)


SceneObject = Union[PlanePatch, Sphere]


@dataclass
class Scene:
    objects: List[SceneObject]
    background: Texture
    background_depth: float = BACKGROUND_DEPTH


@dataclass
class Hit:
    """Nearest surface along each ray. ``ids`` is 0 for the background, i+1 for object i."""

    depth: np.ndarray
    ids: np.ndarray
    points: np.ndarray  # frame-0 (object) coordinates of the hit
    intensity: np.ndarray


def _rays(uv: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    return np.stack([(uv[:, 0] - cam.cx) / cam.f, (uv[:, 1] - cam.cy) / cam.f, np.ones(len(uv))], axis=1)


def cast(scene: Scene, uv: np.ndarray, cam: CameraIntrinsics, tau: float) -> Hit:
    """
    Cast rays through pixel coordinates at time ``tau``.

    Ray directions have unit z so the ray parameter is the depth.
    """
    d = _rays(np.asarray(uv, dtype=np.float64), cam)
    depth = np.full(len(d), scene.background_depth)
    ids = np.zeros(len(d), dtype=np.int64)
    points = d * scene.background_depth
    for i, obj in enumerate(scene.objects, start=1):
        rot = obj.motion.rotation(tau)
        moved_center = obj.center + tau * obj.motion.translation
        origin = obj.center + rot.T @ (-moved_center)
        direction = d @ rot
        t = obj.intersect(np.broadcast_to(origin, d.shape), direction)
        closer = t < depth
        depth = np.where(closer, t, depth)
        ids = np.where(closer, i, ids)
        t_hit = np.where(closer, t, 0.0)
        points = np.where(closer[:, None], origin + t_hit[:, None] * direction, points)

    intensity = scene.background.intensity(points)
    for i, obj in enumerate(scene.objects, start=1):
        mask = ids == i
        if mask.any():
            intensity[mask] = obj.texture.intensity(points[mask] - obj.center)
    return Hit(depth, ids, points, intensity)


def _displacement(scene: Scene, hit: Hit, tau: float) -> np.ndarray:
    disp = np.zeros_like(hit.points)
    for i, obj in enumerate(scene.objects, start=1):
        mask = hit.ids == i
        if mask.any():
            disp[mask] = obj.motion.displacement(hit.points[mask], obj.center, tau)
    return disp


def _project(points: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    return np.stack([cam.f * points[:, 0] / points[:, 2] + cam.cx,
                     cam.f * points[:, 1] / points[:, 2] + cam.cy], axis=1)


def _check_in_view(scene: Scene, cam: CameraIntrinsics, substeps: int) -> None:
    for i, obj in enumerate(scene.objects):
        for tau in np.linspace(0.0, 1.0, substeps + 1):
            c = obj.center + tau * obj.motion.translation
            extent = obj.radius if isinstance(obj, Sphere) else max(obj.half_u, obj.half_v)
            if c[2] - extent < NEAR_PLANE:
                raise SpecError(f"object {i} comes closer than the near plane at t={tau:.3f}")
            u, v = _project(c[None, :], cam)[0]
            if not (0 <= u < cam.width and 0 <= v < cam.height):
                raise SpecError(f"object {i} leaves the view at t={tau:.3f}")


def random_scene(spec: SceneSpec, rng: np.random.Generator) -> Scene:
    """
    Draw objects, textures and rigid motions.

    All draws are made before the speed class is applied so that scenes with the
    same seed differ only in motion magnitude.
    """
    cam = spec.camera()
    count = spec.num_objects or int(rng.integers(1, 6))
    scale = SPEED_SCALE[spec.speed]
    objects: List[SceneObject] = []
    for _ in range(count):
        z = rng.uniform(3.0, 6.0)
        u = rng.uniform(0.25, 0.75) * cam.width
        v = rng.uniform(0.25, 0.75) * cam.height
        center = np.array([(u - cam.cx) * z / cam.f, (v - cam.cy) * z / cam.f, z])
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        rotvec = axis * rng.uniform(0.0, MAX_ROTATION) * scale
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        translation = direction * rng.uniform(0.0, MAX_TRANSLATION_FRACTION * z) * scale
        motion = RigidMotion(rotvec, translation)
        texture = Texture.random(rng)
        if rng.uniform() < 0.5:
            tilt = rng.standard_normal(3)
            tilt *= rng.uniform(0.0, np.deg2rad(30.0)) / np.linalg.norm(tilt)
            frame = Rotation.from_rotvec(tilt).as_matrix()
            objects.append(PlanePatch(center, frame[:, 0], frame[:, 1], rng.uniform(0.4, 1.0),
                                      rng.uniform(0.4, 1.0), texture, motion))
        else:
            objects.append(Sphere(center, rng.uniform(0.3, 0.7), texture, motion))
    return Scene(objects, Texture.random(rng))


def render_sample(scene: Scene, spec: SceneSpec, rng: np.random.Generator) -> Sample:
    """
    Render frames, events, point clouds and ground truth of a fixed scene.

    Raises:
        SpecError: when an object leaves the view or moves behind the camera
    """
    cam = spec.camera()
    h, w = spec.height, spec.width
    _check_in_view(scene, cam, spec.substeps)
    grid = pixel_grid(h, w)

    hit0 = cast(scene, grid, cam, 0.0)
    moved = hit0.points + _displacement(scene, hit0, 1.0)
    if np.any(moved[:, 2] <= NEAR_PLANE * 0.5):
        raise SpecError("a visible surface point moves behind the camera")
    sceneflow = moved - hit0.points
    uv1 = _project(moved, cam)
    flow = uv1 - grid

    hit1 = cast(scene, uv1, cam, 1.0)
    outside = (uv1[:, 0] < 0) | (uv1[:, 0] > w - 1) | (uv1[:, 1] < 0) | (uv1[:, 1] > h - 1)
    hidden = (hit1.ids != hit0.ids) | (
        np.abs(hit1.depth - moved[:, 2]) > OCCLUSION_DEPTH_TOL * np.maximum(1.0, moved[:, 2])
    )
    occ = outside | hidden

    frames = [hit0.intensity.reshape(h, w)]
    for i in range(1, spec.substeps + 1):
        last = cast(scene, grid, cam, i / spec.substeps)
        frames.append(last.intensity.reshape(h, w))
    frames = np.stack(frames)
    events = simulate_events(frames, spec.threshold, 0.0, 1.0, sigma=spec.threshold_sigma, rng=rng)

    rays = _rays(grid, cam)
    idx0 = np.sort(rng.choice(h * w, spec.num_points, replace=False))
    frame1_points = rays * last.depth[:, None]
    idx1 = np.sort(rng.choice(h * w, spec.num_points, replace=False))

    return Sample(
        rgb0=frames[0],
        rgb1=frames[-1],
        pc0=hit0.points[idx0],
        pc1=frame1_points[idx1],
        events=events,
        flow=flow.reshape(h, w, 2),
        sceneflow=sceneflow[idx0],
        valid=np.ones((h, w), dtype=bool),
        occ2d=occ.reshape(h, w),
        occ3d=occ[idx0],
        cam=cam,
        meta={"seed": spec.seed, "speed": spec.speed, "substeps": spec.substeps, "threshold": spec.threshold,
              "objects": len(scene.objects)},
    )


def generate(spec: SceneSpec) -> Sample:
    """
    Generate one sample, redrawing the scene when an object leaves the view.

    Raises:
        SpecError: after 10 failed attempts
    """
    rng = np.random.default_rng(spec.seed)
    last: Optional[SpecError] = None
    for attempt in range(MAX_ATTEMPTS):
        scene = random_scene(spec, rng)
        try:
            return render_sample(scene, spec, rng)
        except SpecError as exc:
            last = exc
            logger.debug("scene attempt %d rejected: %s", attempt, exc)
    raise SpecError(f"could not realize scene with seed {spec.seed} in {MAX_ATTEMPTS} attempts: {last}")


def sample_seed(seed: int, index: int) -> int:
    """Seed of sample ``index`` in a dataset generated from ``seed``."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def split_counts(count: int, train_ratio: float) -> Tuple[int, int]:
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    if not 0.0 <= train_ratio <= 1.0:
        raise ConfigError(f"train ratio must lie in [0, 1], got {train_ratio}")
    n_train = int(round(count * train_ratio))
    return n_train, count - n_train


def make_dataset(
    count: int,
    out_dir: Union[str, Path],
    seed: int = 0,
    train_ratio: float = 0.75,
    template: Optional[SceneSpec] = None,
) -> Dict[str, object]:
    """
    Generate ``count`` samples under ``out_dir`` and write ``manifest.json``.

    Args:
        count: Number of samples
        out_dir: Dataset directory
        seed: Dataset seed; sample i uses ``sample_seed(seed, i)``
        train_ratio: Fraction of samples in the train split (first samples)
        template: Scene parameters shared by all samples (its seed is ignored)

    Returns:
        The manifest written
    """
    n_train, _ = split_counts(count, train_ratio)
    template = template or SceneSpec()
    out_dir = Path(out_dir)
    names = []
    for i in range(count):
        name = f"sample_{i:04d}"
        spec = template.model_copy(update={"seed": sample_seed(seed, i)})
        sample = generate(spec)
        path = storage.write_sample(out_dir / name, sample)
        log_sample_written(logger, name, str(path))
        names.append(name)
    record_samples("gen", count)
    manifest = {
        "seed": seed,
        "count": count,
        "scene": template.model_dump(exclude={"seed"}),
        "splits": {"train": names[:n_train], "val": names[n_train:]},
    }
    storage.write_manifest(out_dir, manifest)
    return manifest
