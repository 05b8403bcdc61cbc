"""Pinhole cameras and the stratified pose sampler.

Conventions: right-handed world with +y up, view space looks down -z, pixel
origin at the top-left corner with pixel (x, y) sampled at integer coordinates.
"""
from __future__ import annotations

import ast
from dataclasses import dataclass, field

import numpy as np

# view space (x right, y up, looking down -z) -> image space (x right, y down, z forward)
_FLIP = np.diag([1.0, -1.0, -1.0])


class DegenerateCameraError(ValueError):
    pass


@dataclass
class Camera:
    world_to_camera: np.ndarray
    fov_y: float
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        rot = self.world_to_camera[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1) > 1e-6:
            raise DegenerateCameraError("rotation block must be orthonormal with det +1")
        if not 0 < self.near < self.far:
            raise DegenerateCameraError("need 0 < near < far")
        if not 0 < self.fov_y < 180:
            raise DegenerateCameraError("fov_y must lie in (0, 180) degrees")
        if self.width < 1 or self.height < 1:
            raise DegenerateCameraError("image size must be positive")

    @property
    def focal(self) -> float:
        return 0.5 * self.height / np.tan(np.radians(self.fov_y) / 2)

    @property
    def principal_point(self) -> tuple[float, float]:
        return (self.width - 1) / 2, (self.height - 1) / 2

    @property
    def cv_rotation(self) -> np.ndarray:
        """World -> image-aligned camera frame (x right, y down, z forward)."""
        return _FLIP @ self.world_to_camera[:3, :3]

    @property
    def cv_translation(self) -> np.ndarray:
        return _FLIP @ self.world_to_camera[:3, 3]

    @property
    def position(self) -> np.ndarray:
        rot, t = self.world_to_camera[:3, :3], self.world_to_camera[:3, 3]
        return -rot.T @ t

    def view_depth(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.cv_rotation[2] + self.cv_translation[2]

    def project_points(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates and view depth of world points."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        c = pts @ self.cv_rotation.T + self.cv_translation
        cx, cy = self.principal_point
        f = self.focal
        uv = np.stack([cx + f * c[:, 0] / c[:, 2], cy + f * c[:, 1] / c[:, 2]], axis=1)
        return uv, c[:, 2]

    def ray_directions(self) -> np.ndarray:
        """Unit world-space ray direction through every pixel, H x W x 3."""
        cx, cy = self.principal_point
        xs = (np.arange(self.width) - cx) / self.focal
        ys = (np.arange(self.height) - cy) / self.focal
        gx, gy = np.meshgrid(xs, ys)
        d = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return d @ self.cv_rotation

    def to_kv(self) -> str:
        lines = [
            f"world_to_camera = {self.world_to_camera.tolist()!r}",
            f"fov_y = {float(self.fov_y)!r}",
            f"width = {int(self.width)}",
            f"height = {int(self.height)}",
            f"near = {float(self.near)!r}",
            f"far = {float(self.far)!r}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text: str) -> "Camera":
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            values[key.strip()] = ast.literal_eval(val.strip())
        return cls(
            world_to_camera=np.array(values["world_to_camera"]),
            fov_y=values["fov_y"],
            width=values["width"],
            height=values["height"],
            near=values["near"],
            far=values["far"],
        )


def look_at_camera(eye, target, up=(0.0, 1.0, 0.0), fov_y=50.0, width=64, height=64, near=0.01, far=100.0) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = target - eye
    dist = np.linalg.norm(forward)
    if dist < 1e-12:
        raise DegenerateCameraError("eye and target coincide")
    forward /= dist
    right = np.cross(forward, up)
    rn = np.linalg.norm(right)
    if rn < 1e-9 * max(np.linalg.norm(up), 1e-300):
        raise DegenerateCameraError("up vector is parallel to the view direction")
    right /= rn
    true_up = np.cross(right, forward)
    rot = np.stack([right, true_up, -forward])
    w2c = np.eye(4)
    w2c[:3, :3] = rot
    w2c[:3, 3] = -rot @ eye
    return Camera(w2c, fov_y, width, height, near, far)


def orbit_position(azimuth_deg: float, elevation_deg: float, radius: float, look_at=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Azimuth 0 sits on +z; positive azimuth turns toward +x; elevation lifts toward +y."""
    az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
    offset = radius * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
    return np.asarray(look_at, dtype=np.float64) + offset


@dataclass
class PoseSamplerConfig:
    # stratum count; 0 means one stratum per batch member
    azimuth_strata: int = 0
    elevation_range: tuple[float, float] = (-10.0, 60.0)
    fov_range: tuple[float, float] = (40.0, 70.0)
    radius_range: tuple[float, float] = (3.0, 3.6)
    look_at: tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))

    def __post_init__(self):
        for name in ("elevation_range", "fov_range", "radius_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be ordered")
        if self.azimuth_strata < 0:
            raise ValueError("azimuth_strata must be >= 0")


def sample_azimuths(batch: int, rng: np.random.Generator, strata: int = 0) -> np.ndarray:
    strata = strata or batch
    # member k uses stratum k mod strata
    k = np.arange(batch) % strata
    return (k + rng.uniform(size=batch)) * (360.0 / strata)


def sample_poses(cfg: PoseSamplerConfig, batch: int, rng: np.random.Generator, width: int, height: int) -> list[Camera]:
    if batch < 1:
        raise ValueError("batch must be >= 1")
    az = sample_azimuths(batch, rng, cfg.azimuth_strata)
    el = rng.uniform(*cfg.elevation_range, size=batch)
    fov = rng.uniform(*cfg.fov_range, size=batch)
    rad = rng.uniform(*cfg.radius_range, size=batch)
    cams = []
    for a, e, f, r in zip(az, el, fov, rad):
        eye = orbit_position(a, e, r, cfg.look_at)
        cams.append(look_at_camera(eye, cfg.look_at, fov_y=f, width=width, height=height))
    return cams
