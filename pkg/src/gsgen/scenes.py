"""Random test scenes shared by the gradient checker, tests and scripts."""
from __future__ import annotations

import numpy as np

from .camera import Camera, look_at_camera, orbit_position
from .gaussians import GaussianCloud, normalize_quat
from .rasterizer import BackgroundModel


def random_cloud(rng: np.random.Generator, n: int, extent: float = 0.6, scale_range=(0.05, 0.2),
                 dtype=np.float64) -> GaussianCloud:
    return GaussianCloud(
        positions=rng.uniform(-extent, extent, size=(n, 3)),
        log_scales=np.log(rng.uniform(*scale_range, size=(n, 3))),
        rotations=normalize_quat(rng.standard_normal((n, 4))) * rng.uniform(0.5, 2.0, size=(n, 1)),
        color_params=rng.normal(0.0, 1.0, size=(n, 3)),
        opacity_logits=rng.uniform(-2.0, 3.0, size=(n, 1)),
    ).astype(dtype)


def random_camera(rng: np.random.Generator, size: int = 64, radius_range=(2.5, 3.5)) -> Camera:
    eye = orbit_position(rng.uniform(0, 360), rng.uniform(-30, 60), rng.uniform(*radius_range))
    return look_at_camera(eye, rng.uniform(-0.1, 0.1, size=3), fov_y=rng.uniform(40, 60), width=size, height=size)


def random_background(rng: np.random.Generator, dtype=np.float64) -> BackgroundModel:
    if rng.uniform() < 0.5:
        return BackgroundModel.constant(rng.uniform(0, 1, size=3), dtype=dtype)
    return BackgroundModel("mlp", seed=int(rng.integers(2**31)), dtype=dtype)


def random_scene(seed: int, n_max: int = 256, size: int = 64, dtype=np.float64, mlp_background: bool | None = None):
    """(cloud, camera, background) with 1..n_max Gaussians."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, n_max + 1))
    cloud = random_cloud(rng, n, dtype=dtype)
    cam = random_camera(rng, size)
    if mlp_background is None:
        bg = random_background(rng, dtype)
    elif mlp_background:
        bg = BackgroundModel("mlp", seed=seed, dtype=dtype)
    else:
        bg = BackgroundModel.constant(rng.uniform(0, 1, size=3), dtype=dtype)
    return cloud, cam, bg
