"""Forward rendering: EWA projection, 16x16 tile binning and front-to-back compositing."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from . import _kernels as K
from .camera import Camera
from .gaussians import ActivatedGaussians, GaussianCloud, activate

log = logging.getLogger(__name__)

DEFAULT_WORKERS = 8


@dataclass(frozen=True)
class RenderSettings:
    tile_size: int = 16
    alpha_max: float = 0.99
    alpha_skip: float = 1.0 / 255.0
    t_min: float = 1e-4
    # support radius in standard deviations; None disables truncation entirely
    sigma_cutoff: Optional[float] = 3.0
    dilation: float = 0.3

    @property
    def cutoff_sq(self) -> float:
        return 0.0 if self.sigma_cutoff is None else float(self.sigma_cutoff) ** 2


PRODUCTION = RenderSettings()
NO_THRESHOLDS = RenderSettings(alpha_skip=0.0, t_min=0.0)
# smooth path used by finite-difference checks: no skip, no termination, no truncation
EXACT = RenderSettings(alpha_skip=0.0, t_min=0.0, sigma_cutoff=None)


def worker_count() -> int:
    env = os.environ.get("GSGEN_THREADS")
    if env:
        return max(1, int(env))
    return min(os.cpu_count() or 1, DEFAULT_WORKERS)


@lru_cache(maxsize=None)
def _pool(workers: int) -> ThreadPoolExecutor:
    return ThreadPoolExecutor(max_workers=workers, thread_name_prefix="gsgen-tile")


def run_tiles(kernel, n_tiles: int, workers: int, *args):
    """Run kernel(t0, t1, *args) over contiguous tile chunks; chunks share no output slots."""
    workers = max(1, min(workers, n_tiles))
    if workers == 1:
        kernel(0, n_tiles, *args)
        return
    bounds = np.linspace(0, n_tiles, workers + 1).astype(int)
    futures = [_pool(workers).submit(kernel, int(a), int(b), *args) for a, b in zip(bounds[:-1], bounds[1:])]
    for fut in futures:
        fut.result()


@dataclass
class Projected:
    """Screen-space Gaussians, one row per source Gaussian (culled rows have radius 0)."""

    mean2d: np.ndarray
    conic: np.ndarray  # packed (a, b, c) of [[a, b], [b, c]]
    cov2d: np.ndarray
    depth: np.ndarray
    radius: np.ndarray
    rect: np.ndarray  # tile rectangle [tx0, ty0, tx1, ty1)
    colors: np.ndarray
    opacities: np.ndarray

    @property
    def visible(self) -> np.ndarray:
        return self.radius > 0

    @property
    def source_index(self) -> np.ndarray:
        return np.flatnonzero(self.visible)

    def __len__(self):
        return int(self.visible.sum())


@dataclass
class TileBins:
    tile_size: int
    tiles_x: int
    tiles_y: int
    entry_gauss: np.ndarray  # flat duplicated-key array, grouped by tile then depth
    entry_tile: np.ndarray
    ranges: np.ndarray  # n_tiles x 2 slice bounds into the entry arrays

    @property
    def n_tiles(self) -> int:
        return self.tiles_x * self.tiles_y

    def tile_list(self, tile_id: int) -> np.ndarray:
        a, b = self.ranges[tile_id]
        return self.entry_gauss[a:b]


class BackgroundModel:
    """Per-ray background color: a small tanh perceptron with sigmoid output, or a constant."""

    def __init__(self, kind: str = "mlp", width: int = 16, color=(1.0, 1.0, 1.0), params=None, seed: int = 0,
                 dtype=np.float32):
        if kind not in ("mlp", "constant"):
            raise ValueError(f"unknown background kind {kind!r}")
        self.kind = kind
        self.width = width
        self.color = np.asarray(color, dtype=np.float64)
        if kind == "constant":
            self.params = np.zeros(0, dtype=dtype)
        elif params is not None:
            self.params = np.asarray(params, dtype=dtype).copy()
            if self.params.size != self.n_params():
                raise ValueError("background parameter vector has the wrong size")
        else:
            rng = np.random.default_rng(seed)
            parts = []
            for fan_in, fan_out in self._layer_shapes():
                parts.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)).ravel())
                parts.append(np.zeros(fan_out))
            self.params = np.concatenate(parts).astype(dtype)
        self._warned = False

    @classmethod
    def constant(cls, color=(1.0, 1.0, 1.0), dtype=np.float32):
        return cls("constant", color=color, dtype=dtype)

    def _layer_shapes(self):
        w = self.width
        return [(3, w), (w, w), (w, 3)]

    def n_params(self) -> int:
        return sum(a * b + b for a, b in self._layer_shapes()) if self.kind == "mlp" else 0

    def layers(self, params=None):
        params = self.params if params is None else params
        out, k = [], 0
        for fan_in, fan_out in self._layer_shapes():
            w = params[k:k + fan_in * fan_out].reshape(fan_in, fan_out)
            k += fan_in * fan_out
            b = params[k:k + fan_out]
            k += fan_out
            out.append((w, b))
        return out

    def copy(self) -> "BackgroundModel":
        bg = BackgroundModel(self.kind, self.width, self.color, params=self.params if self.kind == "mlp" else None,
                             dtype=self.params.dtype)
        return bg

    def astype(self, dtype) -> "BackgroundModel":
        bg = self.copy()
        bg.params = bg.params.astype(dtype)
        return bg


def background_eval(model: BackgroundModel, dirs: np.ndarray, with_cache: bool = False):
    """Evaluate the background for H x W x 3 ray directions."""
    norms = np.linalg.norm(dirs, axis=-1, keepdims=True)
    if not np.allclose(norms, 1.0, atol=1e-5):
        if not model._warned:
            log.warning("background directions are not unit length; normalizing")
            model._warned = True
        dirs = dirs / norms
    shape = dirs.shape[:-1]
    if model.kind == "constant":
        rgb = np.broadcast_to(model.color, shape + (3,)).astype(np.float64)
        return (rgb, None) if with_cache else rgb
    x = dirs.reshape(-1, 3).astype(np.float64)
    (w1, b1), (w2, b2), (w3, b3) = [(w.astype(np.float64), b.astype(np.float64)) for w, b in model.layers()]
    h1 = np.tanh(x @ w1 + b1)
    h2 = np.tanh(h1 @ w2 + b2)
    rgb = 1.0 / (1.0 + np.exp(-(h2 @ w3 + b3)))
    rgb_img = rgb.reshape(shape + (3,))
    return (rgb_img, (x, h1, h2, rgb)) if with_cache else rgb_img


def background_backward(model: BackgroundModel, cache, d_rgb: np.ndarray) -> np.ndarray:
    if model.kind == "constant":
        return np.zeros(0)
    x, h1, h2, rgb = cache
    (w1, _), (w2, _), (w3, _) = [(w.astype(np.float64), b) for w, b in model.layers()]
    g3 = d_rgb.reshape(-1, 3) * rgb * (1.0 - rgb)
    dw3, db3 = h2.T @ g3, g3.sum(0)
    g2 = (g3 @ w3.T) * (1.0 - h2 * h2)
    dw2, db2 = h1.T @ g2, g2.sum(0)
    g1 = (g2 @ w2.T) * (1.0 - h1 * h1)
    dw1, db1 = x.T @ g1, g1.sum(0)
    return np.concatenate([dw1.ravel(), db1, dw2.ravel(), db2, dw3.ravel(), db3])


def project(act: ActivatedGaussians, cam: Camera, settings: RenderSettings = PRODUCTION) -> Projected:
    n = len(act)
    dt = act.positions.dtype
    mean2d = np.zeros((n, 2), dt)
    conic = np.zeros((n, 3), dt)
    cov2d = np.zeros((n, 3), dt)
    depth = np.zeros(n, dt)
    radius = np.zeros(n, np.float64)
    rect = np.zeros((n, 4), np.int64)
    cx, cy = cam.principal_point
    K.project_kernel(
        np.ascontiguousarray(act.positions), np.ascontiguousarray(act.scales), np.ascontiguousarray(act.rotations),
        cam.cv_rotation, cam.cv_translation, cam.focal, cx, cy, cam.near,
        settings.dilation, -1.0 if settings.sigma_cutoff is None else float(settings.sigma_cutoff),
        cam.width, cam.height, settings.tile_size,
        mean2d, conic, depth, radius, rect, cov2d,
    )
    return Projected(mean2d, conic, cov2d, depth, radius, rect,
                     np.ascontiguousarray(act.colors), np.ascontiguousarray(act.opacities[:, 0]))


def bin_tiles(proj: Projected, width: int, height: int, tile_size: int = 16) -> TileBins:
    tx = (width + tile_size - 1) // tile_size
    ty = (height + tile_size - 1) // tile_size
    counts = (proj.rect[:, 2] - proj.rect[:, 0]) * (proj.rect[:, 3] - proj.rect[:, 1])
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    total = int(offsets[-1])
    gauss = np.empty(total, np.int64)
    tiles = np.empty(total, np.int64)
    K.fill_entries(proj.rect, offsets, tx, gauss, tiles)
    # stable order: tile, then depth, then source index
    order = np.lexsort((gauss, proj.depth[gauss], tiles))
    gauss, tiles = gauss[order], tiles[order]
    bounds = np.searchsorted(tiles, np.arange(tx * ty + 1))
    ranges = np.stack([bounds[:-1], bounds[1:]], axis=1).astype(np.int64)
    return TileBins(tile_size, tx, ty, gauss, tiles, ranges)


@dataclass
class Tape:
    """Forward state the backward pass needs; treat as immutable."""

    settings: RenderSettings
    camera: Camera
    act: ActivatedGaussians
    proj: Projected
    bins: TileBins
    background: BackgroundModel
    bg_rgb: np.ndarray
    bg_cache: object
    stop: np.ndarray
    final_rgb: np.ndarray
    final_a: np.ndarray
    final_d: np.ndarray
    final_m2: np.ndarray
    transmittance: np.ndarray
    raw_rotations: np.ndarray
    n_gaussians: int


@dataclass
class RenderOutput:
    color: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray  # composited sum of w_i z_i
    depth_normalized: np.ndarray
    zvar: np.ndarray
    transmittance: np.ndarray
    tape: Optional[Tape] = field(default=None, repr=False)


def _moments(alpha, d, m2):
    safe = alpha > 1e-8
    a = np.where(safe, alpha, 1.0)
    mean = np.where(safe, d / a, 0.0)
    var = np.where(safe, m2 / a - mean * mean, 0.0)
    return mean, var


def composite(bins: TileBins, proj: Projected, cam: Camera, background: BackgroundModel,
              settings: RenderSettings = PRODUCTION, workers: int | None = None):
    """Alpha-composite every tile; returns the RenderOutput plus raw per-pixel buffers."""
    h, w = cam.height, cam.width
    dt = proj.mean2d.dtype
    rgb = np.empty((h, w, 3), np.float64)
    trans = np.empty((h, w), np.float64)
    dbuf = np.empty((h, w), np.float64)
    m2 = np.empty((h, w), np.float64)
    stop = np.empty((h, w), np.int64)
    run_tiles(
        K.composite_tiles, bins.n_tiles, worker_count() if workers is None else workers,
        bins.tile_size, w, h, bins.ranges, bins.entry_gauss,
        proj.mean2d, proj.conic, proj.depth, proj.colors, proj.opacities,
        settings.alpha_max, settings.alpha_skip, settings.t_min, settings.cutoff_sq,
        rgb, trans, dbuf, m2, stop,
    )
    bg_rgb, bg_cache = background_eval(background, cam.ray_directions(), with_cache=True)
    final_rgb = rgb + trans[..., None] * bg_rgb
    alpha = 1.0 - trans
    mean, var = _moments(alpha, dbuf, m2)
    out = RenderOutput(
        color=final_rgb.astype(dt), alpha=alpha.astype(dt), depth=dbuf.astype(dt),
        depth_normalized=mean.astype(dt), zvar=var.astype(dt), transmittance=trans.astype(dt),
    )
    buffers = dict(bg_rgb=bg_rgb, bg_cache=bg_cache, stop=stop, final_rgb=final_rgb, final_a=alpha,
                   final_d=dbuf, final_m2=m2, transmittance=trans)
    return out, buffers


def render(cloud: GaussianCloud, cam: Camera, background: BackgroundModel,
           settings: RenderSettings = PRODUCTION, workers: int | None = None) -> RenderOutput:
    act = activate(cloud)
    proj = project(act, cam, settings)
    bins = bin_tiles(proj, cam.width, cam.height, settings.tile_size)
    out, buf = composite(bins, proj, cam, background, settings, workers)
    out.tape = Tape(settings=settings, camera=cam, act=act, proj=proj, bins=bins, background=background,
                    raw_rotations=np.ascontiguousarray(cloud.rotations), n_gaussians=len(cloud), **buf)
    return out


def brute_force_render(cloud: GaussianCloud, cam: Camera, background: BackgroundModel,
                       settings: RenderSettings = NO_THRESHOLDS) -> RenderOutput:
    """Reference renderer: no tiles, one global depth sort, no early termination.

    Honors the per-contribution rules of ``settings`` (alpha clamp, alpha skip,
    support cutoff, dilation) but ignores ``t_min``. Projection is recomputed
    here with plain numpy so the check does not share code with the kernels.
    """
    act = activate(cloud.astype(np.float64))
    rot = cam.cv_rotation
    c = act.positions @ rot.T + cam.cv_translation
    keep = c[:, 2] > cam.near
    f = cam.focal
    cx, cy = cam.principal_point
    x, y, z = c[keep, 0], c[keep, 1], c[keep, 2]
    jac = np.zeros((len(z), 2, 3))
    jac[:, 0, 0] = f / z
    jac[:, 0, 2] = -f * x / z**2
    jac[:, 1, 1] = f / z
    jac[:, 1, 2] = -f * y / z**2
    jw = jac @ rot
    cov2 = jw @ act.covariances[keep] @ np.swapaxes(jw, 1, 2) + settings.dilation * np.eye(2)
    inv = np.linalg.inv(cov2)
    mu = np.stack([cx + f * x / z, cy + f * y / z], axis=1)
    opac = act.opacities[keep, 0]
    cols = act.colors[keep]
    idx = np.flatnonzero(keep)
    order = np.lexsort((idx, z))
    mu, inv, opac, cols, z = mu[order], inv[order], opac[order], cols[order], z[order]

    h, w = cam.height, cam.width
    gy, gx = np.mgrid[0:h, 0:w]
    pix = np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.float64)
    d = pix[:, None, :] - mu[None, :, :]  # P x N x 2
    q = (inv[None, :, 0, 0] * d[..., 0] ** 2 + 2 * inv[None, :, 0, 1] * d[..., 0] * d[..., 1]
         + inv[None, :, 1, 1] * d[..., 1] ** 2)
    alpha = np.minimum(opac[None, :] * np.exp(-0.5 * q), settings.alpha_max)
    if settings.sigma_cutoff is not None:
        alpha = np.where(q > settings.sigma_cutoff**2, 0.0, alpha)
    alpha = np.where(alpha < settings.alpha_skip, 0.0, alpha)
    trans_before = np.cumprod(np.concatenate([np.ones((len(pix), 1)), 1.0 - alpha], axis=1), axis=1)
    weights = alpha * trans_before[:, :-1]
    t_final = trans_before[:, -1]
    bg = background_eval(background, cam.ray_directions()).reshape(-1, 3)
    color = weights @ cols + t_final[:, None] * bg
    dsum = weights @ z
    m2 = weights @ (z * z)
    a = 1.0 - t_final
    mean, var = _moments(a, dsum, m2)
    shape = (h, w)
    return RenderOutput(color=color.reshape(h, w, 3), alpha=a.reshape(shape), depth=dsum.reshape(shape),
                        depth_normalized=mean.reshape(shape), zvar=var.reshape(shape),
                        transmittance=t_final.reshape(shape))
