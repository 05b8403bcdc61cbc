"""Gaussian-cloud parameterization, activations and point-set initialization."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

OPACITY_MIN = 0.004
OPACITY_MAX = 0.99


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def inverse_sigmoid(y):
    y = np.asarray(y)
    return np.log(y / (1.0 - y))


class InvalidCloudError(ValueError):
    pass


@dataclass
class GaussianCloud:
    """Raw (unconstrained) per-Gaussian parameters.

    Arrays share one floating dtype; float32 is the production precision and
    float64 the reference path used by gradient checks.
    """

    positions: np.ndarray  # N x 3
    log_scales: np.ndarray  # N x 3
    rotations: np.ndarray  # N x 4, (w, x, y, z), unnormalized
    color_params: np.ndarray  # N x 3, sigmoid logits
    opacity_logits: np.ndarray  # N x 1
    snapshot_positions: Optional[np.ndarray] = None

    PARAM_GROUPS = ("positions", "log_scales", "rotations", "color_params", "opacity_logits")

    def __post_init__(self):
        n = self.positions.shape[0]
        shapes = {
            "positions": (n, 3),
            "log_scales": (n, 3),
            "rotations": (n, 4),
            "color_params": (n, 3),
            "opacity_logits": (n, 1),
        }
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise InvalidCloudError(f"{name} has shape {arr.shape}, expected {shape}")
        if n < 1:
            raise InvalidCloudError("a Gaussian cloud needs at least one Gaussian")
        if self.snapshot_positions is not None and self.snapshot_positions.shape != (n, 3):
            raise InvalidCloudError("snapshot_positions must match positions")

    def __len__(self):
        return self.positions.shape[0]

    @property
    def dtype(self):
        return self.positions.dtype

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_GROUPS}

    def copy(self) -> "GaussianCloud":
        snap = None if self.snapshot_positions is None else self.snapshot_positions.copy()
        return GaussianCloud(**{k: v.copy() for k, v in self.params().items()}, snapshot_positions=snap)

    def astype(self, dtype) -> "GaussianCloud":
        """Always a copy, so callers may update the result in place."""
        snap = None if self.snapshot_positions is None else self.snapshot_positions.astype(dtype)
        return GaussianCloud(
            **{k: np.array(v, dtype=dtype, order="C") for k, v in self.params().items()},
            snapshot_positions=snap,
        )

    def select(self, index) -> "GaussianCloud":
        snap = None if self.snapshot_positions is None else self.snapshot_positions[index]
        return GaussianCloud(**{k: v[index] for k, v in self.params().items()}, snapshot_positions=snap)

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        if (self.snapshot_positions is None) != (other.snapshot_positions is None):
            raise InvalidCloudError("cannot concatenate clouds with and without snapshots")
        snap = None
        if self.snapshot_positions is not None:
            snap = np.concatenate([self.snapshot_positions, other.snapshot_positions])
        return GaussianCloud(
            **{k: np.concatenate([v, getattr(other, k).astype(v.dtype)]) for k, v in self.params().items()},
            snapshot_positions=snap,
        )

    def with_snapshot(self) -> "GaussianCloud":
        return replace(self, snapshot_positions=self.positions.copy())

    def check_finite(self):
        for name, arr in self.params().items():
            bad = np.argwhere(~np.isfinite(arr))
            if len(bad):
                raise InvalidCloudError(f"non-finite {name} at Gaussian index {int(bad[0, 0])}")


@dataclass
class ActivatedGaussians:
    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray  # unit quaternions
    colors: np.ndarray
    opacities: np.ndarray  # N x 1
    covariances: np.ndarray = field(repr=False)

    def __len__(self):
        return self.positions.shape[0]


@dataclass
class InitConfig:
    fixed_scale: float = 0.02
    fixed_opacity_logit: float = float(np.log(0.1 / 0.9))
    color_seed: int = 0
    n_points: int = 4096

    def __post_init__(self):
        if not self.fixed_scale > 0:
            raise ValueError("fixed_scale must be positive")
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions (w, x, y, z); works on (..., 4)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def normalize_quat(q: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("zero-norm quaternion")
    return q / norm


def covariance_from(scale, quat) -> np.ndarray:
    """R diag(scale)^2 R^T for one (3,) / (4,) pair or batched (..., 3) / (..., 4)."""
    scale = np.asarray(scale, dtype=np.float64)
    quat = np.asarray(quat, dtype=np.float64)
    if np.any(scale <= 0):
        raise ValueError("scales must be positive")
    rot = quat_to_rotmat(normalize_quat(quat))
    m = rot * scale[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def activate(cloud: GaussianCloud) -> ActivatedGaussians:
    cloud.check_finite()
    scales = np.exp(cloud.log_scales)
    quats = normalize_quat(cloud.rotations)
    opac = np.clip(sigmoid(cloud.opacity_logits), OPACITY_MIN, OPACITY_MAX)
    rot = quat_to_rotmat(quats)
    m = rot * scales[:, None, :]
    return ActivatedGaussians(
        positions=cloud.positions,
        scales=scales,
        rotations=quats,
        colors=sigmoid(cloud.color_params),
        opacities=opac,
        covariances=m @ np.swapaxes(m, -1, -2),
    )


def init_from_points(
    points: np.ndarray,
    colors_mode: str = "random",
    cfg: InitConfig | None = None,
    seed: int | None = None,
    colors: np.ndarray | None = None,
    dtype=np.float32,
) -> GaussianCloud:
    """Build a cloud with one Gaussian per point: fixed scale and opacity, identity rotation."""
    cfg = cfg or InitConfig()
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError("points must be M x 3")
    if len(points) == 0:
        raise ValueError("empty point set")
    m = len(points)
    if colors_mode == "random":
        rng = np.random.default_rng(cfg.color_seed if seed is None else seed)
        color_params = inverse_sigmoid(rng.uniform(0.05, 0.95, size=(m, 3)))
    elif colors_mode == "given":
        if colors is None or np.shape(colors) != (m, 3):
            raise ValueError("colors_mode='given' requires an M x 3 color array")
        color_params = inverse_sigmoid(np.clip(np.asarray(colors, dtype=np.float64), 1e-6, 1 - 1e-6))
    else:
        raise ValueError(f"unknown colors_mode {colors_mode!r}")
    rot = np.zeros((m, 4))
    rot[:, 0] = 1.0
    return GaussianCloud(
        positions=points.copy(),
        log_scales=np.full((m, 3), np.log(cfg.fixed_scale)),
        rotations=rot,
        color_params=color_params,
        opacity_logits=np.full((m, 1), cfg.fixed_opacity_logit),
    ).astype(dtype)


def farthest_point_sample(points: np.ndarray, k: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; ties go to the lowest index."""
    points = np.asarray(points, dtype=np.float64)
    m = len(points)
    if not 1 <= k <= m:
        raise ValueError(f"k={k} must be in [1, {m}]")
    if not 0 <= start < m:
        raise ValueError("start index out of range")
    selected = np.empty(k, dtype=np.int64)
    selected[0] = start
    min_d2 = ((points - points[start]) ** 2).sum(axis=1)
    taken = np.zeros(m, dtype=bool)
    taken[start] = True
    for i in range(1, k):
        cand = np.where(taken, -1.0, min_d2)
        nxt = int(np.argmax(cand))
        selected[i] = nxt
        taken[nxt] = True
        min_d2 = np.minimum(min_d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return selected


def sample_mesh_surface(vertices: np.ndarray, faces: np.ndarray, n: int, seed: int = 0) -> np.ndarray:
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    a, b, c = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if not total > 0:
        raise ValueError("degenerate mesh: zero total area")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(areas)
    tri = np.searchsorted(cdf, rng.uniform(0.0, total, size=n), side="right")
    tri = np.minimum(tri, len(faces) - 1)
    r1 = np.sqrt(rng.uniform(size=(n, 1)))
    r2 = rng.uniform(size=(n, 1))
    return (1 - r1) * a[tri] + r1 * (1 - r2) * b[tri] + r1 * r2 * c[tri]


@dataclass
class SceneNormalization:
    """Affine map scene -> [-1, 1]^3: normalized = (p - center) / scale."""

    center: np.ndarray
    scale: float

    def apply(self, points):
        return (points - self.center) / self.scale

    def invert(self, points):
        return points * self.scale + self.center


def fit_normalization(points: np.ndarray) -> SceneNormalization:
    points = np.asarray(points, dtype=np.float64)
    lo, hi = points.min(axis=0), points.max(axis=0)
    half = float((hi - lo).max()) / 2
    return SceneNormalization(center=(lo + hi) / 2, scale=half if half > 0 else 1.0)


def normalize_points(points: np.ndarray) -> np.ndarray:
    return fit_normalization(points).apply(np.asarray(points, dtype=np.float64))


def blob_scene(n_per_blob: int = 96, seed: int = 0, dtype=np.float32) -> GaussianCloud:
    """Three colored clusters of Gaussians used as a synthetic reconstruction target."""
    rng = np.random.default_rng(seed)
    centers = np.array([[-0.45, -0.15, 0.0], [0.4, -0.1, 0.15], [0.0, 0.4, -0.2]])
    spreads = np.array([0.18, 0.15, 0.2])
    base_colors = np.array([[0.85, 0.2, 0.15], [0.2, 0.75, 0.3], [0.2, 0.3, 0.85]])
    pos, col = [], []
    for c, s, rgb in zip(centers, spreads, base_colors):
        pos.append(c + s * rng.standard_normal((n_per_blob, 3)))
        col.append(np.clip(rgb + 0.05 * rng.standard_normal((n_per_blob, 3)), 0.02, 0.98))
    pos = np.concatenate(pos)
    n = len(pos)
    quats = normalize_quat(rng.standard_normal((n, 4)))
    return GaussianCloud(
        positions=pos,
        log_scales=np.log(rng.uniform(0.05, 0.09, size=(n, 3))),
        rotations=quats,
        color_params=inverse_sigmoid(np.concatenate(col)),
        opacity_logits=np.full((n, 1), inverse_sigmoid(0.9)),
    ).astype(dtype)


def sample_cloud_points(cloud: GaussianCloud, n: int, seed: int = 0) -> np.ndarray:
    """Draw points from the mixture of the cloud's 3D Gaussian densities (uniform over members)."""
    rng = np.random.default_rng(seed)
    act = activate(cloud.astype(np.float64))
    idx = rng.integers(0, len(cloud), size=n)
    chol = np.linalg.cholesky(act.covariances[idx])
    return act.positions[idx] + np.einsum("nij,nj->ni", chol, rng.standard_normal((n, 3)))
