"""Adaptive density control: gradient-driven split, compactness fill-in and pruning."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numba as nb
import numpy as np

from .gaussians import OPACITY_MAX, OPACITY_MIN, GaussianCloud, quat_to_rotmat, normalize_quat, sigmoid

log = logging.getLogger(__name__)


@dataclass
class DensifyConfig:
    t_pos: float = 0.02
    split_interval: int = 500
    compact_interval: int = 1000
    prune_interval: int = 200
    alpha_min: float = 0.05
    knn_k: int = 3
    split_scale_divisor: float = 1.6
    max_world_radius: float = 0.5
    # fraction of image width
    max_view_radius_frac: float = 0.2
    compactness_condition: str = "overlap"
    # stop densifying after this iteration (0 = never stop)
    densify_until: int = 0

    def __post_init__(self):
        for name in ("t_pos", "alpha_min", "split_scale_divisor", "max_world_radius", "max_view_radius_frac"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("split_interval", "compact_interval", "prune_interval", "knn_k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.compactness_condition not in ("overlap", "gap"):
            raise ValueError("compactness_condition must be 'overlap' or 'gap'")


@dataclass
class GradAccumulator:
    grad_sum: np.ndarray
    counts: np.ndarray
    max_screen_radius: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradAccumulator":
        # float32 so checkpoints hold the exact running state
        return cls(np.zeros(n, np.float32), np.zeros(n, np.int64), np.zeros(n, np.float32))

    def __len__(self):
        return len(self.counts)

    def average(self) -> np.ndarray:
        return self.grad_sum.astype(np.float64) / np.maximum(self.counts, 1)

    def reset(self, n: Optional[int] = None) -> "GradAccumulator":
        return GradAccumulator.zeros(len(self) if n is None else n)

    def remap(self, parent: np.ndarray) -> "GradAccumulator":
        """Carry statistics over an index map (parent[i] = old index or -1 for new Gaussians)."""
        keep = parent >= 0
        out = GradAccumulator.zeros(len(parent))
        out.grad_sum[keep] = self.grad_sum[parent[keep]]
        out.counts[keep] = self.counts[parent[keep]]
        out.max_screen_radius[keep] = self.max_screen_radius[parent[keep]]
        return out


def accumulate(acc: GradAccumulator, grads) -> GradAccumulator:
    norms = grads.view_space_pos_grad_norm[:, 0]
    if len(norms) != len(acc):
        raise ValueError(f"accumulator holds {len(acc)} Gaussians, gradients {len(norms)}")
    vis = grads.visible
    acc.grad_sum[vis] += norms[vis].astype(np.float32)
    acc.counts[vis] += 1
    np.maximum(acc.max_screen_radius, grads.screen_radius.astype(np.float32), out=acc.max_screen_radius)
    return acc


# --- k-d tree ---------------------------------------------------------------

class KdTree:
    """Static 3D k-d tree; query(p, k) returns the k nearest points, ties by lower index."""

    def __init__(self, points: np.ndarray, leaf_size: int = 8):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        n = len(self.points)
        if n == 0:
            raise ValueError("cannot build a k-d tree over zero points")
        self.perm = np.arange(n, dtype=np.int64)
        max_nodes = 2 * (n // max(leaf_size, 1) + 1) * 2 + 1
        self.lo = np.zeros(max_nodes, np.int64)
        self.hi = np.zeros(max_nodes, np.int64)
        self.dim = np.full(max_nodes, -1, np.int64)
        self.split = np.zeros(max_nodes)
        self.left = np.full(max_nodes, -1, np.int64)
        self.right = np.full(max_nodes, -1, np.int64)
        self.n_nodes = 0
        self._build(0, n, leaf_size)

    def _build(self, lo: int, hi: int, leaf_size: int) -> int:
        node = self.n_nodes
        self.n_nodes += 1
        self.lo[node], self.hi[node] = lo, hi
        if hi - lo <= leaf_size:
            return node
        idx = self.perm[lo:hi]
        pts = self.points[idx]
        d = int(np.argmax(pts.max(0) - pts.min(0)))
        mid = (hi - lo) // 2
        order = np.argsort(pts[:, d], kind="stable")
        self.perm[lo:hi] = idx[order]
        self.dim[node] = d
        self.split[node] = self.points[self.perm[lo + mid], d]
        self.left[node] = self._build(lo, lo + mid, leaf_size)
        self.right[node] = self._build(lo + mid, hi, leaf_size)
        return node

    def query(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Squared distances and indices of the k nearest stored points, sorted by (distance, index)."""
        q = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
        k = min(k, len(self.points))
        dist = np.empty((len(q), k))
        idx = np.empty((len(q), k), np.int64)
        _knn_query(self.points, self.perm, self.lo, self.hi, self.dim, self.split, self.left, self.right,
                   q, k, dist, idx)
        return dist, idx


@nb.njit(cache=True)
def _better(d, i, bd, bi):
    return d < bd or (d == bd and i < bi)


@nb.njit(cache=True)
def _knn_query(points, perm, lo, hi, dim, split, left, right, queries, k, out_d, out_i):
    stack_node = np.empty(128, np.int64)
    stack_bound = np.empty(128)
    for qi in range(queries.shape[0]):
        qx = queries[qi, 0]
        qy = queries[qi, 1]
        qz = queries[qi, 2]
        bd = np.full(k, np.inf)
        bi = np.full(k, np.iinfo(np.int64).max)
        count = 0
        sp = 0
        stack_node[0] = 0
        stack_bound[0] = 0.0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack_node[sp]
            bound = stack_bound[sp]
            if count == k and bound > bd[k - 1]:
                continue
            if dim[node] < 0:
                for j in range(lo[node], hi[node]):
                    p = perm[j]
                    dx = points[p, 0] - qx
                    dy = points[p, 1] - qy
                    dz = points[p, 2] - qz
                    d = dx * dx + dy * dy + dz * dz
                    if count < k or _better(d, p, bd[k - 1], bi[k - 1]):
                        pos = min(count, k - 1)
                        while pos > 0 and _better(d, p, bd[pos - 1], bi[pos - 1]):
                            bd[pos] = bd[pos - 1]
                            bi[pos] = bi[pos - 1]
                            pos -= 1
                        bd[pos] = d
                        bi[pos] = p
                        if count < k:
                            count += 1
                continue
            diff = queries[qi, dim[node]] - split[node]
            if diff < 0.0:
                near, far = left[node], right[node]
            else:
                near, far = right[node], left[node]
            stack_node[sp] = far
            stack_bound[sp] = diff * diff
            sp += 1
            stack_node[sp] = near
            stack_bound[sp] = 0.0
            sp += 1
        for j in range(k):
            out_d[qi, j] = bd[j]
            out_i[qi, j] = bi[j]


def brute_force_knn(points: np.ndarray, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    points = np.asarray(points, dtype=np.float64)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    d = ((queries[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    idx = np.broadcast_to(np.arange(len(points)), d.shape)
    order = np.lexsort((idx, d), axis=-1)[:, :k]
    return np.take_along_axis(d, order, 1), order


# --- density-control operations ---------------------------------------------

@dataclass
class DensifyEvent:
    iteration: int
    op: str
    n_before: int
    n_after: int
    detail: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"iter": self.iteration, "op": self.op, "N_before": self.n_before,
                           "N_after": self.n_after, **self.detail}, sort_keys=True)


def radii(cloud: GaussianCloud) -> np.ndarray:
    """Scalar radius per Gaussian: mean of the activated scale axes."""
    return np.exp(cloud.log_scales.astype(np.float64)).mean(axis=1)


def split_by_gradient(cloud: GaussianCloud, acc: GradAccumulator, cfg: DensifyConfig,
                      rng: np.random.Generator) -> tuple[GaussianCloud, np.ndarray, dict]:
    """Replace each Gaussian whose mean view-space gradient exceeds t_pos with two children.

    Returns (cloud, parent map, detail); the parent map holds the old index of
    each surviving Gaussian and -1 for children.
    """
    avg = acc.average()
    selected = np.flatnonzero((acc.counts > 0) & (avg > cfg.t_pos))
    detail = {"selected": selected.tolist()}
    if len(selected) == 0:
        return cloud, np.arange(len(cloud)), detail
    keep = np.setdiff1d(np.arange(len(cloud)), selected)
    parents = cloud.select(selected)
    scales = np.exp(parents.log_scales.astype(np.float64))
    rot = quat_to_rotmat(normalize_quat(parents.rotations.astype(np.float64)))
    children = []
    for _ in range(2):
        offs = np.einsum("nij,nj->ni", rot, scales * rng.standard_normal(scales.shape))
        child = parents.copy()
        child.positions = (parents.positions + offs).astype(cloud.dtype)
        child.log_scales = (parents.log_scales - np.log(cfg.split_scale_divisor)).astype(cloud.dtype)
        if child.snapshot_positions is not None:
            child.snapshot_positions = child.positions.copy()
        children.append(child)
    out = children[0].concat(children[1])
    if len(keep):
        out = cloud.select(keep).concat(out)
    parent = np.concatenate([keep, np.full(2 * len(selected), -1)])
    return out, parent, detail


def compactness_pairs(cloud: GaussianCloud, k: int) -> np.ndarray:
    """Unordered neighbor pairs (i < j) from each Gaussian's k nearest neighbors."""
    pos = cloud.positions.astype(np.float64)
    kk = min(k + 1, len(cloud))
    _, idx = KdTree(pos).query(pos, kk)
    pairs = set()
    for i in range(len(pos)):
        for j in idx[i]:
            j = int(j)
            if j != i:
                pairs.add((min(i, j), max(i, j)))
    return np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)


def densify_compactness(cloud: GaussianCloud, cfg: DensifyConfig) -> tuple[GaussianCloud, np.ndarray, dict]:
    """Insert an isotropic Gaussian between close neighbor pairs.

    For a pair with center distance d and radii r_i, r_j: under the 'overlap'
    condition (d < r_i + r_j) the new radius is |r_i + r_j - d|; under 'gap'
    (d > r_i + r_j) it is d - r_i - r_j. Both are floored at 1e-4.
    """
    n = len(cloud)
    pairs = compactness_pairs(cloud, cfg.knn_k)
    detail = {"pairs": [], "inserted_pos": [], "inserted_radius": [], "parent_pos": [], "parent_radius": []}
    if n < 2 or len(pairs) == 0:
        return cloud, np.arange(n), detail
    pos = cloud.positions.astype(np.float64)
    r = radii(cloud)
    i, j = pairs[:, 0], pairs[:, 1]
    d = np.linalg.norm(pos[i] - pos[j], axis=1)
    s = r[i] + r[j]
    if cfg.compactness_condition == "overlap":
        hit = d < s
        new_r = np.abs(s - d)
    else:
        hit = d > s
        new_r = d - s
    i, j, new_r = i[hit], j[hit], np.maximum(new_r[hit], 1e-4)
    if len(i) == 0:
        return cloud, np.arange(n), detail
    mid = 0.5 * (pos[i] + pos[j])
    m = len(i)
    rot = np.zeros((m, 4))
    rot[:, 0] = 1.0
    new = GaussianCloud(
        positions=mid,
        log_scales=np.repeat(np.log(new_r)[:, None], 3, axis=1),
        rotations=rot,
        color_params=0.5 * (cloud.color_params[i].astype(np.float64) + cloud.color_params[j]),
        opacity_logits=0.5 * (cloud.opacity_logits[i].astype(np.float64) + cloud.opacity_logits[j]),
        snapshot_positions=None if cloud.snapshot_positions is None else mid,
    ).astype(cloud.dtype)
    detail = {
        "pairs": np.stack([i, j], 1).tolist(),
        "parent_pos": np.stack([pos[i], pos[j]], 1).tolist(),
        "parent_radius": np.stack([r[i], r[j]], 1).tolist(),
        "inserted_pos": new.positions.astype(np.float64).tolist(),
        "inserted_radius": new_r.tolist(),
    }
    return cloud.concat(new), np.concatenate([np.arange(n), np.full(m, -1)]), detail


def prune(cloud: GaussianCloud, cfg: DensifyConfig, max_screen_radius: Optional[np.ndarray] = None,
          image_width: Optional[int] = None) -> tuple[GaussianCloud, np.ndarray, dict]:
    """Drop faint or oversized Gaussians; the most opaque one always survives."""
    opac = np.clip(sigmoid(cloud.opacity_logits[:, 0].astype(np.float64)), OPACITY_MIN, OPACITY_MAX)
    world = np.exp(cloud.log_scales.astype(np.float64)).max(axis=1)
    remove = (opac < cfg.alpha_min) | (world > cfg.max_world_radius)
    if max_screen_radius is not None and image_width is not None:
        remove |= max_screen_radius > cfg.max_view_radius_frac * image_width
    if remove.all():
        remove[int(np.argmax(opac))] = False
    keep = np.flatnonzero(~remove)
    detail = {"removed": int(remove.sum())}
    if not remove.any():
        return cloud, np.arange(len(cloud)), detail
    return cloud.select(keep), keep, detail
