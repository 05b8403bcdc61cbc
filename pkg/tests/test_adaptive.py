import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsgen.adaptive import (
    DensifyConfig, GradAccumulator, KdTree, accumulate, brute_force_knn, compactness_pairs, densify_compactness,
    prune, radii, split_by_gradient,
)
from gsgen.gaussians import GaussianCloud, activate, inverse_sigmoid
from gsgen.grad import ParamGrads


def cloud_at(positions, scale=0.1, opacity=0.5, colors=None):
    positions = np.atleast_2d(np.asarray(positions, float))
    n = len(positions)
    opacity = np.broadcast_to(np.asarray(opacity, float), (n,))
    scale = np.broadcast_to(np.asarray(scale, float), (n,))
    colors = np.random.default_rng(n).normal(size=(n, 3)) if colors is None else colors
    return GaussianCloud(
        positions=positions, log_scales=np.log(np.repeat(scale[:, None], 3, 1)),
        rotations=np.tile([1.0, 0, 0, 0], (n, 1)), color_params=colors,
        opacity_logits=inverse_sigmoid(opacity)[:, None],
    )


def grads_with(norms, visible):
    g = ParamGrads.zeros(len(norms), 0)
    g.view_space_pos_grad_norm[:, 0] = norms
    g.visible[:] = visible
    g.screen_radius[:] = np.where(visible, 3.0, 0.0)
    return g


def test_accumulate_counts_only_visible():
    acc = GradAccumulator.zeros(3)
    accumulate(acc, grads_with([0.01, 0.5, 0.01], [True, False, True]))
    accumulate(acc, grads_with([0.01, 0.5, 0.03], [True, False, True]))
    assert list(acc.counts) == [2, 0, 2]
    assert acc.average()[0] == pytest.approx(0.01)
    assert acc.average()[1] == 0.0
    with pytest.raises(ValueError):
        accumulate(acc, grads_with([0.1], [True]))


def test_threshold_is_strict():
    t = 0.03125  # exact in float32, so the average equals the threshold bit for bit
    cloud = cloud_at([[0, 0, 0], [1, 0, 0]])
    acc = GradAccumulator.zeros(2)
    accumulate(acc, grads_with([t, np.nextafter(np.float32(t), 1)], [True, True]))
    out, parent, detail = split_by_gradient(cloud, acc, DensifyConfig(t_pos=t), np.random.default_rng(0))
    assert detail["selected"] == [1]
    assert len(out) == 3
    assert list(parent) == [0, -1, -1]


def test_no_split_below_threshold():
    cloud = cloud_at(np.eye(3))
    acc = GradAccumulator.zeros(3)
    accumulate(acc, grads_with([0.02, 0.0, 0.01], [True] * 3))
    out, parent, _ = split_by_gradient(cloud, acc, DensifyConfig(), np.random.default_rng(0))
    assert out is cloud and list(parent) == [0, 1, 2]


def test_split_children_copy_parent_and_shrink():
    cloud = cloud_at([[0, 0, 0], [2, 0, 0]], scale=0.2)
    acc = GradAccumulator.zeros(2)
    accumulate(acc, grads_with([1.0, 0.0], [True, True]))
    out, _, _ = split_by_gradient(cloud, acc, DensifyConfig(), np.random.default_rng(1))
    assert len(out) == 3
    np.testing.assert_array_equal(out.color_params[1], cloud.color_params[0])
    np.testing.assert_array_equal(out.color_params[2], cloud.color_params[0])
    np.testing.assert_allclose(np.exp(out.log_scales[1:]), 0.2 / 1.6)
    np.testing.assert_allclose(out.color_params[1:].mean(0), cloud.color_params[0])


def test_split_children_within_five_sigma():
    cloud = cloud_at([[0.3, -0.2, 0.1]], scale=0.05)
    cloud.log_scales[0] = np.log([0.05, 0.1, 0.02])
    cloud.rotations[0] = [0.9, 0.3, -0.2, 0.1]
    acc = GradAccumulator.zeros(1)
    accumulate(acc, grads_with([1.0], [True]))
    rng = np.random.default_rng(2)
    cov_inv = np.linalg.inv(activate(cloud).covariances[0])
    worst = 0.0
    for _ in range(5000):
        out, _, _ = split_by_gradient(cloud, acc, DensifyConfig(), rng)
        d = out.positions - cloud.positions[0]
        worst = max(worst, np.sqrt(np.einsum("ni,ij,nj->n", d, cov_inv, d)).max())
    assert worst < 5.0


def test_compactness_isolated_pair_untouched():
    r = 0.1
    cloud = cloud_at([[0, 0, 0], [4 * r, 0, 0]], scale=r)
    out, parent, detail = densify_compactness(cloud, DensifyConfig())
    assert len(out) == 2 and detail["pairs"] == []


def test_compactness_half_overlap_inserts_radius_r():
    r = 0.1
    cloud = cloud_at([[0, 0, 0], [r, 0, 0]], scale=r, opacity=[0.3, 0.7])
    out, parent, detail = densify_compactness(cloud, DensifyConfig())
    assert len(out) == 3 and list(parent) == [0, 1, -1]
    np.testing.assert_allclose(out.positions[2], [r / 2, 0, 0])
    np.testing.assert_allclose(np.exp(out.log_scales[2]), r)
    np.testing.assert_array_equal(out.rotations[2], [1, 0, 0, 0])
    np.testing.assert_allclose(out.opacity_logits[2], cloud.opacity_logits.mean())
    np.testing.assert_allclose(out.color_params[2], cloud.color_params.mean(0))


def test_compactness_coincident_pair():
    cloud = cloud_at([[0.2, 0.2, 0.2], [0.2, 0.2, 0.2]], scale=[0.05, 0.08])
    out, _, detail = densify_compactness(cloud, DensifyConfig())
    assert detail["inserted_radius"] == pytest.approx([0.13])


def test_compactness_gap_mode():
    cloud = cloud_at([[0, 0, 0], [0.5, 0, 0]], scale=0.1)
    out, _, detail = densify_compactness(cloud, DensifyConfig(compactness_condition="gap"))
    assert detail["inserted_radius"] == pytest.approx([0.3])
    out, _, _ = densify_compactness(cloud, DensifyConfig(compactness_condition="overlap"))
    assert len(out) == 2


@settings(max_examples=20)
@given(st.integers(2, 120), st.integers(1, 6), st.integers(0, 10_000))
def test_compactness_pairs_unique_and_bounded(n, k, seed):
    pts = np.random.default_rng(seed).uniform(-1, 1, (n, 3))
    cloud = cloud_at(pts, scale=0.3)
    pairs = compactness_pairs(cloud, k)
    assert len(pairs) <= n * k
    assert np.all(pairs[:, 0] < pairs[:, 1])
    assert len({tuple(p) for p in pairs}) == len(pairs)
    out, _, detail = densify_compactness(cloud, DensifyConfig(knn_k=k))
    assert len(out) - n == len(detail["pairs"]) <= len(pairs)
    r = radii(cloud)
    for (i, j), pos, rad in zip(detail["pairs"], detail["inserted_pos"], detail["inserted_radius"]):
        d = np.linalg.norm(pts[i] - pts[j])
        assert d < r[i] + r[j]
        np.testing.assert_allclose(pos, (pts[i] + pts[j]) / 2, atol=1e-12)
        assert rad == pytest.approx(max(abs(r[i] + r[j] - d), 1e-4))


def test_prune_opacity_boundary():
    cloud = cloud_at(np.eye(3), opacity=[0.049, 0.051, 0.9])
    out, keep, detail = prune(cloud, DensifyConfig())
    assert list(keep) == [1, 2] and detail["removed"] == 1


def test_prune_keeps_single_survivor():
    cloud = cloud_at(np.eye(3), opacity=[0.01, 0.03, 0.02])
    out, keep, _ = prune(cloud, DensifyConfig())
    assert list(keep) == [1] and len(out) == 1


def test_prune_large_world_and_screen_radius():
    cloud = cloud_at(np.eye(3), scale=[0.1, 20.0, 0.1], opacity=0.9)
    _, keep, _ = prune(cloud, DensifyConfig())
    assert list(keep) == [0, 2]
    _, keep, _ = prune(cloud, DensifyConfig(), max_screen_radius=np.array([5.0, 1.0, 30.0]), image_width=100)
    assert list(keep) == [0]


def test_accumulator_remap():
    acc = GradAccumulator(np.array([1, 2, 3], np.float32), np.array([1, 2, 3]), np.array([4, 5, 6], np.float32))
    out = acc.remap(np.array([2, -1, 0]))
    assert list(out.grad_sum) == [3, 0, 1] and list(out.counts) == [3, 0, 1]


def test_kdtree_small_cases():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [0.5, 0.5, 0]], float)
    d, i = KdTree(pts, leaf_size=1).query([[0.5, 0.5, 0]], 3)
    assert list(i[0]) == [4, 0, 1]  # four corners tie at distance 0.5, lowest indices first
    np.testing.assert_allclose(d[0], [0, 0.5, 0.5])
    with pytest.raises(ValueError):
        KdTree(np.zeros((0, 3)))


@settings(max_examples=25)
@given(st.integers(1, 2048), st.integers(1, 8), st.integers(1, 16), st.booleans(), st.integers(0, 10_000))
def test_kdtree_matches_brute_force(n, k, leaf, lattice, seed):
    rng = np.random.default_rng(seed)
    pts = rng.integers(0, 5, (n, 3)).astype(float) if lattice else rng.normal(size=(n, 3))
    q = np.concatenate([pts[: min(n, 50)], rng.normal(size=(20, 3)) * 2])
    d, i = KdTree(pts, leaf_size=leaf).query(q, k)
    bd, bi = brute_force_knn(pts, q, k)
    np.testing.assert_array_equal(i, bi)
    np.testing.assert_array_equal(d, bd)
