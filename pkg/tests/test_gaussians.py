import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gsgen.gaussians import (
    OPACITY_MAX, OPACITY_MIN, GaussianCloud, InitConfig, InvalidCloudError, activate, blob_scene,
    covariance_from, farthest_point_sample, fit_normalization, init_from_points, inverse_sigmoid,
    sample_mesh_surface, sigmoid,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def one(log_scale=(0.0, 0.0, 0.0), rot=(1.0, 0.0, 0.0, 0.0), opacity_logit=0.0, dtype=np.float64):
    return GaussianCloud(
        positions=np.zeros((1, 3)), log_scales=np.array([log_scale], float), rotations=np.array([rot], float),
        color_params=np.zeros((1, 3)), opacity_logits=np.array([[opacity_logit]]),
    ).astype(dtype)


def test_large_logit_clamps_to_upper_bound():
    assert activate(one(opacity_logit=20.0)).opacities[0, 0] == OPACITY_MAX


def test_identity_parameters_give_identity_covariance():
    np.testing.assert_allclose(activate(one()).covariances[0], np.eye(3), atol=1e-12)


def test_unnormalized_quaternion():
    act = activate(one(log_scale=(0.1, -0.2, 0.3), rot=(2.0, 0.0, 0.0, 0.0)))
    np.testing.assert_allclose(act.rotations[0], [1, 0, 0, 0])
    np.testing.assert_allclose(np.diag(act.covariances[0]), np.exp(2 * np.array([0.1, -0.2, 0.3])))


def test_covariance_examples():
    np.testing.assert_allclose(covariance_from([1, 1, 1], [1, 0, 0, 0]), np.eye(3), atol=1e-12)
    # 90 degrees about z swaps the x and y axes
    q = [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]
    np.testing.assert_allclose(covariance_from([2, 1, 1], q), np.diag([1.0, 4.0, 1.0]), atol=1e-12)


def test_zero_quaternion_rejected():
    with pytest.raises(ValueError):
        covariance_from([1, 1, 1], [0, 0, 0, 0])


def test_nonfinite_parameter_reports_index():
    cloud = one().concat(one())
    cloud.log_scales[1, 2] = np.nan
    with pytest.raises(InvalidCloudError, match="index 1"):
        activate(cloud)


def test_empty_cloud_rejected():
    with pytest.raises(InvalidCloudError):
        GaussianCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros((0, 1)))


quats = arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 1e-3)
scales = arrays(np.float64, 3, elements=st.floats(0.01, 10))


@given(scales, quats)
def test_covariance_symmetric_spd_and_double_cover(s, q):
    cov = covariance_from(s, q)
    assert np.abs(cov - cov.T).max() < 1e-6 * max(1.0, np.abs(cov).max())
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(cov)), np.sort(s**2), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(covariance_from(s, -q), cov, rtol=1e-12, atol=1e-15)


@given(arrays(np.float64, (5, 1), elements=finite), arrays(np.float64, (5, 1), elements=finite))
def test_opacity_stays_clamped_after_any_update(logits, step):
    cloud = one().select([0] * 5)
    cloud.opacity_logits = logits + step
    o = activate(cloud).opacities
    assert np.all((o >= OPACITY_MIN) & (o <= OPACITY_MAX))


@given(arrays(np.float64, (4, 3), elements=st.floats(-5, 5)), arrays(np.float64, (4, 4), elements=st.floats(-2, 2)))
def test_activation_invariants(log_scales, rots):
    rots[np.linalg.norm(rots, axis=1) < 1e-3] = [1, 0, 0, 0]
    cloud = one().select([0] * 4)
    cloud.log_scales, cloud.rotations = log_scales, rots
    act = activate(cloud)
    assert np.all(act.scales > 0) and np.all(np.isfinite(act.scales))
    np.testing.assert_allclose(np.linalg.norm(act.rotations, axis=1), 1.0, atol=1e-6)
    assert np.all((act.colors > 0) & (act.colors < 1))


def test_init_single_point():
    cloud = init_from_points(np.zeros((1, 3)), "random", InitConfig(fixed_scale=0.02), seed=0)
    assert len(cloud) == 1
    np.testing.assert_allclose(np.exp(cloud.log_scales[0]), [0.02] * 3, rtol=1e-6)
    np.testing.assert_array_equal(cloud.rotations[0], [1, 0, 0, 0])


def test_init_deterministic_colors():
    pts = np.random.default_rng(0).normal(size=(50, 3))
    a = init_from_points(pts, "random", seed=7)
    b = init_from_points(pts, "random", seed=7)
    assert a.color_params.tobytes() == b.color_params.tobytes()


def test_init_given_colors_round_trip():
    rng = np.random.default_rng(3)
    pts, cols = rng.normal(size=(20, 3)), rng.uniform(0.01, 0.99, size=(20, 3))
    cloud = init_from_points(pts, "given", colors=cols, dtype=np.float64)
    np.testing.assert_allclose(activate(cloud).colors, cols, atol=1e-6)


def test_init_rejects_empty():
    with pytest.raises(ValueError):
        init_from_points(np.zeros((0, 3)))


def greedy_fps(points, k, start):
    """O(M^2 k) reference: recompute every min-distance from scratch at each step."""
    chosen = [start]
    for _ in range(1, k):
        best, best_d = None, -1.0
        for i in range(len(points)):
            if i in chosen:
                continue
            d = min(float(np.sum((points[i] - points[j]) ** 2)) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def test_fps_examples():
    line = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], float)
    assert list(farthest_point_sample(line, 2, 0)) == [0, 3]
    square = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)
    # after the diagonal corner both remaining corners tie; the lower index wins
    assert list(farthest_point_sample(square, 3, 0)) == [0, 2, 1]
    assert sorted(farthest_point_sample(line, 4, 1)) == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        farthest_point_sample(line, 5)


@settings(max_examples=30)
@given(st.integers(1, 60), st.integers(0, 2**31), st.data())
def test_fps_matches_greedy_oracle(m, seed, data):
    rng = np.random.default_rng(seed)
    pts = rng.integers(0, 4, size=(m, 3)).astype(float) if seed % 2 else rng.normal(size=(m, 3))
    k = data.draw(st.integers(1, m))
    start = data.draw(st.integers(0, m - 1))
    assert list(farthest_point_sample(pts, k, start)) == greedy_fps(pts, k, start)


def test_mesh_single_triangle_barycentric():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float)
    pts = sample_mesh_surface(v, np.array([[0, 1, 2]]), 2000, seed=0)
    # barycentric coordinates for this triangle are (1-x-y, x, y)
    assert np.all(pts[:, 0] >= 0) and np.all(pts[:, 1] >= 0) and np.all(pts.sum(1) <= 1 + 1e-12)
    np.testing.assert_allclose(pts[:, 2], 0.0)


def test_mesh_area_proportional():
    v = np.array([[0, 0, 0], [3, 0, 0], [0, 3, 0], [10, 0, 0], [11, 0, 0], [10, 1, 0]], float)
    faces = np.array([[0, 1, 2], [3, 4, 5]])
    n = 10000
    pts = sample_mesh_surface(v, faces, n, seed=5)
    big = int(np.sum(pts[:, 0] < 5))
    p = 0.9
    assert abs(big - n * p) < 3 * np.sqrt(n * p * (1 - p))
    np.testing.assert_array_equal(pts, sample_mesh_surface(v, faces, n, seed=5))


def test_mesh_zero_area_rejected():
    v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], float)
    with pytest.raises(ValueError):
        sample_mesh_surface(v, np.array([[0, 1, 2]]), 10)


def test_normalization_fits_unit_cube():
    pts = np.random.default_rng(0).uniform(-7, 3, size=(100, 3))
    norm = fit_normalization(pts)
    q = norm.apply(pts)
    assert np.abs(q).max() == pytest.approx(1.0)
    np.testing.assert_allclose(norm.invert(q), pts)


def test_sigmoid_inverse_round_trip():
    y = np.linspace(0.01, 0.99, 50)
    np.testing.assert_allclose(sigmoid(inverse_sigmoid(y)), y)


def test_astype_copies():
    cloud = blob_scene(n_per_blob=4)
    other = cloud.astype(cloud.dtype)
    other.positions += 1
    assert not np.shares_memory(cloud.positions, other.positions)
