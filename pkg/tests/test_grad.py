import numpy as np
import pytest

from gsgen.camera import look_at_camera
from gsgen.gaussians import GaussianCloud, inverse_sigmoid
from gsgen.grad import TapeMismatchError, backward, finite_difference_check, l2_image_loss
from gsgen.rasterizer import EXACT, BackgroundModel, background_eval, render
from gsgen.scenes import random_scene


def single(pos=(0, 0, 0), scale=0.3, opacity_logit=1.0, color_logit=0.3):
    return GaussianCloud(
        positions=np.array([pos], float), log_scales=np.full((1, 3), np.log(scale)),
        rotations=np.array([[1.0, 0, 0, 0]]), color_params=np.full((1, 3), color_logit),
        opacity_logits=np.array([[opacity_logit]]),
    )


def cam33():
    return look_at_camera((0, 0, 3), (0, 0, 0), width=33, height=33)


def test_culled_scene_gives_zero_gaussian_grads_and_direct_background_chain():
    cam = cam33()
    bg = BackgroundModel("mlp", seed=1, dtype=np.float64)
    out = render(single(pos=(0, 0, 9)), cam, bg, EXACT)
    g = np.random.default_rng(0).normal(size=out.color.shape)
    grads = backward(out.tape, g)
    for name in ("positions", "log_scales", "rotations", "color_params", "opacity_logits"):
        assert not grads.group(name).any()
    _, cache = background_eval(bg, cam.ray_directions(), with_cache=True)
    from gsgen.rasterizer import background_backward
    np.testing.assert_allclose(grads.d_background, background_backward(bg, cache, g), rtol=1e-12)
    assert not grads.visible.any()


def test_color_gradient_single_term_chain_rule():
    cloud = single(opacity_logit=1.0, color_logit=0.3)
    out = render(cloud, cam33(), BackgroundModel.constant((0, 0, 0), dtype=np.float64), EXACT)
    d = np.zeros(out.color.shape)
    d[16, 16, 0] = 1.0
    grads = backward(out.tape, d)
    alpha = 1 / (1 + np.exp(-1.0))  # exponent is zero at the projected mean
    s = 1 / (1 + np.exp(-0.3))
    assert grads.d_color_params[0, 0] == pytest.approx(alpha * s * (1 - s), rel=1e-12)
    assert grads.d_color_params[0, 1] == 0.0


@pytest.mark.parametrize("seed", range(4))
def test_fd_random_scene(seed):
    cloud, cam, bg = random_scene(100 + seed, n_max=12, size=20, mlp_background=bool(seed % 2))
    target = np.random.default_rng(seed).uniform(size=(20, 20, 3))
    report, _ = finite_difference_check(cloud, cam, bg, l2_image_loss(target), step=1e-6)
    assert report.ok, report.format()


def test_fd_with_depth_alpha_and_zvar_terms():
    cloud, cam, bg = random_scene(7, n_max=10, size=16, mlp_background=False)
    rng = np.random.default_rng(7)
    loss = l2_image_loss(rng.uniform(size=(16, 16, 3)), depth_weight=0.3, depth_target=rng.uniform(2, 4, (16, 16)),
                         zvar_weight=0.05, alpha_weight=0.2)
    # zvar differences cancel catastrophically at tiny steps; 1e-4 keeps roundoff below truncation
    report, _ = finite_difference_check(cloud, cam, bg, loss, step=1e-4)
    assert report.ok, report.format()


def test_zero_loss_gives_zero_grads():
    cloud, cam, bg = random_scene(3, n_max=20, size=16, mlp_background=True)
    out = render(cloud, cam, bg, EXACT)
    grads = backward(out.tape, np.zeros(out.color.shape))
    for name in ("positions", "log_scales", "rotations", "color_params", "opacity_logits", "background"):
        assert not grads.group(name).any()


def test_outside_frustum_gets_zero_grads():
    cloud, cam, bg = random_scene(4, n_max=10, size=16)
    far = single(pos=cam.position + 5 * (cam.position - np.zeros(3)))  # behind the camera
    both = cloud.concat(far.astype(cloud.dtype))
    out = render(both, cam, bg, EXACT)
    grads = backward(out.tape, np.ones(out.color.shape))
    for name in ("positions", "log_scales", "rotations", "color_params", "opacity_logits"):
        assert not grads.group(name)[-1].any()


def test_clamped_opacity_gets_zero_gradient():
    out = render(single(opacity_logit=20.0), cam33(), BackgroundModel.constant((0.2, 0.2, 0.2), dtype=np.float64),
                 EXACT)
    grads = backward(out.tape, np.ones(out.color.shape))
    assert grads.d_opacity_logits[0, 0] == 0.0
    assert np.abs(grads.d_color_params).max() > 0


def test_backward_deterministic_across_workers():
    cloud, cam, bg = random_scene(21, n_max=150, size=64, mlp_background=True)
    cloud = cloud.astype(np.float32)
    out = render(cloud, cam, bg)
    g = np.random.default_rng(0).normal(size=out.color.shape)
    ref = backward(out.tape, g, workers=1)
    for w in (2, 4, 8):
        other = backward(out.tape, g, workers=w)
        for name in ("positions", "log_scales", "rotations", "color_params", "opacity_logits", "background"):
            assert other.group(name).tobytes() == ref.group(name).tobytes()


def test_view_space_norm_is_scaled_screen_gradient():
    # shifting the only Gaussian along camera x moves its mean by focal/depth pixels per unit
    cloud = single(scale=0.2)
    cam = cam33()
    out = render(cloud, cam, BackgroundModel.constant((0, 0, 0), dtype=np.float64), EXACT)
    d = np.zeros(out.color.shape)
    d[16, 20, 1] = 1.0
    grads = backward(out.tape, d)
    d_mean_x = grads.d_positions[0, 0] * 3.0 / cam.focal
    assert grads.view_space_pos_grad_norm[0, 0] == pytest.approx(abs(d_mean_x) * 0.5 * cam.width, rel=1e-6)
    assert grads.visible[0]


def test_tape_mismatch():
    cloud, cam, bg = random_scene(2, n_max=5, size=16)
    out = render(cloud, cam, bg)
    with pytest.raises(TapeMismatchError):
        backward(out.tape, np.zeros((8, 8, 3)))
    with pytest.raises(TapeMismatchError):
        backward(out.tape, np.zeros(out.color.shape), cloud=cloud.concat(cloud))


def test_report_formatting():
    cloud, cam, bg = random_scene(9, n_max=4, size=12)
    report, _ = finite_difference_check(cloud, cam, bg, l2_image_loss(np.zeros((12, 12, 3))))
    lines = report.format().splitlines()
    assert lines[0].split()[:3] == ["group", "max_rel", "mean_rel"]
    assert len({len(line) for line in lines[1:]}) == 1
