"""Analytic reverse pass through compositing, projection and activations."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import _kernels as K
from .camera import Camera
from .gaussians import OPACITY_MAX, OPACITY_MIN, GaussianCloud
from .rasterizer import (
    EXACT, BackgroundModel, RenderOutput, RenderSettings, Tape, background_backward, render, run_tiles,
    worker_count,
)


class TapeMismatchError(ValueError):
    pass


@dataclass
class ParamGrads:
    d_positions: np.ndarray
    d_log_scales: np.ndarray
    d_rotations: np.ndarray
    d_color_params: np.ndarray
    d_opacity_logits: np.ndarray
    d_background: np.ndarray
    view_space_pos_grad_norm: np.ndarray  # N x 1, NDC units
    visible: np.ndarray  # N bool
    screen_radius: np.ndarray  # N, projected support radius in pixels (0 when culled)

    GROUPS = ("positions", "log_scales", "rotations", "color_params", "opacity_logits")

    def group(self, name: str) -> np.ndarray:
        return getattr(self, "d_" + name)

    @classmethod
    def zeros(cls, n: int, n_bg: int, dtype=np.float64) -> "ParamGrads":
        return cls(np.zeros((n, 3), dtype), np.zeros((n, 3), dtype), np.zeros((n, 4), dtype),
                   np.zeros((n, 3), dtype), np.zeros((n, 1), dtype), np.zeros(n_bg, dtype),
                   np.zeros((n, 1), dtype), np.zeros(n, bool), np.zeros(n))

    def add_(self, other: "ParamGrads", scale: float = 1.0) -> "ParamGrads":
        for name in self.GROUPS + ("background",):
            getattr(self, "d_" + name)[...] += scale * getattr(other, "d_" + name)
        self.view_space_pos_grad_norm[...] += scale * other.view_space_pos_grad_norm
        self.visible |= other.visible
        np.maximum(self.screen_radius, other.screen_radius, out=self.screen_radius)
        return self

    def scale_(self, s: float) -> "ParamGrads":
        for name in self.GROUPS + ("background",):
            getattr(self, "d_" + name)[...] *= s
        return self

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, "d_" + n))) for n in self.GROUPS + ("background",))


def backward(tape: Tape, d_color: np.ndarray, d_alpha: Optional[np.ndarray] = None,
             d_depth: Optional[np.ndarray] = None, d_depth_normalized: Optional[np.ndarray] = None,
             d_zvar: Optional[np.ndarray] = None, cloud: Optional[GaussianCloud] = None,
             workers: Optional[int] = None) -> ParamGrads:
    """Gradients of a loss w.r.t. all raw parameters given dL/d(rendered buffers)."""
    cam = tape.camera
    h, w = cam.height, cam.width
    if cloud is not None and len(cloud) != tape.n_gaussians:
        raise TapeMismatchError("tape was recorded for a different number of Gaussians")
    if d_color.shape != (h, w, 3):
        raise TapeMismatchError(f"d_color has shape {d_color.shape}, expected {(h, w, 3)}")
    g_rgb = np.ascontiguousarray(d_color, dtype=np.float64)
    g_a = np.zeros((h, w)) if d_alpha is None else np.array(d_alpha, dtype=np.float64)
    g_d = np.zeros((h, w)) if d_depth is None else np.array(d_depth, dtype=np.float64)
    g_m2 = np.zeros((h, w))
    if d_depth_normalized is not None or d_zvar is not None:
        a = tape.final_a
        safe = a > 1e-8
        ia = np.where(safe, 1.0 / np.where(safe, a, 1.0), 0.0)
        mean = tape.final_d * ia
        if d_depth_normalized is not None:
            gn = np.where(safe, d_depth_normalized, 0.0)
            g_d += gn * ia
            g_a -= gn * mean * ia
        if d_zvar is not None:
            gv = np.where(safe, d_zvar, 0.0)
            g_m2 += gv * ia
            g_d -= gv * 2.0 * mean * ia
            g_a += gv * (-tape.final_m2 * ia * ia + 2.0 * mean * mean * ia)

    bins, proj, st = tape.bins, tape.proj, tape.settings
    entry_grads = np.zeros((len(bins.entry_gauss), K.ENTRY_WIDTH))
    run_tiles(
        K.backward_tiles, bins.n_tiles, worker_count() if workers is None else workers,
        bins.tile_size, w, h, bins.ranges, bins.entry_gauss,
        proj.mean2d, proj.conic, proj.depth, proj.colors, proj.opacities,
        st.alpha_max, st.alpha_skip, st.cutoff_sq,
        tape.stop, tape.final_rgb, tape.final_a, tape.final_d, tape.final_m2,
        g_rgb, g_a, g_d, g_m2, entry_grads,
    )
    n = tape.n_gaussians
    per_gauss = np.zeros((n, K.ENTRY_WIDTH))
    K.reduce_entries(bins.entry_gauss, entry_grads, per_gauss)

    act = tape.act
    g2d = np.ascontiguousarray(per_gauss[:, [K.E_MX, K.E_MY, K.E_CA, K.E_CB, K.E_CC, K.E_Z]])
    d_pos = np.zeros((n, 3))
    d_ls = np.zeros((n, 3))
    d_q = np.zeros((n, 4))
    K.project_backward_kernel(
        np.ascontiguousarray(act.positions), np.ascontiguousarray(act.scales), np.ascontiguousarray(act.rotations),
        tape.raw_rotations, cam.cv_rotation, cam.cv_translation, cam.focal, st.dilation,
        proj.radius, g2d, d_pos, d_ls, d_q,
    )

    opac = act.opacities[:, 0].astype(np.float64)
    # sigmoid'(l) = o(1 - o) inside the clamp interval, zero where the clamp is active
    inside = (opac > OPACITY_MIN) & (opac < OPACITY_MAX)
    d_op = np.where(inside, per_gauss[:, K.E_OP] * opac * (1.0 - opac), 0.0)[:, None]
    col = act.colors.astype(np.float64)
    d_col = per_gauss[:, [K.E_R, K.E_G, K.E_B]] * col * (1.0 - col)

    d_bg = background_backward(tape.background, tape.bg_cache, g_rgb * tape.transmittance[..., None])
    ndc = per_gauss[:, [K.E_MX, K.E_MY]] * np.array([0.5 * w, 0.5 * h])
    visible = proj.visible & np.isin(np.arange(n), bins.entry_gauss)
    return ParamGrads(
        d_positions=d_pos, d_log_scales=d_ls, d_rotations=d_q, d_color_params=d_col,
        d_opacity_logits=d_op, d_background=d_bg,
        view_space_pos_grad_norm=np.linalg.norm(ndc, axis=1, keepdims=True),
        visible=visible, screen_radius=np.where(visible, proj.radius, 0.0),
    )


# loss functional: RenderOutput -> (value, dict of output gradients accepted by backward)
LossFn = Callable[[RenderOutput], tuple]


def l2_image_loss(target: np.ndarray, depth_weight: float = 0.0, depth_target=None,
                  zvar_weight: float = 0.0, alpha_weight: float = 0.0) -> LossFn:
    """0.5*||C - target||^2 plus optional quadratic terms on depth, z-variance and alpha."""

    def loss(out: RenderOutput):
        diff = out.color.astype(np.float64) - target
        value = 0.5 * float(np.sum(diff**2))
        grads = {"d_color": diff}
        if depth_weight:
            dd = out.depth_normalized.astype(np.float64) - (0.0 if depth_target is None else depth_target)
            value += 0.5 * depth_weight * float(np.sum(dd**2))
            grads["d_depth_normalized"] = depth_weight * dd
        if zvar_weight:
            value += zvar_weight * float(np.sum(out.zvar))
            grads["d_zvar"] = np.full(out.zvar.shape, zvar_weight)
        if alpha_weight:
            value += 0.5 * alpha_weight * float(np.sum(out.alpha.astype(np.float64) ** 2))
            grads["d_alpha"] = alpha_weight * out.alpha.astype(np.float64)
        return value, grads

    return loss


@dataclass
class GroupError:
    name: str
    max_rel: float
    mean_rel: float
    max_abs: float
    scale: float
    count: int


@dataclass
class GradCheckReport:
    groups: list
    tolerance: float

    @property
    def ok(self) -> bool:
        return all(g.max_rel < self.tolerance for g in self.groups)

    def format(self) -> str:
        lines = [f"{'group':<16}{'max_rel':>12}{'mean_rel':>12}{'max_abs':>12}{'|fd|max':>12}{'n':>6}  status"]
        for g in self.groups:
            status = "ok" if g.max_rel < self.tolerance else "FAIL"
            lines.append(f"{g.name:<16}{g.max_rel:>12.3e}{g.mean_rel:>12.3e}{g.max_abs:>12.3e}"
                         f"{g.scale:>12.3e}{g.count:>6}  {status}")
        return "\n".join(lines)


def _group_error(name, analytic, numeric) -> GroupError:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    f = np.asarray(numeric, dtype=np.float64).ravel()
    scale = float(np.abs(f).max()) if f.size else 0.0
    err = np.abs(a - f)
    denom = max(scale, 1e-12)
    mean_denom = max(float(np.abs(f).mean()) if f.size else 0.0, 1e-12)
    max_abs = float(err.max()) if err.size else 0.0
    # all-zero reference: report absolute error so an exact zero passes
    max_rel = max_abs / denom if scale > 0 else max_abs
    mean_rel = (float(err.mean()) / mean_denom) if scale > 0 else max_abs
    return GroupError(name, max_rel, mean_rel, max_abs, scale, int(f.size))


def finite_difference_check(cloud: GaussianCloud, cam: Camera, background: BackgroundModel, loss: LossFn,
                            step: float = 1e-5, precision: str = "double",
                            settings: RenderSettings = EXACT, tolerance: float = 1e-3,
                            groups=None) -> tuple[GradCheckReport, ParamGrads]:
    """Compare analytic gradients with central differences on every raw parameter.

    Relative error of a group is max|analytic - fd| / max|fd|. Use the double
    path for tolerances near 1e-3; single-precision differences are too noisy.
    """
    dtype = np.float64 if precision == "double" else np.float32
    cloud = cloud.astype(dtype)
    bg = background.astype(dtype)

    def value(c, b):
        return loss(render(c, cam, b, settings, workers=1))[0]

    out = render(cloud, cam, bg, settings, workers=1)
    _, g = loss(out)
    grads = backward(out.tape, cloud=cloud, workers=1, **g)
    groups = groups or list(ParamGrads.GROUPS) + (["background"] if bg.params.size else [])
    errors = []
    for name in groups:
        if name == "background":
            base = bg.params
        else:
            base = getattr(cloud, name)
        numeric = np.zeros(base.shape)
        flat = base.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            plus = value(cloud, bg)
            flat[k] = orig - step
            minus = value(cloud, bg)
            flat[k] = orig
            numeric.reshape(-1)[k] = (plus - minus) / (2 * step)
        errors.append(_group_error(name, grads.group(name) if name != "background" else grads.d_background, numeric))
    return GradCheckReport(errors, tolerance), grads
