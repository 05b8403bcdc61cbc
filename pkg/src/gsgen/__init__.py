"""Differentiable Gaussian splatting with two-stage score-distillation optimization."""
from .camera import Camera, PoseSamplerConfig, look_at_camera, sample_poses
from .gaussians import GaussianCloud, InitConfig, activate, farthest_point_sample, init_from_points
from .grad import ParamGrads, backward, finite_difference_check
from .guidance import DiracImageOracle, DiracPointOracle, NullProvider, ddpm_schedule, sds_image_grad, sds_point_grad
from .rasterizer import BackgroundModel, RenderSettings, brute_force_render, render

__version__ = "0.1.0"

__all__ = [
    "BackgroundModel", "Camera", "DiracImageOracle", "DiracPointOracle", "GaussianCloud", "InitConfig",
    "NullProvider", "ParamGrads", "PoseSamplerConfig", "RenderSettings", "activate", "backward",
    "brute_force_render", "ddpm_schedule", "farthest_point_sample", "finite_difference_check",
    "init_from_points", "look_at_camera", "render", "sample_poses", "sds_image_grad", "sds_point_grad",
]
