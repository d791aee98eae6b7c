"""2D Gaussian splat image representation: renderer, stage-wise residual
encoder with quality-gated allocation, trainable increment predictors, and an
adaptive-range quantizer with a bit-exact container."""

from .core import (
    Covariance2D,
    Gaussian2D,
    GaussianSet,
    InvalidParameterError,
    build_covariance,
    canonicalize_theta,
    merge_sets,
)
from .metrics import LossBreakdown, QualityMaps, loss_render, ms_ssim, psnr, quality_maps, ssim
from .render import GaussianGrads, RenderConfig, render, render_additive_check, render_backward

__version__ = "0.1.0"

__all__ = [
    "Covariance2D",
    "Gaussian2D",
    "GaussianSet",
    "GaussianGrads",
    "InvalidParameterError",
    "LossBreakdown",
    "QualityMaps",
    "RenderConfig",
    "build_covariance",
    "canonicalize_theta",
    "loss_render",
    "merge_sets",
    "ms_ssim",
    "psnr",
    "quality_maps",
    "render",
    "render_additive_check",
    "render_backward",
    "ssim",
]
