"""Differentiable attack layer: JPEG simulators, classic distortions, composition."""

from .classic import gaussian_blur, gaussian_noise, random_crop, random_scale
from .config import AttackConfig, uniform_mix_weights
from .jpeg import (
    dct_8x8,
    idct_8x8,
    jpeg_mask,
    jpeg_mixup,
    jpeg_round,
    jpeg_soft,
    real_jpeg,
    straight_through_surrogate,
)
from .pipeline import GRADCHECK_OPS, MODES, attack_pipeline, gradient_check, smooth_test_image

__all__ = [
    "AttackConfig",
    "GRADCHECK_OPS",
    "MODES",
    "attack_pipeline",
    "dct_8x8",
    "gaussian_blur",
    "gaussian_noise",
    "gradient_check",
    "idct_8x8",
    "jpeg_mask",
    "jpeg_mixup",
    "jpeg_round",
    "jpeg_soft",
    "random_crop",
    "random_scale",
    "real_jpeg",
    "smooth_test_image",
    "straight_through_surrogate",
    "uniform_mix_weights",
]
