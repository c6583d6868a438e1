"""rstego: hide secret images in a cover image and recover them after attacks.

A residual-based embedding network hides one to three secrets inside a
cover image; a simulated attack layer (JPEG approximations, noise, blur,
rescale, cropout) hardens training; recovery is progressive - the embedded
residual is extracted and amplified first, then decoded into the secrets.
"""

from .core import MetricReport, load_image, psnr, save_image, ssim
from .networks import NetworkSpec, PipelineBundle, build_bundle, load_checkpoint, save_checkpoint
from .training import LossWeights, TrainConfig, train, train_step

__version__ = "0.1.0"

__all__ = [
    "LossWeights",
    "MetricReport",
    "NetworkSpec",
    "PipelineBundle",
    "TrainConfig",
    "build_bundle",
    "load_checkpoint",
    "load_image",
    "psnr",
    "save_checkpoint",
    "save_image",
    "ssim",
    "train",
    "train_step",
]
