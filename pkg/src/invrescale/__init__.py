"""Invertible latent image rescaling with a learnable orthogonal transform,
an adaptive detail prior and a one-step conditioned refiner."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_config
from .imaging import bicubic_resize, png_read, png_write, psnr, ssim
from .invnet import RescalerModel, downscale, upscale
from .refiner import NoiseSchedule, one_step_denoise, refine
from .training import RescalingSystem, system_train_step
from .transforms import OrthogonalKernel, haar_forward, lrt_forward, lrt_inverse

__all__ = [
    "NoiseSchedule", "OrthogonalKernel", "RescalerModel", "RescalingSystem", "RunConfig",
    "bicubic_resize", "downscale", "haar_forward", "load_checkpoint", "load_config",
    "lrt_forward", "lrt_inverse", "one_step_denoise", "parse_config", "png_read", "png_write",
    "psnr", "refine", "save_checkpoint", "ssim", "system_train_step", "upscale",
]
__version__ = "0.1.0"
