"""Cross-modality super-resolution of clinical CT to micro-CT resolution.

Two separately trained stages: a CycleGAN with SSIM terms that turns
downsampled micro-CT into clinical-CT-like images, and an 8x SR GAN trained on
the resulting synthetic pairs.
"""

from .imaging import PyramidSpec, SsimParams, gaussian_downsample, ssim, ssim_loss
from .volumeio import Volume, PatchSpec, PatchSet, load_volume, save_volume

__version__ = "0.1.0"

__all__ = [
    "PyramidSpec",
    "SsimParams",
    "gaussian_downsample",
    "ssim",
    "ssim_loss",
    "Volume",
    "PatchSpec",
    "PatchSet",
    "load_volume",
    "save_volume",
]
