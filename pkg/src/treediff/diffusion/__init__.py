from .sampler import (
    ddim_mean_sigma,
    ddim_sample,
    ddim_subsequence,
    ddpm_mean_sigma,
    ddpm_sample,
    ddpm_step,
)
from .schedule import NoiseSchedule, forward_posterior, make_linear_schedule, q_sample
from .training import EmaTracker, check_tree_compatibility, ddpm_loss, train_diffusion
from .unet import ConditionalUNet, build_denoiser

__all__ = [
    "ConditionalUNet",
    "EmaTracker",
    "NoiseSchedule",
    "build_denoiser",
    "check_tree_compatibility",
    "ddim_mean_sigma",
    "ddim_sample",
    "ddim_subsequence",
    "ddpm_loss",
    "ddpm_mean_sigma",
    "ddpm_sample",
    "ddpm_step",
    "forward_posterior",
    "make_linear_schedule",
    "q_sample",
    "train_diffusion",
]
