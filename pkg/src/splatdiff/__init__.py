"""Multiview latent diffusion whose denoiser goes through an explicit, differentiably rendered 3D Gaussian cloud."""

from .camera import CameraPose, RayMap, ViewRig, plucker_map, rig_default
from .codec import LatentGrid, decode, encode
from .denoiser import DenoiserConfig, DenoiserModel, denoise_step_S, load_checkpoint, save_checkpoint
from .diffusion import NoiseSchedule, add_noise, cosine_schedule, ddim_step, sample
from .gaussians import GaussianCloud, activate_features, prune
from .render import render, render_rig

__version__ = "0.1.0"
