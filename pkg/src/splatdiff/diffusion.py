"""Cosine noise schedule, multiview latent noising, DDIM updates and the K-step sampler.

Index 0 of every schedule array is the clean state; timesteps run 1..T.
The denoiser predicts clean latents (x0-prediction), so DDIM recovers the
noise estimate from that prediction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from . import codec
from .camera import ViewRig
from .codec import LatentGrid
from .errors import PipelineError, ScheduleError, ShapeError
from .gaussians import GaussianCloud
from .render import WHITE, RenderOutput, render_rig

DEFAULT_T = 1000
DEFAULT_STEPS = 50
COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha_bar: np.ndarray  # length T + 1, alpha_bar[0] == 1
    kind: str = "cosine"

    def sqrt_ab(self, t: int) -> float:
        return float(np.sqrt(self.alpha_bar[t]))

    def sqrt_1mab(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alpha_bar[t]))


def _cosine_f(t, T, s=COSINE_OFFSET):
    return np.cos(((np.asarray(t, dtype=np.float64) / T + s) / (1 + s)) * np.pi / 2) ** 2


def cosine_schedule(T: int = DEFAULT_T) -> NoiseSchedule:
    """alpha_bar_t = f(t) / f(0), with each step's beta capped at 0.999."""
    if T < 1:
        raise ScheduleError(f"schedule needs T >= 1, got {T}")
    f = _cosine_f(np.arange(T + 1), T)
    raw = f / f[0]
    ab = raw.copy()
    ab[0] = 1.0
    for t in range(1, T + 1):
        if 1.0 - raw[t] / ab[t - 1] > MAX_BETA:
            ab[t] = ab[t - 1] * (1.0 - MAX_BETA)
        else:
            ab[t] = raw[t]
    return NoiseSchedule(T, ab)


@dataclass(frozen=True)
class NoisyLatentGrid:
    grid: LatentGrid
    t: int
    epsilon: np.ndarray
    conditioning_mask: tuple

    @property
    def data(self) -> np.ndarray:
        return self.grid.data


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def view_mask(grid: LatentGrid, per_view) -> np.ndarray:
    """Expand a per-view boolean list to a (H, W, 1) element mask in mosaic layout."""
    per_view = list(per_view)
    if len(per_view) != grid.v:
        raise ShapeError(f"mask has {len(per_view)} entries for {grid.v} views")
    th, tw = grid.tile_shape
    tiles = [np.full((th, tw, 1), bool(m)) for m in per_view]
    return codec.mosaic(tiles)


def sample_timestep(seed_or_rng, T: int = DEFAULT_T) -> int:
    """Uniform integer in [1, T]."""
    return int(_rng(seed_or_rng).integers(1, T + 1))


def add_noise(grid: LatentGrid, t: int, seed_or_rng, conditioning_mask=None,
              schedule: NoiseSchedule | None = None) -> NoisyLatentGrid:
    """z_t = sqrt(ab_t) z_0 + sqrt(1 - ab_t) eps on every view not flagged in ``conditioning_mask``."""
    schedule = schedule or cosine_schedule()
    if not 0 <= t <= schedule.T:
        raise ScheduleError(f"timestep {t} outside [0, {schedule.T}]")
    mask = tuple(bool(m) for m in (conditioning_mask if conditioning_mask is not None else [False] * grid.v))
    eps = _rng(seed_or_rng).standard_normal(grid.data.shape)
    keep = view_mask(grid, mask)
    eps = np.where(keep, 0.0, eps)
    z = np.where(keep, grid.data, schedule.sqrt_ab(t) * grid.data + schedule.sqrt_1mab(t) * eps)
    return NoisyLatentGrid(LatentGrid(z.astype(grid.data.dtype), grid.v), t, eps, mask)


def ddim_timesteps(T: int, K: int) -> np.ndarray:
    """K + 1 strictly descending timesteps from T to 0 with uniform stride."""
    if not 1 <= K <= T:
        raise ScheduleError(f"step count {K} outside [1, {T}]")
    return np.floor(np.linspace(T, 0, K + 1) + 0.5).astype(np.int64)


def ddim_step(z_t: NoisyLatentGrid, z0_hat: LatentGrid, t_prev: int,
              schedule: NoiseSchedule | None = None) -> NoisyLatentGrid:
    """Deterministic (eta = 0) DDIM update from t to t_prev given a clean-latent prediction."""
    schedule = schedule or cosine_schedule()
    t = z_t.t
    if t_prev >= t or t_prev < 0:
        raise ScheduleError(f"DDIM needs 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    if z0_hat.data.shape != z_t.data.shape:
        raise ShapeError(f"prediction {z0_hat.data.shape} does not match grid {z_t.data.shape}")
    zt = z_t.data.astype(np.float64)
    x0 = z0_hat.data.astype(np.float64)
    eps_hat = (zt - schedule.sqrt_ab(t) * x0) / schedule.sqrt_1mab(t)
    z_prev = schedule.sqrt_ab(t_prev) * x0 + schedule.sqrt_1mab(t_prev) * eps_hat
    keep = view_mask(z_t.grid, z_t.conditioning_mask)
    z_prev = np.where(keep, zt, z_prev)
    eps_hat = np.where(keep, 0.0, eps_hat)
    return NoisyLatentGrid(LatentGrid(z_prev.astype(z_t.data.dtype), z_t.grid.v), int(t_prev),
                           eps_hat, z_t.conditioning_mask)


class Denoiser(Protocol):
    """Maps a noisy latent grid and its rig to a Gaussian cloud (the 3D-model map)."""

    def __call__(self, noisy: NoisyLatentGrid, rig: ViewRig) -> GaussianCloud: ...


def encode_views(images) -> LatentGrid:
    return codec.assemble_grid([codec.encode_array(np.asarray(im, dtype=np.float64)) for im in images])


def sample(input_image: np.ndarray, rig: ViewRig, denoiser: Callable, steps: int = DEFAULT_STEPS,
           seed: int = 0, schedule: NoiseSchedule | None = None, background=WHITE,
           callback: Callable | None = None) -> tuple[GaussianCloud, list[RenderOutput]]:
    """Generate a Gaussian cloud and its rig renders from a single conditioning image (view 0).

    Each step runs the denoiser, renders the rig, re-encodes the renders as the
    clean-latent prediction and takes a DDIM step. Returns the cloud from the
    last denoiser call and its renders.
    """
    schedule = schedule or cosine_schedule()
    image = np.asarray(input_image, dtype=np.float64)
    pose0 = rig.poses[0]
    if image.shape != (pose0.height, pose0.width, 3):
        raise ShapeError(f"input image {image.shape} does not match rig size {(pose0.height, pose0.width, 3)}")
    v = len(rig)
    cond = codec.encode_array(image)
    clean = codec.assemble_grid([cond] + [np.zeros_like(cond)] * (v - 1))
    mask = (True,) + (False,) * (v - 1)
    rng = np.random.default_rng(seed)
    noisy = add_noise(clean, schedule.T, rng, mask, schedule)
    ts = ddim_timesteps(schedule.T, steps)
    cloud, renders = None, None
    for t_prev in ts[1:]:
        cloud = denoiser(noisy, rig)
        if not isinstance(cloud, GaussianCloud):
            raise PipelineError(f"denoiser returned {type(cloud).__name__}, expected GaussianCloud")
        renders = render_rig(cloud, rig, background)
        if len(renders) != v:
            raise PipelineError("render count does not match the rig")
        z0_hat = encode_views([r.color for r in renders])
        if z0_hat.data.shape != noisy.data.shape:
            raise PipelineError(f"re-encoded grid {z0_hat.data.shape} does not match {noisy.data.shape}")
        noisy = ddim_step(noisy, z0_hat, int(t_prev), schedule)
        if callback is not None:
            callback(noisy, cloud, renders)
    return cloud, renders


@dataclass
class OracleDenoiser:
    """Ignores its input and returns a fixed cloud; used to test the sampler end to end."""

    cloud: GaussianCloud
    calls: int = 0

    def __call__(self, noisy: NoisyLatentGrid, rig: ViewRig) -> GaussianCloud:
        self.calls += 1
        return self.cloud
