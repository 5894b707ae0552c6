"""Training: noising, the 3D-aware denoising step, render + latent losses, augmentations, Adam."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .camera import CameraPose, orbit_pose
from .codec import LatentGrid, encode_tensor, split_grid
from .data import DatasetRecord, uniform_sphere_records
from .denoiser import (Checkpoint, DenoiserConfig, DenoiserModel, checkpoint_from_model, head_rays,
                       latent_raymaps, network_input, raymap_mosaic, save_checkpoint, split_views)
from .diffusion import NoiseSchedule, add_noise, cosine_schedule, encode_views, sample_timestep
from .errors import NonFiniteLossError, ShapeError
from .gaussians import PRUNE_THRESHOLD, activate_tensor
from .nn import Adam
from .render import WHITE, RenderOutput, render, render_tensor

CONTROL_GRID = 8


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0  # render pixel loss
    lambda2: float = 0.0  # perceptual loss, unsupported
    lambda3: float = 1.0  # latent (diffusion) loss

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda2 != 0:
            raise ValueError("perceptual loss is not available; lambda2 must be 0")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1
    lr: float = 2e-4
    steps: int = 2000
    seed: int = 0
    p_jitter: float = 0.5
    p_distort: float = 0.5
    distort_strength: float = 0.02
    jitter_deg: float = 1.5
    jitter_radius: float = 0.01
    jitter_roll_deg: float = 1.0
    pixel_loss: str = "l1"
    unseen_views: int = 2
    T: int = 1000
    checkpoint_every: int = 500
    weights: LossWeights = field(default_factory=LossWeights)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)

    def __post_init__(self):
        for name in ("p_jitter", "p_distort"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.unseen_views < 0:
            raise ValueError("unseen_views must be >= 0")
        if self.pixel_loss not in ("l1", "l2"):
            raise ValueError(f"pixel_loss must be 'l1' or 'l2', got {self.pixel_loss!r}")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "model" in d:
            d["model"] = DenoiserConfig.from_dict(d["model"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _images(xs) -> np.ndarray:
    return np.stack([x.color if isinstance(x, RenderOutput) else np.asarray(x, dtype=np.float64) for x in xs])


def render_loss(renders, targets, weights: LossWeights = LossWeights(), kind: str = "l1") -> float:
    """lambda1 times the mean per-pixel L1 (or squared) error over all supervised views."""
    renders, targets = list(renders), list(targets)
    if len(renders) != len(targets):
        raise ShapeError(f"{len(renders)} renders for {len(targets)} targets")
    r, t = _images(renders), _images(targets)
    if r.shape != t.shape:
        raise ShapeError(f"render shape {r.shape} does not match targets {t.shape}")
    diff = r - t
    err = np.abs(diff) if kind == "l1" else diff * diff
    return weights.lambda1 * float(err.mean())


def diffusion_loss(z0_hat: LatentGrid, z0: LatentGrid, weights: LossWeights = LossWeights(),
                   conditioning_mask=None) -> float:
    """lambda3 times the MSE over latent elements of non-conditioning views."""
    if z0_hat.data.shape != z0.data.shape or z0_hat.v != z0.v:
        raise ShapeError(f"latent grids differ: {z0_hat.data.shape} vs {z0.data.shape}")
    mask = conditioning_mask if conditioning_mask is not None else (True,) + (False,) * (z0.v - 1)
    a = [l.data for l, m in zip(split_grid(z0_hat), mask) if not m]
    b = [l.data for l, m in zip(split_grid(z0), mask) if not m]
    if not a:
        return 0.0
    d = np.stack(a).astype(np.float64) - np.stack(b)
    return weights.lambda3 * float(np.mean(d * d))


def render_loss_tensor(pred: ad.Tensor, targets: np.ndarray, weight: float, kind: str = "l1") -> ad.Tensor:
    diff = pred - targets
    err = ad.abs_(diff) if kind == "l1" else ad.square(diff)
    return ad.scale(ad.mean(err), weight)


def diffusion_loss_tensor(pred: ad.Tensor, target: np.ndarray, weight: float) -> ad.Tensor:
    """pred and target are (n, h, w, d) stacks of the non-conditioning view latents."""
    return ad.scale(ad.mean(ad.square(pred - target)), weight)


# ---------------------------------------------------------------------------
# augmentations
# ---------------------------------------------------------------------------

def _upsample_field(ctrl: np.ndarray, h: int, w: int) -> np.ndarray:
    """Separable bilinear interpolation of a control grid to (h, w)."""
    g = ctrl.shape[0]
    ys, xs = np.linspace(0, h - 1, g), np.linspace(0, w - 1, g)
    rows = np.stack([np.interp(np.arange(w), xs, r) for r in ctrl])
    return np.stack([np.interp(np.arange(h), ys, c) for c in rows.T], axis=1)


def distortion_field(rng, height: int, width: int, strength: float) -> tuple[np.ndarray, np.ndarray]:
    """(dy, dx) pixel displacements bounded by ``strength * width``."""
    amp = strength * width
    ctrl = rng.uniform(-1.0, 1.0, (2, CONTROL_GRID, CONTROL_GRID)) * amp
    # bilinear weights are a convex combination, so the per-axis bound carries to the field;
    # the diagonal bound is enforced by rescaling the control vectors
    mag = np.hypot(ctrl[0], ctrl[1])
    ctrl *= np.minimum(1.0, amp / np.maximum(mag, 1e-12))
    return _upsample_field(ctrl[0], height, width), _upsample_field(ctrl[1], height, width)


def _bilinear(image: np.ndarray, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    yy = np.clip(yy, 0, h - 1)
    xx = np.clip(xx, 0, w - 1)
    y0 = np.minimum(np.floor(yy).astype(int), h - 2) if h > 1 else np.zeros_like(yy, dtype=int)
    x0 = np.minimum(np.floor(xx).astype(int), w - 2) if w > 1 else np.zeros_like(xx, dtype=int)
    fy = (yy - y0)[..., None]
    fx = (xx - x0)[..., None]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def grid_distortion(views, strength: float, rng) -> list[np.ndarray]:
    """Warp every view except the first with its own smooth random displacement field."""
    views = list(views)
    out = [views[0]]
    for im in views[1:]:
        im = np.asarray(im, dtype=np.float64)
        if strength == 0:
            out.append(im.copy())
            continue
        h, w = im.shape[:2]
        dy, dx = distortion_field(rng, h, w, strength)
        yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        out.append(_bilinear(im, yy + dy, xx + dx))
    return out


def _pose_angles(pose: CameraPose) -> tuple[float, float, float]:
    x, y, z = pose.origin
    r = float(np.linalg.norm(pose.origin))
    return float(np.degrees(np.arctan2(y, x))), float(np.degrees(np.arcsin(np.clip(z / r, -1, 1)))), r


def _roll(rotation: np.ndarray, deg: float) -> np.ndarray:
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return rotation @ rz


def orbital_jitter(poses, rng, sigma_deg: float = 1.5, radius_sigma: float = 0.01,
                   roll_deg: float = 1.0) -> list[CameraPose]:
    """Perturb azimuth, elevation, radius and roll of orbit poses that look at the origin."""
    out = []
    for p in poses:
        az, el, r = _pose_angles(p)
        noise = rng.standard_normal(4)
        az += sigma_deg * noise[0]
        el = float(np.clip(el + sigma_deg * noise[1], -89.9, 89.9))
        r += radius_sigma * noise[2]
        q = orbit_pose(az, el, r, p.fov_deg, p.image_size)
        out.append(CameraPose(q.origin, _roll(q.rotation, roll_deg * noise[3]), p.fov_deg, p.image_size))
    return out


# ---------------------------------------------------------------------------
# training step
# ---------------------------------------------------------------------------

@dataclass
class _Prepared:
    record: DatasetRecord
    t: int
    cond_poses: list
    poses: list
    targets: np.ndarray  # (v + u, H, W, 3)
    z0_views: np.ndarray  # (v, h, w, 4) clean latents


def _prepare(rec: DatasetRecord, config: TrainConfig, rng, schedule: NoiseSchedule):
    t = sample_timestep(rng, schedule.T)
    clean = [np.asarray(im, dtype=np.float64) for im in rec.rig_images]
    v = len(clean)
    inputs = clean
    if rng.uniform() < config.p_distort:
        inputs = grid_distortion(clean, config.distort_strength, rng)
    poses = rec.rig_poses
    cond_poses = poses
    if rng.uniform() < config.p_jitter:
        cond_poses = orbital_jitter(poses, rng, config.jitter_deg, config.jitter_radius, config.jitter_roll_deg)
    noisy = add_noise(encode_views(inputs), t, rng, (True,) + (False,) * (v - 1), schedule)
    p0 = poses[0]
    unseen = [r.to_pose() for r in uniform_sphere_records(rng, config.unseen_views, float(np.linalg.norm(p0.origin)),
                                                          p0.fov_deg, p0.image_size)]
    targets = clean + [render(rec.cloud, p, WHITE).color for p in unseen]
    z0 = np.stack([l.data for l in split_grid(encode_views(clean))])
    prep = _Prepared(rec, t, cond_poses, poses + unseen, np.stack(targets).astype(np.float32), z0.astype(np.float32))
    return prep, noisy


def train_step(batch, model: DenoiserModel, optimizer: Adam, config: TrainConfig, rng,
               schedule: NoiseSchedule | None = None, step: int = 0) -> dict:
    """One optimizer update on a batch of dataset records; updates ``model`` in place."""
    start = time.perf_counter()
    schedule = schedule or cosine_schedule(config.T)
    preps, noisy = zip(*(_prepare(rec, config, rng, schedule) for rec in batch))
    v = noisy[0].grid.v
    w = config.weights
    x = network_input([n.data for n in noisy], [raymap_mosaic(latent_raymaps(p.cond_poses)) for p in preps])
    up = model.config.head_upsample
    n_kept = []
    with ad.Tape() as tape:
        feats = split_views(model(x, [n.t for n in noisy]), v)
        l_render, l_diff = None, None
        for b, p in enumerate(preps):
            params = activate_tensor(feats[b], head_rays(p.cond_poses, up))
            keep = np.flatnonzero(params["opacities"].data >= PRUNE_THRESHOLD)
            n_kept.append(int(len(keep)))
            params = {k: t[keep] for k, t in params.items()}
            color = render_tensor(params, p.poses, WHITE)[..., :3]
            lr = render_loss_tensor(color, p.targets, w.lambda1, config.pixel_loss)
            ld = diffusion_loss_tensor(encode_tensor(color[1:v]), p.z0_views[1:], w.lambda3)
            l_render = lr if l_render is None else l_render + lr
            l_diff = ld if l_diff is None else l_diff + ld
        inv = 1.0 / len(preps)
        l_render, l_diff = ad.scale(l_render, inv), ad.scale(l_diff, inv)
        loss = l_render + l_diff
    if not np.isfinite(loss.item()):
        raise NonFiniteLossError(
            f"non-finite loss at step {step}",
            {"step": step, "t": [p.t for p in preps], "seed": config.seed,
             "objects": [p.record.object_id for p in preps],
             "l_render": l_render.item(), "l_diff": l_diff.item()})
    grads = tape.backward(loss)
    params = model.parameters()
    grad_norm = float(np.sqrt(sum(float(np.sum(np.square(grads[q], dtype=np.float64)))
                                  for q in params if q in grads)))
    optimizer.step(grads)
    return {"step": step, "t": [p.t for p in preps], "objects": [p.record.object_id for p in preps],
            "l_render": l_render.item(), "l_diff": l_diff.item(), "loss": loss.item(),
            "grad_norm": grad_norm, "n_gaussians": n_kept,
            "wall_ms": 1000.0 * (time.perf_counter() - start)}


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    model: DenoiserModel
    optimizer: Adam
    rng: np.random.Generator
    step: int = 0

    def checkpoint(self, config: TrainConfig) -> Checkpoint:
        return checkpoint_from_model(self.model, self.optimizer, self.step, self.rng.bit_generator.state,
                                     {"train_config": config.to_dict()})


def init_state(config: TrainConfig) -> TrainState:
    model = DenoiserModel(config.model)
    return TrainState(model, Adam(model.parameters(), lr=config.lr), np.random.default_rng(config.seed))


def state_from_checkpoint(ckpt: Checkpoint, config: TrainConfig) -> TrainState:
    model = ckpt.build_model()
    opt = Adam(model.parameters(), lr=config.lr)
    if ckpt.optimizer:
        opt.load_state(ckpt.optimizer)
    rng = np.random.default_rng(config.seed)
    if ckpt.rng_state is not None:
        rng.bit_generator.state = ckpt.rng_state
    return TrainState(model, opt, rng, ckpt.step)


def train(records, config: TrainConfig, out_dir=None, state: TrainState | None = None,
          steps: int | None = None, callback: Callable | None = None) -> TrainState:
    """Run ``steps`` (default: up to ``config.steps``) updates, logging to metrics.jsonl in ``out_dir``."""
    records = list(records)
    if not records:
        raise ValueError("training needs at least one dataset record")
    state = state or init_state(config)
    schedule = cosine_schedule(config.T)
    end = state.step + steps if steps is not None else config.steps
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    while state.step < end:
        idx = state.rng.integers(0, len(records), size=config.batch_size)
        metrics = train_step([records[i] for i in idx], state.model, state.optimizer, config, state.rng,
                             schedule, state.step)
        state.step += 1
        if out is not None:
            with open(out / "metrics.jsonl", "a") as f:
                f.write(json.dumps(metrics) + "\n")
            if state.step % config.checkpoint_every == 0 or state.step == end:
                ckpt = state.checkpoint(config)
                save_checkpoint(out / f"ckpt_{state.step:06d}.dsck", ckpt)
                save_checkpoint(out / "last.dsck", ckpt)
        if callback is not None:
            callback(state, metrics)
    return state
