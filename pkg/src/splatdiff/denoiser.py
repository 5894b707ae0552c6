"""Mosaic U-Net with a Gaussian head, the 3D-aware denoising step, and checkpoints.

The network sees the 2 x v/2 latent mosaic concatenated with the matching
Plücker ray-map mosaic, conditions every residual block on a timestep
embedding, and emits a 14-channel map at 4x latent resolution, i.e. one
pixel-aligned Gaussian per pixel of a half-resolution view.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import codec
from .camera import CameraPose, ViewRig, downsample_raymap, plucker_map
from .codec import LatentGrid
from .diffusion import NoisyLatentGrid
from .errors import CheckpointError, ShapeError
from .gaussians import (N_FEATURES, GaussianCloud, PixelRays, activate_tensor, cloud_from_tensors,
                        concat_rays, pixel_rays, prune)
from .nn import Conv2d, GroupNorm, Linear, Module, timestep_embedding
from .render import WHITE, RenderOutput, render_rig

CHECKPOINT_MAGIC = b"DSCK"
CHECKPOINT_VERSION = 1
DTYPE_F32 = 0


@dataclass(frozen=True)
class DenoiserConfig:
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2, 4)
    blocks_per_scale: int = 2
    latent_channels: int = codec.D
    raymap_channels: int = 6
    time_embed_dim: int = 128
    out_channels: int = N_FEATURES
    head_upsample: int = 4
    groups: int = 8
    # "prior" starts the head at small, faint, identity-rotated Gaussians;
    # "zero" leaves every head bias at zero.
    head_init: str = "prior"
    init_scale: float = 0.01
    init_opacity: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        mults = self.channel_multipliers
        if self.out_channels != N_FEATURES:
            raise ValueError(f"out_channels must be {N_FEATURES}")
        if not mults or any(b <= a for a, b in zip(mults, mults[1:])) or mults[0] < 1:
            raise ValueError(f"channel multipliers must be nonempty and increasing, got {mults}")
        if self.head_upsample < 2 or self.head_upsample & (self.head_upsample - 1):
            raise ValueError("head_upsample must be a power of two >= 2")
        if self.head_init not in ("prior", "zero"):
            raise ValueError(f"unknown head_init {self.head_init!r}")
        if self.blocks_per_scale < 1:
            raise ValueError("blocks_per_scale must be >= 1")

    @property
    def in_channels(self) -> int:
        return self.latent_channels + self.raymap_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


def head_widths(config: DenoiserConfig) -> list[int]:
    """Output channels of each 2x head stage; the last is always 14."""
    n = int(round(math.log2(config.head_upsample)))
    widths, ch = [], config.base_channels
    for _ in range(n - 1):
        ch = max(ch // 2, 8)
        widths.append(ch)
    return widths + [config.out_channels]


class ResBlock(Module):
    def __init__(self, cin: int, cout: int, temb: int, groups: int, rng):
        self.norm1 = GroupNorm(cin, groups)
        self.conv1 = Conv2d(cin, cout, 3, rng=rng)
        self.time = Linear(temb, cout, rng)
        self.norm2 = GroupNorm(cout, groups)
        self.conv2 = Conv2d(cout, cout, 3, rng=rng)
        self.skip = Conv2d(cin, cout, 1, rng=rng) if cin != cout else None
        self.cout = cout

    def __call__(self, x, temb):
        h = self.conv1(ad.silu(self.norm1(x)))
        h = h + self.time(temb).reshape(x.shape[0], self.cout, 1, 1)
        h = self.conv2(ad.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class Downsample(Module):
    def __init__(self, ch: int, rng):
        self.conv = Conv2d(ch, ch, 3, stride=2, rng=rng)

    def __call__(self, x):
        return self.conv(x)


class Upsample(Module):
    def __init__(self, cin: int, cout: int, rng, zero: bool = False):
        self.conv = Conv2d(cin, cout, 3, rng=rng, zero=zero)

    def __call__(self, x):
        return self.conv(ad.upsample_nearest(x, 2))


class DenoiserModel(Module):
    def __init__(self, config: DenoiserConfig | None = None):
        self.config = config = config or DenoiserConfig()
        rng = np.random.default_rng(config.seed)
        c0, temb, g = config.base_channels, config.time_embed_dim, config.groups
        chans = [c0 * m for m in config.channel_multipliers]
        self.time1 = Linear(temb, temb, rng)
        self.time2 = Linear(temb, temb, rng)
        self.conv_in = Conv2d(config.in_channels, c0, 3, rng=rng)

        self.down_blocks, self.downsamples = [], []
        ch = c0
        for i, c in enumerate(chans):
            for _ in range(config.blocks_per_scale):
                self.down_blocks.append(ResBlock(ch, c, temb, g, rng))
                ch = c
            if i < len(chans) - 1:
                self.downsamples.append(Downsample(ch, rng))
        self.mid = ResBlock(ch, ch, temb, g, rng)

        self.up_blocks, self.upsamples = [], []
        for i in reversed(range(len(chans))):
            c = chans[i]
            self.up_blocks.append(ResBlock(ch + c, c, temb, g, rng))
            for _ in range(config.blocks_per_scale - 1):
                self.up_blocks.append(ResBlock(c, c, temb, g, rng))
            ch = c
            if i > 0:
                self.upsamples.append(Upsample(ch, chans[i - 1], rng))
                ch = chans[i - 1]
        self.norm_out = GroupNorm(ch, g)

        self.head = []
        widths = head_widths(config)
        for j, w in enumerate(widths):
            self.head.append(Upsample(ch, w, rng, zero=j == len(widths) - 1))
            ch = w
        if config.head_init == "prior":
            self.head[-1].conv.bias.data = head_prior_bias(config)

    # -- forward ------------------------------------------------------------

    def __call__(self, x, t) -> ad.Tensor:
        """(B, 10, Hm, Wm) input mosaic and B timesteps -> (B, 14, 4Hm, 4Wm) raw features."""
        cfg = self.config
        x = ad.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected (B, {cfg.in_channels}, H, W) input, got {x.shape}")
        levels = len(cfg.channel_multipliers)
        factor = 2 ** (levels - 1)
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ShapeError(f"mosaic dims {x.shape[2:]} must be divisible by {factor}")
        emb = timestep_embedding(np.broadcast_to(np.asarray(t), (x.shape[0],)), cfg.time_embed_dim)
        temb = ad.silu(self.time2(ad.silu(self.time1(ad.Tensor(emb)))))

        h = self.conv_in(x)
        skips = []
        blocks = iter(self.down_blocks)
        for i in range(levels):
            for _ in range(cfg.blocks_per_scale):
                h = next(blocks)(h, temb)
            skips.append(h)
            if i < levels - 1:
                h = self.downsamples[i](h)
        h = self.mid(h, temb)
        blocks = iter(self.up_blocks)
        ups = iter(self.upsamples)
        for i in reversed(range(levels)):
            h = ad.concat([h, skips[i]], axis=1)
            for _ in range(cfg.blocks_per_scale):
                h = next(blocks)(h, temb)
            if i > 0:
                h = next(ups)(h)
        h = ad.silu(self.norm_out(h))
        for j, stage in enumerate(self.head):
            h = stage(h)
            if j < len(self.head) - 1:
                h = ad.silu(h)
        return h


def head_prior_bias(config: DenoiserConfig) -> np.ndarray:
    b = np.zeros(N_FEATURES, dtype=np.float32)
    b[3:6] = np.log(config.init_scale)
    b[9] = np.log(config.init_opacity / (1.0 - config.init_opacity))
    b[10] = 1.0
    return b


def parameter_count(config: DenoiserConfig) -> int:
    """Closed-form trainable parameter count of :class:`DenoiserModel`."""
    c0, temb, bps = config.base_channels, config.time_embed_dim, config.blocks_per_scale
    chans = [c0 * m for m in config.channel_multipliers]

    def conv(ci, co, k=3):
        return co * ci * k * k + co

    def res(ci, co):
        n = 2 * ci + conv(ci, co) + temb * co + co + 2 * co + conv(co, co)
        return n + (conv(ci, co, 1) if ci != co else 0)

    n = 2 * (temb * temb + temb) + conv(config.in_channels, c0)
    ch = c0
    for i, c in enumerate(chans):
        for _ in range(bps):
            n += res(ch, c)
            ch = c
        if i < len(chans) - 1:
            n += conv(ch, ch)
    n += res(ch, ch)
    for i in reversed(range(len(chans))):
        c = chans[i]
        n += res(ch + c, c) + (bps - 1) * res(c, c)
        ch = c
        if i > 0:
            n += conv(ch, chans[i - 1])
            ch = chans[i - 1]
    n += 2 * ch
    for w in head_widths(config):
        n += conv(ch, w)
        ch = w
    return n


# ---------------------------------------------------------------------------
# mosaic plumbing
# ---------------------------------------------------------------------------

def latent_raymaps(poses, k: int = codec.K) -> list:
    """Per-view Plücker maps at latent resolution."""
    return [downsample_raymap(plucker_map(p), k) for p in poses]


def raymap_mosaic(raymaps) -> np.ndarray:
    return codec.mosaic([r.data for r in raymaps])


def head_rays(poses, upsample: int = 4, k: int = codec.K) -> PixelRays:
    """Anchor rays for every head pixel of every view, view-major then row-major."""
    out = []
    for p in poses:
        if p.width * upsample % k or p.height * upsample % k:
            raise ShapeError(f"view size {p.image_size} incompatible with the head resolution")
        out.append(pixel_rays(p, p.width * upsample // k, p.height * upsample // k))
    return concat_rays(out)


def network_input(noisy_grids, raymap_grids) -> np.ndarray:
    """Stack (Hm, Wm, 4) latent and (Hm, Wm, 6) ray mosaics into a (B, 10, Hm, Wm) batch."""
    xs = []
    for z, r in zip(noisy_grids, raymap_grids):
        z = np.asarray(z)
        r = np.asarray(r)
        if z.shape[:2] != r.shape[:2]:
            raise ShapeError(f"latent mosaic {z.shape[:2]} does not match ray mosaic {r.shape[:2]}")
        xs.append(np.concatenate([z, r], axis=-1).transpose(2, 0, 1))
    return np.stack(xs).astype(np.float32)


def split_views(features: ad.Tensor, v: int) -> ad.Tensor:
    """(B, C, 2h, (v/2)w) mosaic -> (B, v*h*w, C), views row-major and pixels row-major."""
    b, c, hh, ww = features.shape
    half = v // 2
    if hh % 2 or ww % half:
        raise ShapeError(f"feature mosaic {(hh, ww)} does not split into {v} views")
    th, tw = hh // 2, ww // half
    x = features.transpose(0, 2, 3, 1).reshape(b, 2, th, half, tw, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, v * th * tw, c)


def unet_forward(model: DenoiserModel, noisy: NoisyLatentGrid, raymaps) -> list[np.ndarray]:
    """Per-view (h, w, 14) raw feature maps for one noisy grid."""
    v = noisy.grid.v
    if len(raymaps) != v:
        raise ShapeError(f"{len(raymaps)} ray maps for {v} views")
    x = network_input([noisy.data], [raymap_mosaic(raymaps)])
    out = model(x, [noisy.t])
    hh, ww = out.shape[2:]
    th, tw = hh // 2, ww // (v // 2)
    flat = split_views(out, v).data[0]
    return [flat[i * th * tw:(i + 1) * th * tw].reshape(th, tw, N_FEATURES) for i in range(v)]


def gaussians_from_features(features: ad.Tensor, rays: PixelRays, v: int) -> list[dict]:
    """Activate a (B, C, H, W) head output into per-object parameter tensor dicts."""
    per_obj = split_views(features, v)
    return [activate_tensor(per_obj[b], rays) for b in range(per_obj.shape[0])]


def _source_view(poses, upsample: int) -> np.ndarray:
    return np.concatenate([np.full(p.width * upsample // codec.K * p.height * upsample // codec.K, i)
                           for i, p in enumerate(poses)]).astype(np.int32)


def predict_cloud(model: DenoiserModel, noisy: NoisyLatentGrid, poses, prune_cloud: bool = True) -> GaussianCloud:
    """Run the network once without recording a tape and return the activated cloud."""
    poses = list(poses)
    feats = model(network_input([noisy.data], [raymap_mosaic(latent_raymaps(poses))]), [noisy.t])
    up = model.config.head_upsample
    params = gaussians_from_features(feats, head_rays(poses, up), noisy.grid.v)[0]
    cloud = cloud_from_tensors(params, _source_view(poses, up))
    return prune(cloud) if prune_cloud else cloud


def denoise_step_S(noisy: NoisyLatentGrid, rig: ViewRig, model: DenoiserModel,
                   background=WHITE) -> tuple[LatentGrid, GaussianCloud, list[RenderOutput]]:
    """Network -> Gaussians -> pruned cloud -> rig renders -> re-encoded latent grid."""
    cloud = predict_cloud(model, noisy, rig.poses)
    renders = render_rig(cloud, rig, background)
    grid = codec.assemble_grid([codec.encode_array(r.color) for r in renders])
    return grid, cloud, renders


@dataclass
class ModelDenoiser:
    """Adapter giving a trained model the sampler's denoiser signature."""

    model: DenoiserModel

    def __call__(self, noisy: NoisyLatentGrid, rig: ViewRig) -> GaussianCloud:
        return predict_cloud(self.model, noisy, rig.poses)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: DenoiserConfig
    params: dict
    optimizer: dict = field(default_factory=dict)
    step: int = 0
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)

    def build_model(self) -> DenoiserModel:
        model = DenoiserModel(self.config)
        model.load_state_dict(self.params)
        return model


_U32 = struct.Struct("<I")
_TENSOR_HEAD = struct.Struct("<HBB")


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps({"config": ckpt.config.to_dict(), "step": int(ckpt.step),
                         "rng_state": ckpt.rng_state, "meta": ckpt.meta}, sort_keys=True).encode()
    tensors = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    tensors += [(f"optim/{k}", v) for k, v in ckpt.optimizer.items()]
    parts = [CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_VERSION), _U32.pack(len(header)), header,
             _U32.pack(len(tensors))]
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode()
        parts.append(_TENSOR_HEAD.pack(len(raw), DTYPE_F32, arr.ndim))
        parts.append(raw)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = r.unpack(_U32)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = r.unpack(_U32)
    try:
        header = json.loads(r.take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    (count,) = r.unpack(_U32)
    params, optim = {}, {}
    for _ in range(count):
        nlen, dtype, ndim = r.unpack(_TENSOR_HEAD)
        name = r.take(nlen).decode()
        if dtype != DTYPE_F32:
            raise CheckpointError(f"tensor {name}: unknown dtype tag {dtype}")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        kind, _, key = name.partition("/")
        (params if kind == "param" else optim)[key] = arr
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint payload")
    try:
        config = DenoiserConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid checkpoint config: {exc}") from None
    return Checkpoint(config, params, optim, int(header.get("step", 0)), header.get("rng_state"),
                      header.get("meta", {}))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    try:
        return checkpoint_from_bytes(buf)
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None


def checkpoint_from_model(model: DenoiserModel, optimizer=None, step: int = 0, rng_state=None,
                          meta=None) -> Checkpoint:
    return Checkpoint(model.config, {k: v.copy() for k, v in model.state_dict().items()},
                      {k: np.asarray(v).copy() for k, v in optimizer.state().items()} if optimizer else {},
                      step, rng_state, dict(meta or {}))
