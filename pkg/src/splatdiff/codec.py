"""Fixed linear latent codec: 8x spatial downsampling, 4 latent channels.

Each 8x8x3 patch (centered on mid-gray) is projected onto four orthonormal
192-vectors: the DC, first horizontal and first vertical DCT-II harmonics of
the luma component, and the DC of a red-minus-blue chroma component. Decode
is the transpose of the projection, so ``encode(decode(z)) == z``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeError

K = 8
D = 4
MID_GRAY = 0.5

_LUMA = np.ones(3) / np.sqrt(3.0)
_CHROMA = np.array([1.0, 0.0, -1.0]) / np.sqrt(2.0)


def _dct(n: int, freq: int) -> np.ndarray:
    x = np.arange(n)
    if freq == 0:
        return np.full(n, 1.0 / np.sqrt(n))
    return np.sqrt(2.0 / n) * np.cos(np.pi * (2 * x + 1) * freq / (2 * n))


def _basis() -> np.ndarray:
    """(4, 192) projection; patch vectors are flattened in (row, col, rgb) order."""
    b0, b1 = _dct(K, 0), _dct(K, 1)
    rows = [
        np.einsum("y,x,c->yxc", b0, b0, _LUMA),
        np.einsum("y,x,c->yxc", b0, b1, _LUMA),
        np.einsum("y,x,c->yxc", b1, b0, _LUMA),
        np.einsum("y,x,c->yxc", b0, b0, _CHROMA),
    ]
    return np.stack([r.reshape(-1) for r in rows])


BASIS = _basis()
_BASIS32 = BASIS.astype(np.float32)


@dataclass(frozen=True)
class Latent:
    data: np.ndarray  # (h/k, w/k, d)
    k: int = K
    d: int = D

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class LatentGrid:
    """Per-view latents tiled as 2 rows x v/2 columns, view order row-major."""

    data: np.ndarray  # (2*h/k, (v/2)*w/k, d)
    v: int

    @property
    def tile_shape(self) -> tuple[int, int]:
        return self.data.shape[0] // 2, self.data.shape[1] // (self.v // 2)


def _patches(images: np.ndarray) -> np.ndarray:
    """(..., h, w, 3) -> (..., h/8, w/8, 192)."""
    *lead, h, w, c = images.shape
    if h % K or w % K or c != 3:
        raise ShapeError(f"encode needs (h, w, 3) with h, w divisible by {K}, got {images.shape}")
    p = images.reshape(*lead, h // K, K, w // K, K, 3)
    p = np.moveaxis(p, -3, -4)  # (..., h/8, w/8, K, K, 3) after swapping the inner row/col-block axes
    return p.reshape(*lead, h // K, w // K, K * K * 3)


def encode_array(images: np.ndarray) -> np.ndarray:
    """Batched encode for (..., h, w, 3) arrays."""
    images = np.asarray(images)
    basis = BASIS if images.dtype == np.float64 else _BASIS32
    return (_patches(images - MID_GRAY) @ basis.T).astype(images.dtype, copy=False)


def encode(image: np.ndarray) -> Latent:
    return Latent(encode_array(np.asarray(image, dtype=np.float64)))


def decode_array(latents: np.ndarray, clamp: bool = True) -> np.ndarray:
    latents = np.asarray(latents)
    *lead, hk, wk, d = latents.shape
    if d != D:
        raise ShapeError(f"latent channel count must be {D}, got {d}")
    p = latents @ BASIS.astype(latents.dtype)
    p = p.reshape(*lead, hk, wk, K, K, 3)
    p = np.moveaxis(p, -4, -3).reshape(*lead, hk * K, wk * K, 3) + MID_GRAY
    return np.clip(p, 0.0, 1.0) if clamp else p


def decode(latent: Latent | np.ndarray) -> np.ndarray:
    data = latent.data if isinstance(latent, Latent) else latent
    return decode_array(np.asarray(data, dtype=np.float64))


def encode_tensor(images: ad.Tensor) -> ad.Tensor:
    """Differentiable encode of a (..., h, w, 3) tensor (linear, so backward is the transpose)."""
    shape = images.shape

    def fwd(x):
        return encode_array(x), None

    def back(_, g):
        return (decode_array(g, clamp=False) - MID_GRAY).reshape(shape).astype(g.dtype),

    return ad.custom(fwd, back, images)


def assemble_grid(latents) -> LatentGrid:
    arrays = [l.data if isinstance(l, Latent) else np.asarray(l) for l in latents]
    v = len(arrays)
    if v == 0 or v % 2:
        raise ShapeError(f"latent grid needs an even, nonzero view count, got {v}")
    if any(a.shape != arrays[0].shape for a in arrays):
        raise ShapeError("latent grid needs equally sized latents")
    half = v // 2
    top = np.concatenate(arrays[:half], axis=1)
    bottom = np.concatenate(arrays[half:], axis=1)
    return LatentGrid(np.concatenate([top, bottom], axis=0), v)


def split_grid(grid: LatentGrid) -> list[Latent]:
    th, tw = grid.tile_shape
    half = grid.v // 2
    return [Latent(grid.data[(i // half) * th:(i // half + 1) * th, (i % half) * tw:(i % half + 1) * tw].copy())
            for i in range(grid.v)]


def mosaic(arrays) -> np.ndarray:
    """Tile per-view (h, w, c) arrays into the 2 x v/2 grid layout."""
    return assemble_grid(list(arrays)).data


def unmosaic(data: np.ndarray, v: int) -> list[np.ndarray]:
    return [l.data for l in split_grid(LatentGrid(data, v))]
