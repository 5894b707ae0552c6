"""Gaussian clouds, the 14-channel feature head activation, pruning and cloud files."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .camera import CameraPose
from .errors import CheckpointError, ShapeError

N_FEATURES = 14
PRUNE_THRESHOLD = 0.005
T_MAX = 3.0
SCALE_LOG_RANGE = (-10.0, 2.0)
CLOUD_MAGIC = b"DSPL"
CLOUD_VERSION = 1


@dataclass(frozen=True)
class Gaussian:
    position: np.ndarray
    scale: np.ndarray
    color: np.ndarray
    opacity: float
    orientation: np.ndarray  # unit quaternion (w, x, y, z)


@dataclass
class GaussianCloud:
    """Structure-of-arrays cloud. ``rotations`` are unit quaternions in (w, x, y, z) order."""

    positions: np.ndarray
    scales: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    rotations: np.ndarray
    source_view: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.positions)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(n, 3)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        if self.source_view is not None:
            self.source_view = np.asarray(self.source_view, dtype=np.int64).reshape(n)

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.positions[i], self.scales[i], self.colors[i],
                        float(self.opacities[i]), self.rotations[i])

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 4)))

    @classmethod
    def from_gaussians(cls, gaussians) -> "GaussianCloud":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty()
        return cls(np.stack([g.position for g in gaussians]), np.stack([g.scale for g in gaussians]),
                   np.stack([g.color for g in gaussians]), np.array([g.opacity for g in gaussians]),
                   np.stack([g.orientation for g in gaussians]))

    def subset(self, index) -> "GaussianCloud":
        sv = None if self.source_view is None else self.source_view[index]
        return GaussianCloud(self.positions[index], self.scales[index], self.colors[index],
                             self.opacities[index], self.rotations[index], sv)

    def validate(self, atol: float = 1e-6) -> None:
        """Raise ValueError if any member breaks the Gaussian invariants."""
        if not np.all(np.isfinite(self.packed())):
            raise ValueError("non-finite Gaussian parameters")
        if np.any(self.scales <= 0):
            raise ValueError("scales must be strictly positive")
        if np.any(np.abs(np.linalg.norm(self.rotations, axis=1) - 1.0) > atol):
            raise ValueError("orientations must be unit quaternions")
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise ValueError("opacity outside [0, 1]")
        if np.any((self.colors < 0) | (self.colors > 1)):
            raise ValueError("color outside [0, 1]")

    def packed(self) -> np.ndarray:
        """(N, 14) in file order: pos, scale, color, opacity, quat wxyz."""
        return np.concatenate([self.positions, self.scales, self.colors,
                               self.opacities[:, None], self.rotations], axis=1)

    @classmethod
    def from_packed(cls, arr: np.ndarray) -> "GaussianCloud":
        arr = np.asarray(arr, dtype=np.float64).reshape(-1, N_FEATURES)
        return cls(arr[:, 0:3], arr[:, 3:6], arr[:, 6:9], arr[:, 9], arr[:, 10:14])


def merge(clouds) -> GaussianCloud:
    clouds = list(clouds)
    if not clouds:
        return GaussianCloud.empty()
    sv = None
    if all(c.source_view is not None for c in clouds):
        sv = np.concatenate([c.source_view for c in clouds])
    return GaussianCloud(*(np.concatenate([getattr(c, f) for c in clouds])
                           for f in ("positions", "scales", "colors", "opacities", "rotations")), sv)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions (w, x, y, z); input need not be normalized."""
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1).reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quat_to_matrix` for proper rotations, w >= 0."""
    m = np.asarray(m, dtype=np.float64)
    flat = m.reshape(-1, 3, 3)
    out = np.empty((len(flat), 4))
    for i, r in enumerate(flat):
        tr = np.trace(r)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
            q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif r[1, 1] > r[2, 2]:
            s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
            q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
            q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        q = np.array(q)
        out[i] = q if q[0] >= 0 else -q
    return out.reshape(m.shape[:-2] + (4,))


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def covariance(g: Gaussian | GaussianCloud) -> np.ndarray:
    """R(q) diag(s^2) R(q)^T; works on a single Gaussian or a whole cloud."""
    if isinstance(g, GaussianCloud):
        rot, s = quat_to_matrix(g.rotations), g.scales
    else:
        rot, s = quat_to_matrix(np.asarray(g.orientation, dtype=np.float64)), np.asarray(g.scale)
    m = rot * s[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def prune(cloud: GaussianCloud, threshold: float = PRUNE_THRESHOLD) -> GaussianCloud:
    """Drop Gaussians whose opacity is below ``threshold``; survivors keep their order."""
    return cloud.subset(np.flatnonzero(cloud.opacities >= threshold))


# ---------------------------------------------------------------------------
# feature-map activation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PixelRays:
    """Per-Gaussian anchor rays: camera origin, unit direction and two tangent axes."""

    origins: np.ndarray
    directions: np.ndarray
    right: np.ndarray
    down: np.ndarray
    footprint: np.ndarray  # tangential offset bound per unit depth


def pixel_rays(pose: CameraPose, width: int, height: int) -> PixelRays:
    """Anchor rays at (height, width) head resolution, flattened row-major."""
    from .camera import ray_directions

    d = ray_directions(pose, width, height).reshape(-1, 3)
    n = len(d)
    right = np.broadcast_to(pose.rotation[:, 0], (n, 3))
    down = np.broadcast_to(pose.rotation[:, 1], (n, 3))
    pix = 2.0 * np.tan(np.deg2rad(pose.fov_deg) / 2.0) / width
    return PixelRays(np.broadcast_to(pose.origin, (n, 3)).copy(), d, right.copy(), down.copy(),
                     np.full(n, pix))


def concat_rays(rays) -> PixelRays:
    rays = list(rays)
    return PixelRays(*(np.concatenate([getattr(r, f) for r in rays])
                       for f in ("origins", "directions", "right", "down", "footprint")))


def activate_tensor(raw: ad.Tensor, rays: PixelRays) -> dict[str, ad.Tensor]:
    """Differentiable map from (N, 14) raw features to Gaussian parameter tensors.

    position = origin + depth * d + depth * footprint * (tanh(c1) * right + tanh(c2) * down)
    with depth = T_MAX * sigmoid(c0); scale = exp(clamp(c3:6)); color = sigmoid(c6:9);
    opacity = sigmoid(c9); rotation = normalize(c10:14), zero vectors map to (1, 0, 0, 0).
    """
    n = raw.shape[0]
    if raw.ndim != 2 or raw.shape[1] != N_FEATURES or len(rays.origins) != n:
        raise ShapeError(f"raw features {raw.shape} do not match {len(rays.origins)} pixel rays")
    depth = ad.scale(ad.sigmoid(raw[:, 0:1]), T_MAX)
    lateral = depth * rays.footprint[:, None]
    offset = (ad.tanh(raw[:, 1:2]) * rays.right + ad.tanh(raw[:, 2:3]) * rays.down) * lateral
    positions = depth * rays.directions + offset + rays.origins
    scales = ad.exp(ad.clamp(raw[:, 3:6], *SCALE_LOG_RANGE))
    colors = ad.sigmoid(raw[:, 6:9])
    opacities = ad.sigmoid(raw[:, 9])
    q = raw[:, 10:14]
    degenerate = (np.sum(q.data.astype(np.float64) ** 2, axis=1) < 1e-24).astype(np.float64)
    q = q + np.outer(degenerate, [1.0, 0.0, 0.0, 0.0])
    norm = ad.sqrt(ad.sum_(ad.square(q), axis=1, keepdims=True))
    rotations = q / norm
    return {"positions": positions, "scales": scales, "colors": colors,
            "opacities": opacities, "rotations": rotations}


def cloud_from_tensors(params: dict[str, ad.Tensor], source_view=None) -> GaussianCloud:
    cloud = GaussianCloud(*(params[k].data.astype(np.float64)
                            for k in ("positions", "scales", "colors", "opacities", "rotations")),
                          source_view)
    # float32 rounding can leave |q| a few ulps off 1
    cloud.rotations /= np.linalg.norm(cloud.rotations, axis=1, keepdims=True)
    return cloud


def _frame_from_rays(d: np.ndarray):
    """Recover camera right/down axes and 1/focal from a symmetric pinhole ray grid."""
    tl, tr, bl, br = d[0, 0], d[0, -1], d[-1, 0], d[-1, -1]
    forward = tl + tr + bl + br
    forward /= np.linalg.norm(forward)
    right = tr + br - tl - bl
    down = bl + br - tl - tr
    right = right / np.linalg.norm(right) if np.linalg.norm(right) > 0 else np.cross(forward, [0.0, 0.0, 1.0])
    down = down / np.linalg.norm(down) if np.linalg.norm(down) > 0 else np.cross(forward, right)
    w = d.shape[1]
    if w < 2:
        return right, down, 0.0
    x = np.dot(tr, right) / np.dot(tr, forward)
    return right, down, x / (w / 2.0 - 0.5)


def activate_features(raw: np.ndarray, ray_map_or_rays, pose: CameraPose | None = None) -> GaussianCloud:
    """Map a (H, W, 14) feature map to Gaussians anchored on that view's pixel rays.

    ``ray_map_or_rays`` is either a :class:`PixelRays` or a :class:`~splatdiff.camera.RayMap`
    at the feature-map resolution. For a ray map the tangent axes and pixel footprint
    come from ``pose`` when given, otherwise they are recovered from the corner rays.
    """
    from .camera import RayMap

    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[-1] != N_FEATURES:
        raise ShapeError(f"feature map must be (H, W, {N_FEATURES}), got {raw.shape}")
    h, w = raw.shape[:2]
    if isinstance(ray_map_or_rays, RayMap):
        rm = ray_map_or_rays
        if rm.shape != (h, w):
            raise ShapeError(f"ray map {rm.shape} does not match feature map {(h, w)}")
        d = rm.directions.reshape(-1, 3)
        if rm.origin is not None:
            origins = np.broadcast_to(rm.origin, d.shape).copy()
        else:
            origins = np.cross(d, rm.moments.reshape(-1, 3))
        if pose is not None:
            right, down = pose.rotation[:, 0], pose.rotation[:, 1]
            pix = 1.0 / pose.with_size(w, h).focal
        else:
            right, down, pix = _frame_from_rays(rm.directions)
        n = len(d)
        rays = PixelRays(origins, d, np.broadcast_to(right, (n, 3)).copy(),
                         np.broadcast_to(down, (n, 3)).copy(), np.full(n, pix))
    else:
        rays = ray_map_or_rays
        if len(rays.origins) != h * w:
            raise ShapeError(f"{len(rays.origins)} rays for a {(h, w)} feature map")
    with ad.default_dtype(np.float64):
        params = activate_tensor(ad.Tensor(raw.reshape(-1, N_FEATURES)), rays)
    return cloud_from_tensors(params)


# ---------------------------------------------------------------------------
# binary cloud files
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIQ")


def cloud_to_bytes(cloud: GaussianCloud) -> bytes:
    body = cloud.packed().astype("<f4").tobytes()
    return _HEADER.pack(CLOUD_MAGIC, CLOUD_VERSION, len(cloud)) + body


def cloud_from_bytes(buf: bytes) -> GaussianCloud:
    if len(buf) < _HEADER.size:
        raise CheckpointError("cloud file truncated before header end")
    magic, version, count = _HEADER.unpack_from(buf)
    if magic != CLOUD_MAGIC:
        raise CheckpointError(f"bad cloud magic {magic!r}")
    if version != CLOUD_VERSION:
        raise CheckpointError(f"unsupported cloud version {version}")
    expected = _HEADER.size + count * N_FEATURES * 4
    if len(buf) != expected:
        raise CheckpointError(f"cloud file holds {len(buf)} bytes, expected {expected}")
    arr = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(count, N_FEATURES)
    return GaussianCloud.from_packed(arr.astype(np.float64))


def save_cloud(path, cloud: GaussianCloud) -> None:
    Path(path).write_bytes(cloud_to_bytes(cloud))


def load_cloud(path) -> GaussianCloud:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read cloud file {path}: {exc}") from exc
    return cloud_from_bytes(buf)
